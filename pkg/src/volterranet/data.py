"""CIFAR binary ingestion, synthetic datasets, normalization and augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ConvGeometry, im2col_batch

IMAGE_BYTES = 3 * 32 * 32
VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


def decode_cifar_bytes(raw: bytes, variant: str = "cifar10") -> LabeledImageSet:
    label_bytes, k = VARIANTS[variant]
    rec = label_bytes + IMAGE_BYTES
    if len(raw) % rec:
        raise FormatError(
            f"{len(raw)} bytes is not a multiple of the {rec}-byte {variant} record"
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = buf[:, label_bytes - 1].astype(np.int64)  # CIFAR-100: fine label is the 2nd byte
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"label {labels[i]} >= {k} at byte offset {i * rec + label_bytes - 1}"
        )
    images = buf[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images, labels, k)


def load_cifar_binary(path, variant: str = "cifar10") -> LabeledImageSet:
    """Read one CIFAR binary batch file (or a directory of ``*.bin`` files)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin"))
        if not files:
            raise FileNotFoundError(f"no .bin files in {path}")
        parts = [load_cifar_binary(f, variant) for f in files]
        return LabeledImageSet(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
        )
    with open(path, "rb") as fh:
        return decode_cifar_bytes(fh.read(), variant)


def encode_cifar_bytes(data: LabeledImageSet, variant: str = "cifar10") -> bytes:
    """Inverse of :func:`decode_cifar_bytes` for 3x32x32 images in [0, 1].

    CIFAR-100 records get coarse label 0.
    """
    label_bytes, k = VARIANTS[variant]
    if data.images.shape[1:] != (3, 32, 32):
        raise ValueError("the binary format holds 3x32x32 images only")
    if data.num_classes > k:
        raise ValueError(f"{data.num_classes} classes do not fit {variant}")
    pix = np.rint(np.clip(data.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(data), -1)
    out = np.zeros((len(data), label_bytes + IMAGE_BYTES), dtype=np.uint8)
    out[:, label_bytes - 1] = data.labels
    out[:, label_bytes:] = pix
    return out.tobytes()


def compute_stats(train: LabeledImageSet) -> NormalizationStats:
    x = train.images
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    # a constant channel can leave rounding noise instead of an exact zero
    if np.any(~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))):
        raise ValueError(f"channel with zero standard deviation: std={std}")
    return NormalizationStats(mean, std)


def apply_normalization(data: LabeledImageSet, stats: NormalizationStats) -> LabeledImageSet:
    x = (data.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return LabeledImageSet(x, data.labels, data.num_classes)


def invert_normalization(data: LabeledImageSet, stats: NormalizationStats) -> LabeledImageSet:
    x = data.images * stats.std[None, :, None, None] + stats.mean[None, :, None, None]
    return LabeledImageSet(x, data.labels, data.num_classes)


def reflect_pad(image: np.ndarray, pad: int) -> np.ndarray:
    """Mirror about the border pixel without repeating it (``d c b | a b c d | c b a``)."""
    return np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p = 0.5), then reflect-pad and random crop back to size."""
    flip = rng.random() < 0.5
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return augment_with(image, bool(flip), int(dy), int(dx), pad)


def augment_with(image: np.ndarray, flip: bool, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    _, h, w = image.shape
    if flip:
        image = image[:, :, ::-1]
    padded = reflect_pad(image, pad)
    return np.ascontiguousarray(padded[:, dy : dy + h, dx : dx + w])


def augment_batch(images: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    flips = rng.random(images.shape[0]) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(images.shape[0], 2))
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = augment_with(images[i], bool(flips[i]), int(offsets[i, 0]), int(offsets[i, 1]), pad)
    return out


@dataclass(frozen=True)
class QuadraticRule:
    """Labelling rule of the quadratic synthetic set.

    An image is centred as ``c = (image - 0.5) / scale`` and scored with
    ``T = sum_p c_p^T A c_p - threshold`` over every zero-padded 3x3 patch
    ``c_p`` (``9 * channels`` values). The label is ``T > 0``.
    ``spread`` is the standard deviation of ``T`` on unfiltered draws.
    """

    form: np.ndarray  # (9C, 9C) symmetric, indefinite
    threshold: float
    spread: float
    scale: float
    tail: float

    def score(self, images: np.ndarray) -> np.ndarray:
        c = (np.asarray(images, dtype=np.float64) - 0.5) / self.scale
        cols = im2col_batch(c, ConvGeometry(self.channels, 3, 3, 1, 1, 1))
        return np.einsum("nil,ij,njl->n", cols, self.form, cols, optimize=True) - self.threshold

    @property
    def channels(self) -> int:
        return self.form.shape[0] // 9

    def draw(self, rng, count: int, size: int) -> np.ndarray:
        """Heavy-tailed pixels: Gaussian times a log-normal factor, clipped to [0, 1]."""
        z = rng.standard_normal((count, self.channels, size, size))
        z *= np.exp(self.tail * rng.standard_normal(z.shape))
        return np.clip(0.5 + self.scale * z, 0.0, 1.0)


@lru_cache(maxsize=16)
def quadratic_rule(rule_seed: int = 0, size: int = 8, channels: int = 3, tail: float = 1.0,
                   scale: float = 0.04, calibration: int = 4000) -> QuadraticRule:
    """Draw the indefinite form and put the threshold at the median score.

    The eigenvalues alternate in sign with magnitudes in [0.5, 1.5], so the
    form has full rank and no sign dominates; the median threshold balances
    the classes.
    """
    n = 9 * channels
    rng = np.random.default_rng(rule_seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.where(np.arange(n) % 2 == 0, 1.0, -1.0) * rng.uniform(0.5, 1.5, n)
    form = (q * eig) @ q.T
    form = 0.5 * (form + form.T)
    form.setflags(write=False)
    probe = QuadraticRule(form, 0.0, 1.0, scale, tail)
    scores = probe.score(probe.draw(rng, calibration, size))
    return QuadraticRule(form, float(np.median(scores)), float(scores.std()), scale, tail)


def make_synthetic_set(
    num_classes: int,
    count: int,
    seed: int,
    kind: str = "quadratic",
    size: int = 8,
    channels: int = 3,
    margin: float = 0.5,
    tail: float = 1.0,
    scale: float = 0.04,
    rule_seed: int = 0,
    noise: float = 0.15,
    correlation: float = 0.3,
) -> LabeledImageSet:
    """Desk-scale stand-ins for CIFAR.

    ``seed`` drives the samples; ``rule_seed`` fixes what defines the classes,
    so a training and a test set drawn with different ``seed`` share one task.

    ``kind="quadratic"`` (two classes): the label is the sign of a fixed
    indefinite quadratic form summed over all 3x3 patches (see
    :class:`QuadraticRule`). Pixel deviations from 0.5 are Gaussian times a
    log-normal factor with log-standard-deviation ``tail``, scaled by
    ``scale``. Draws whose score lies within ``margin`` spreads of the
    threshold are rejected. Every pixel is symmetric about 0.5 in both
    classes, so no linear function of the pixels separates them.

    ``kind="channel_product"`` (two classes): the sign of ``sum_p r(p) g(p)``
    for centred red and green planes drawn with a latent correlation of
    ``+-correlation``.

    ``kind="templates"``: each class is a fixed random RGB template plus
    Gaussian pixel noise of standard deviation ``noise``.
    """
    rng = np.random.default_rng(seed)
    if kind == "templates":
        shape = (channels, size, size)
        templates = np.random.default_rng(rule_seed).uniform(0.2, 0.8, size=(num_classes,) + shape)
        labels = rng.integers(0, num_classes, size=count)
        images = templates[labels] + noise * rng.standard_normal((count,) + shape)
        return LabeledImageSet(np.clip(images, 0.0, 1.0), labels.astype(np.int64), num_classes)
    if kind not in ("quadratic", "channel_product"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if num_classes != 2:
        raise ValueError(f"the {kind} set has exactly two classes")
    if kind == "channel_product":
        if channels != 3:
            raise ValueError("the channel_product set is RGB only")
        sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)[:, None, None]
        z = rng.standard_normal((count, 3, size, size))
        red = z[:, 0]
        green = sign * correlation * red + np.sqrt(1.0 - correlation**2) * z[:, 1]
        images = np.clip(0.5 + noise * np.stack([red, green, z[:, 2]], axis=1), 0.0, 1.0)
        c = images - 0.5
        labels = ((c[:, 0] * c[:, 1]).sum(axis=(1, 2)) > 0).astype(np.int64)
        return LabeledImageSet(images, labels, 2)
    rule = quadratic_rule(rule_seed, size, channels, tail, scale)
    kept, kept_scores = [], []
    total = 0
    while total < count:
        images = rule.draw(rng, count, size)
        scores = rule.score(images)
        ok = np.abs(scores) > margin * rule.spread
        kept.append(images[ok])
        kept_scores.append(scores[ok])
        total += int(ok.sum())
    images = np.concatenate(kept)[:count]
    labels = (np.concatenate(kept_scores)[:count] > 0).astype(np.int64)
    return LabeledImageSet(images, labels, 2)


def rms_patch_norm(images: np.ndarray, kernel: int = 3, pad: int = 1, limit: int = 256) -> float:
    """Root-mean-square Euclidean norm of the ``kernel x kernel`` patches of a set."""
    x = images[:limit]
    cols = im2col_batch(x, ConvGeometry(x.shape[1], kernel, kernel, 1, pad, 1))
    return float(np.sqrt((cols**2).sum(axis=1).mean()))
