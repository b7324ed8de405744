"""Figure rendering for reports. Every function writes one file and returns its path."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.figsize": (6.0, 4.0),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "volterranet",  # stable element ids across runs
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if path.endswith(".svg") else None)
    plt.close(fig)
    return path


def response_profile_figure(profile, path):
    """Four curves: y1 red, y2 dashed red, y3 blue, y4 dashed blue."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(profile.rho, profile.y1, "r-", label="y1: full filter, x_o")
        ax.plot(profile.rho, profile.y2, "r--", label="y2: linear part, x_o")
        ax.plot(profile.rho, profile.y3, "b-", label="y3: linear part, x_l")
        ax.plot(profile.rho, profile.y4, "b--", label="y4: full filter, x_l")
        ax.set_xscale("log")
        ax.set_xlabel("stimulus norm")
        ax.set_ylabel("response")
        ax.set_title(f"filter {profile.filter_index}")
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def histogram_figure(histograms: dict, path):
    """Side-by-side weight histograms, one panel per entry of ``histograms``."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(histograms), figsize=(4.0 * len(histograms), 3.2), squeeze=False)
        for ax, (name, h) in zip(axes[0], histograms.items()):
            ax.stairs(h.counts, h.edges, fill=True, alpha=0.7)
            ax.set_title(f"{name}\nmean {h.mean:.3g}, std {h.std:.3g}", fontsize=9)
            ax.set_xlabel("weight value")
        axes[0][0].set_ylabel("count")
        return _save(fig, path)


def slice_contact_sheet(slices, path):
    """Linear term plus every interaction slice, channels tiled side by side."""
    tiles = [slices.linear] + list(slices.quadratic)
    cols = int(np.ceil(np.sqrt(len(tiles))))
    rows = int(np.ceil(len(tiles) / cols))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.0 * rows + 0.4), squeeze=False)
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k < len(tiles):
                ax.imshow(channels_side_by_side(tiles[k]), cmap="gray", interpolation="nearest")
                ax.set_title("linear" if k == 0 else f"q{k - 1}", fontsize=7)
        return _save(fig, path)


def bench_figure(sizes, seconds: dict, path, fit=None):
    """Wall time against output locations, one series per label."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, ys in seconds.items():
            ax.plot(sizes, ys, "o-", label=label, markersize=3)
        if fit is not None:
            slope, intercept, r2 = fit
            xs = np.array([min(sizes), max(sizes)])
            ax.plot(xs, slope * xs + intercept, "k:", label=f"linear fit, R^2={r2:.3f}")
        ax.set_xlabel("output locations (Ho*Wo)")
        ax.set_ylabel("seconds")
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def history_figure(history, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        epochs = [r["epoch"] for r in history]
        ax.plot(epochs, [r["train_loss"] for r in history], label="train loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["test_error"] for r in history], "C1", label="test error")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax2.set_ylabel("test error")
        return _save(fig, path)


def channels_side_by_side(grid: np.ndarray) -> np.ndarray:
    """(C, kh, kw) -> (kh, C*kw) image."""
    c, kh, kw = grid.shape
    return grid.transpose(1, 0, 2).reshape(kh, c * kw)


def write_pgm(path, image: np.ndarray) -> tuple[float, float]:
    """Write an 8-bit binary PGM after min-max scaling; returns (min, max) used."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo
    scaled = np.zeros(image.shape) if span == 0 else (image - lo) / span
    pixels = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
