"""Standard CNN layers with hand-written backward passes, and the Wide ResNet
style network that hosts a linear or Volterra first convolution.

Every layer keeps its trainable arrays in ``params`` and fills ``grads`` with
arrays of the same shapes on ``backward``. Names listed in ``no_decay`` are
skipped by weight decay.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ConvGeometry, ShapeError

FIRST_LAYER_KINDS = ("linear", "volterra")


class Layer:
    no_decay: frozenset = frozenset()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self):
        return ()

    @property
    def num_params(self) -> int:
        own = sum(p.size for p in self.params.values())
        return own + sum(child.num_params for _, child in self.children())


class BatchNorm(Layer):
    """Per-channel batch normalization followed by ``gamma * xhat + beta``."""

    no_decay = frozenset({"gamma", "beta"})

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}
        self._cache = None

    def forward(self, x, train=True):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs at least 2 samples in train mode")
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[None, :, None, None]
            var = (xc * xc).mean(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - mom
            rm += mom * mean
            rv *= 1 - mom
            rv += mom * var * (m / max(m - 1, 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            xc = x - mean[None, :, None, None]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(self, dout):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
        return (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dout):
        # derivative at exactly 0 is taken as 0
        return np.where(self._mask, dout, 0.0).astype(dout.dtype, copy=False)


class AvgPool(Layer):
    """Non-overlapping mean pooling; ``window=None`` pools the whole map."""

    def __init__(self, window: int | None = None):
        super().__init__()
        self.window = window

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        kh, kw = (H, W) if self.window is None else (self.window, self.window)
        if H % kh or W % kw:
            raise ShapeError(f"{H}x{W} map is not divisible into {kh}x{kw} windows")
        self._shape = (x.shape, kh, kw)
        return x.reshape(N, C, H // kh, kh, W // kw, kw).mean(axis=(3, 5))

    def backward(self, dout):
        shape, kh, kw = self._shape
        dx = np.repeat(np.repeat(dout, kh, axis=2), kw, axis=3) / (kh * kw)
        return dx.reshape(shape)


class FullyConnected(Layer):
    no_decay = frozenset({"bias"})

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features)).astype(dtype),
            "bias": np.zeros(out_features, dtype),
        }

    def forward(self, x, train=True):
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.params["weight"].shape[1]:
            raise ShapeError(f"expected {self.params['weight'].shape[1]} features, got {flat.shape[1]}")
        self._x = flat
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = dout.T @ self._x
        self.grads["bias"] = dout.sum(axis=0)
        return (dout @ self.params["weight"]).reshape(self._in_shape)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""

    def __init__(self, rate: float, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng()
        self._mask = None

    def forward(self, x, train=True):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


def he_normal(rng, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    """Zero-mean Gaussian with variance ``2 / fan_in``."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)


class Conv(Layer):
    """Linear convolution layer around :class:`kernels.LinearFilterBank`."""

    no_decay = frozenset({"bias"})

    def __init__(self, geom: ConvGeometry, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geom = geom
        self.params = {
            "w1": he_normal(rng, (geom.out_channels, geom.n), geom.n, dtype),
            "bias": np.zeros(geom.out_channels, dtype),
        }

    @property
    def bank(self) -> kernels.LinearFilterBank:
        return kernels.LinearFilterBank(self.geom, self.params["w1"], self.params["bias"])

    def forward(self, x, train=True):
        self._x = x
        self._cols = kernels.patch_matrix(x, self.geom)
        return kernels.linear_forward(x, self.bank, cols=self._cols)

    def backward(self, dout):
        dw1, db, dx = kernels.linear_backward(self._x, dout, self.bank, cols=self._cols)
        self.grads["w1"], self.grads["bias"] = dw1, db
        return dx


class VolterraConv(Layer):
    """Second-order Volterra convolution layer.

    ``w2_init="zero"`` starts every filter as its linear counterpart;
    ``"gaussian"`` draws the packed weights with variance
    ``2 / (n * second_moment)``.
    """

    no_decay = frozenset({"bias"})

    def __init__(
        self,
        geom: ConvGeometry,
        rng=None,
        interaction: str = "cross",
        w2_init: str = "zero",
        second_moment: float = 1.0,
        dtype=np.float64,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geom = geom
        self.interaction = interaction
        npair = kernels.pair_indices(geom, interaction)[0].size
        w1 = he_normal(rng, (geom.out_channels, geom.n), geom.n, dtype)
        if w2_init == "zero":
            w2 = np.zeros((geom.out_channels, npair), dtype)
        elif w2_init == "gaussian":
            w2 = rng.normal(0.0, np.sqrt(2.0 / (geom.n * second_moment)), (geom.out_channels, npair)).astype(dtype)
        else:
            raise ValueError(f"unknown w2 initialisation {w2_init!r}")
        self.params = {"w1": w1, "w2": w2, "bias": np.zeros(geom.out_channels, dtype)}

    @property
    def bank(self) -> kernels.VolterraFilterBank:
        p = self.params
        return kernels.VolterraFilterBank(self.geom, p["w1"], p["w2"], p["bias"], self.interaction)

    def forward(self, x, train=True):
        self._x = x
        self._cols = kernels.patch_matrix(x, self.geom)
        return kernels.volterra_forward(x, self.bank, cols=self._cols)

    def backward(self, dout):
        dw1, dw2, db = kernels.volterra_backward_weights(
            self._x, dout, self.geom, self.interaction, cols=self._cols
        )
        self.grads.update(w1=dw1, w2=dw2, bias=db)
        return kernels.volterra_backward_input(self._x, dout, self.bank, cols=self._cols)


class ResidualBlock(Layer):
    """Pre-activation block: BN-ReLU-conv3x3-dropout-BN-ReLU-conv3x3 plus shortcut.

    The shortcut is the identity exactly when channels are unchanged and the
    stride is 1; otherwise a 1x1 projection reads the pre-activated input.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dropout: float = 0.0, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bn1 = BatchNorm(in_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv1 = Conv(ConvGeometry(in_ch, 3, 3, stride, 1, out_ch), rng, dtype)
        self.drop = Dropout(dropout, rng)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        self.relu2 = ReLU()
        self.conv2 = Conv(ConvGeometry(out_ch, 3, 3, 1, 1, out_ch), rng, dtype)
        self.identity = in_ch == out_ch and stride == 1
        self.shortcut = None if self.identity else Conv(ConvGeometry(in_ch, 1, 1, stride, 0, out_ch), rng, dtype)

    def children(self):
        out = [("bn1", self.bn1), ("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def forward(self, x, train=True):
        o = self.relu1.forward(self.bn1.forward(x, train), train)
        h = self.conv1.forward(o, train)
        h = self.drop.forward(self.relu2.forward(self.bn2.forward(h, train), train), train)
        h = self.conv2.forward(h, train)
        skip = x if self.identity else self.shortcut.forward(o, train)
        return h + skip

    def backward(self, dout):
        dh = self.conv2.backward(dout)
        dh = self.bn2.backward(self.relu2.backward(self.drop.backward(dh)))
        do = self.conv1.backward(dh)
        if self.identity:
            return self.bn1.backward(self.relu1.backward(do)) + dout
        do = do + self.shortcut.backward(dout)
        return self.bn1.backward(self.relu1.backward(do))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 10
    widen: int = 1
    num_classes: int = 10
    in_channels: int = 3
    first_layer: str = "linear"
    dropout: float = 0.0
    interaction: str = "cross"
    w2_init: str = "zero"

    def __post_init__(self):
        if (self.depth - 4) % 6 or self.depth < 10:
            raise ValueError(f"depth {self.depth} does not give a positive integer (d-4)/6")
        if self.widen < 1:
            raise ValueError("widening factor must be >= 1")
        if self.first_layer not in FIRST_LAYER_KINDS:
            raise ValueError(f"first layer must be one of {FIRST_LAYER_KINDS}")

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    @property
    def widths(self) -> tuple[int, int, int]:
        k = self.widen
        return 16 * k, 32 * k, 64 * k


class Network:
    """Ordered stack: BN, first conv, three residual groups, BN-ReLU-pool, FC."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        init_rng = np.random.default_rng(seed)
        # dropout masks draw from here; the trainer swaps in its own stream
        self.rng = np.random.default_rng(seed + 1)
        w0 = spec.widths[0]
        first_geom = ConvGeometry(spec.in_channels, 3, 3, 1, 1, w0)
        self.layers: list[tuple[str, Layer]] = [("bn0", BatchNorm(spec.in_channels, dtype=dtype))]
        if spec.first_layer == "volterra":
            first = VolterraConv(first_geom, init_rng, spec.interaction, spec.w2_init, dtype=dtype)
        else:
            first = Conv(first_geom, init_rng, dtype)
        self.layers.append(("conv0", first))
        in_ch = w0
        for g, width in enumerate(spec.widths, start=1):
            for b in range(1, spec.blocks_per_group + 1):
                stride = 2 if (g > 1 and b == 1) else 1
                block = ResidualBlock(in_ch, width, stride, spec.dropout, init_rng, dtype)
                self.layers.append((f"g{g}b{b}", block))
                in_ch = width
        self.layers += [
            ("bn_final", BatchNorm(in_ch, dtype=dtype)),
            ("relu_final", ReLU()),
            ("pool", AvgPool(None)),
            ("fc", FullyConnected(in_ch, spec.num_classes, init_rng, dtype)),
        ]
        self.set_rng(self.rng)

    def set_rng(self, rng) -> None:
        self.rng = rng
        for _, layer in self._walk():
            if isinstance(layer, ResidualBlock):
                layer.drop.rng = rng

    def _walk(self, layers=None, prefix=""):
        for name, layer in layers if layers is not None else self.layers:
            yield prefix + name, layer
            yield from self._walk(layer.children(), prefix + name + ".")

    def layer(self, name: str) -> Layer:
        for path, layer in self._walk():
            if path == name:
                return layer
        raise KeyError(name)

    def parameters(self):
        """Yield ``(name, layer, key)`` for every trainable array in a fixed order."""
        for path, layer in self._walk():
            for key in layer.params:
                yield f"{path}.{key}", layer, key

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and BN running statistics, keyed by dotted path."""
        out = {}
        for path, layer in self._walk():
            for key, arr in layer.params.items():
                out[f"{path}.{key}"] = arr
            for key, arr in layer.buffers.items():
                out[f"{path}.{key}"] = arr
        return out

    def decays(self, name: str) -> bool:
        path, key = name.rsplit(".", 1)
        return key not in self.layer(path).no_decay

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for _, layer in self.layers)

    def param_table(self) -> list[tuple[str, str, int]]:
        """Per-layer rows ``(name, kind, parameter count)`` for layers that own parameters."""
        rows = []
        for path, layer in self._walk():
            if layer.params:
                rows.append((path, type(layer).__name__, sum(p.size for p in layer.params.values())))
        return rows

    @property
    def first_conv(self) -> Layer:
        return self.layer("conv0")


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Network:
    return Network(spec, seed, dtype)
