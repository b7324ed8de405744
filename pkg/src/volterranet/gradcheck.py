"""Central finite-difference checks of the analytic gradients.

Kernel functions are looked up on the :mod:`kernels` module at call time so a
deliberately broken implementation can be swapped in to prove the check bites.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .layers import Network, NetworkSpec, softmax_cross_entropy
from .tensor import ConvGeometry

# patch length -> (channels, kernel size)
PATCH_SHAPES = {4: (1, 2), 9: (1, 3), 27: (3, 3)}


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out if indices is not None else out.reshape(arr.shape)


def random_geometry(rng, n: int) -> tuple[ConvGeometry, tuple[int, int, int]]:
    """A random geometry with patch length ``n`` and a compatible input shape."""
    channels, k = PATCH_SHAPES[n]
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    out_ch = int(rng.integers(1, 5))
    h = int(rng.integers(max(k, 3), 9))
    w = int(rng.integers(max(k, 3), 9))
    batch = int(rng.integers(1, 3))
    return ConvGeometry(channels, k, k, stride, pad, out_ch), (batch, h, w)


@dataclass
class LayerCheck:
    geom: ConvGeometry
    errors: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def check_volterra_layer(rng, geom: ConvGeometry, shape, h: float = 1e-5, interaction: str = "cross") -> LayerCheck:
    """Compare every analytic gradient of one Volterra layer with central differences.

    The loss is ``sum(r * y)`` for a fixed random ``r``.
    """
    batch, H, W = shape
    x = rng.standard_normal((batch, geom.in_channels, H, W))
    bank = kernels.VolterraFilterBank.zeros(geom, interaction)
    bank.w1[...] = rng.standard_normal(bank.w1.shape)
    bank.w2[...] = rng.standard_normal(bank.w2.shape)
    bank.bias[...] = rng.standard_normal(bank.bias.shape)
    ho, wo = geom.output_hw(H, W)
    r = rng.standard_normal((batch, geom.out_channels, ho, wo))

    def loss():
        return float((r * kernels.volterra_forward(x, bank)).sum())

    dw1, dw2, db = kernels.volterra_backward_weights(x, r, geom, interaction)
    dx = kernels.volterra_backward_input(x, r, bank)
    out = LayerCheck(geom)
    for name, analytic, target in (("w1", dw1, bank.w1), ("w2", dw2, bank.w2), ("bias", db, bank.bias), ("input", dx, x)):
        out.errors[name] = float(relative_error(analytic, numeric_grad(loss, target, h)).max())
    return out


def check_linear_layer(rng, geom: ConvGeometry, shape, h: float = 1e-5) -> LayerCheck:
    batch, H, W = shape
    x = rng.standard_normal((batch, geom.in_channels, H, W))
    bank = kernels.LinearFilterBank(
        geom, rng.standard_normal((geom.out_channels, geom.n)), rng.standard_normal(geom.out_channels)
    )
    ho, wo = geom.output_hw(H, W)
    r = rng.standard_normal((batch, geom.out_channels, ho, wo))

    def loss():
        return float((r * kernels.linear_forward(x, bank)).sum())

    dw1, db, dx = kernels.linear_backward(x, r, bank)
    out = LayerCheck(geom)
    for name, analytic, target in (("w1", dw1, bank.w1), ("bias", db, bank.bias), ("input", dx, x)):
        out.errors[name] = float(relative_error(analytic, numeric_grad(loss, target, h)).max())
    return out


@dataclass
class SuiteResult:
    checks: list
    tol: float

    def max_by_group(self) -> dict:
        out = {}
        for c in self.checks:
            for k, v in c.errors.items():
                out[k] = max(out.get(k, 0.0), v)
        return out

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_by_group().values())


def run_suite(configs: int = 50, seed: int = 0, n_values=(4, 9, 27), h: float = 1e-5, tol: float = 1e-5) -> SuiteResult:
    """Finite-difference check of the Volterra layer over random geometries.

    Patch lengths cycle through ``n_values`` so each is exercised.
    """
    rng = np.random.default_rng(seed)
    checks = []
    for i in range(configs):
        geom, shape = random_geometry(rng, n_values[i % len(n_values)])
        checks.append(check_volterra_layer(rng, geom, shape, h))
    return SuiteResult(checks, tol)


def check_network(spec: NetworkSpec, seed: int = 0, samples: int = 200, size: int = 8, batch: int = 4,
                  h: float = 1e-5) -> np.ndarray:
    """Relative errors for ``samples`` random parameters of a whole network.

    Batch norm runs in eval mode with randomized running statistics and dropout
    is inactive, so the loss is a fixed smooth-almost-everywhere function.
    """
    rng = np.random.default_rng(seed)
    net = Network(spec, seed=seed)
    for name, arr in net.named_arrays().items():
        if name.endswith("running_mean"):
            arr[...] = 0.1 * rng.standard_normal(arr.shape)
        elif name.endswith("running_var"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        elif name.endswith(("gamma", "beta", ".w2", ".bias")):
            arr[...] += 0.1 * rng.standard_normal(arr.shape)
    x = rng.standard_normal((batch, spec.in_channels, size, size))
    y = rng.integers(0, spec.num_classes, size=batch)

    def loss():
        return softmax_cross_entropy(net.forward(x, train=False), y)[0]

    _, dlogits = softmax_cross_entropy(net.forward(x, train=False), y)
    net.backward(dlogits)
    entries = [(layer, key, i) for _, layer, key in net.parameters() for i in range(layer.params[key].size)]
    picks = rng.choice(len(entries), size=min(samples, len(entries)), replace=False)
    errs = []
    for p in sorted(picks):
        layer, key, i = entries[p]
        analytic = layer.grads[key].reshape(-1)[i]
        numeric = numeric_grad(loss, layer.params[key], h, indices=[i])[0]
        errs.append(float(relative_error(analytic, numeric)))
    return np.array(errs)
