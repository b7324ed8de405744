"""Timing of the linear and Volterra kernels over a sweep of input sizes."""
from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import kernels
from .tensor import ConvGeometry

BENCH_HEADER = ("kind", "height", "width", "out_locations", "forward_s", "weight_grad_s", "input_grad_s")
DEFAULT_SIZES = (8, 12, 16, 20, 24, 28, 32)


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_geometry(size: int, batch: int = 4, channels: int = 3, filters: int = 16, repeats: int = 3,
                  seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` seconds for forward, weight and input gradients, both kinds."""
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(channels, 3, 3, 1, 1, filters)
    x = rng.standard_normal((batch, channels, size, size))
    ho, wo = geom.output_hw(size, size)
    g = rng.standard_normal((batch, filters, ho, wo))
    vb = kernels.VolterraFilterBank.zeros(geom)
    vb.w1[...] = rng.standard_normal(vb.w1.shape)
    vb.w2[...] = rng.standard_normal(vb.w2.shape)
    lb = kernels.LinearFilterBank(geom, vb.w1, vb.bias)
    rows = []
    for kind, fwd, wgrad, igrad in (
        ("linear",
         lambda: kernels.linear_forward(x, lb),
         lambda: kernels.linear_backward(x, g, lb),
         lambda: kernels.linear_backward(x, g, lb)),
        ("volterra",
         lambda: kernels.volterra_forward(x, vb),
         lambda: kernels.volterra_backward_weights(x, g, geom),
         lambda: kernels.volterra_backward_input(x, g, vb)),
    ):
        rows.append({
            "kind": kind, "height": size, "width": size, "out_locations": ho * wo,
            "forward_s": _best_of(fwd, repeats),
            "weight_grad_s": _best_of(wgrad, repeats),
            "input_grad_s": _best_of(igrad, repeats),
        })
    return rows


def run_sweep(sizes=DEFAULT_SIZES, **kwargs) -> list[dict]:
    rows = []
    for s in sizes:
        rows.extend(time_geometry(s, **kwargs))
    return rows


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line through ``(xs, ys)``; returns ``(slope, intercept, R^2)``."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def input_grad_fit(rows) -> tuple[float, float, float]:
    vol = [r for r in rows if r["kind"] == "volterra"]
    return linear_fit([r["out_locations"] for r in vol], [r["input_grad_s"] for r in vol])


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r[k] if isinstance(r[k], (str, int)) else repr(float(r[k])) for k in BENCH_HEADER])
    return buf.getvalue()
