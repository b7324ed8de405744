"""Inspection of trained Volterra filters: weight slices, weight histograms,
norm-constrained optimal stimuli and four-way response profiles."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .kernels import LinearFilterBank, VolterraFilterBank, symmetrize, unpack_upper


class ConvergenceError(RuntimeError):
    def __init__(self, msg, bracket):
        super().__init__(f"{msg}; bracket={bracket}")
        self.bracket = bracket


@dataclass
class WeightSlices:
    linear: np.ndarray  # (C, kh, kw)
    quadratic: np.ndarray  # (n, C, kh, kw); quadratic[i] is q_i on the patch grid


def extract_weight_slices(filters: VolterraFilterBank, filter_index: int) -> WeightSlices:
    """Linear weights and the n interaction slices ``q_i`` of one filter.

    ``q_i[j]`` is the weight of the ``x_i x_j`` term, read from the packed
    upper triangle at ``(min(i, j), max(i, j))``.
    """
    g = filters.geom
    grid = (g.in_channels, g.kernel_h, g.kernel_w)
    upper = unpack_upper(filters.w2[filter_index], g.n, filters.pairs)
    full = upper + upper.T - np.diag(np.diag(upper))
    return WeightSlices(filters.w1[filter_index].reshape(grid), full.reshape((g.n,) + grid))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()


def weight_histogram(filters, part: str = "linear", bins: int = 50) -> Histogram:
    if part == "linear":
        values = filters.w1.ravel()
    elif part == "quadratic":
        if not isinstance(filters, VolterraFilterBank):
            raise ValueError("a linear filter bank has no quadratic weights")
        values = filters.w2.ravel()
    else:
        raise ValueError(f"part must be 'linear' or 'quadratic', not {part!r}")
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(edges, counts, float(values.mean()), float(values.std()))


def linear_optimal_stimulus(w1: np.ndarray, rho: float) -> np.ndarray:
    """Norm-``rho`` input maximizing ``w1 . x``: ``rho * w1 / |w1|``."""
    w1 = np.asarray(w1, dtype=np.float64)
    norm = np.linalg.norm(w1)
    if norm == 0.0:
        raise ValueError("linear weights are all zero; the optimal stimulus is undefined")
    return rho * w1 / norm


@dataclass
class BoundarySolution:
    x: np.ndarray
    multiplier: float
    hard_case: bool
    iterations: int


def maximize_on_sphere(A: np.ndarray, b: np.ndarray, rho: float, tol: float = 1e-15,
                       max_iter: int = 200) -> BoundarySolution:
    """Maximize ``x^T A x + b^T x`` subject to ``|x| = rho`` (A symmetric).

    At the optimum ``2 A x + b = 2 lam x`` with ``lam >= lambda_max(A)``. In the
    eigenbasis ``x_i = c_i / (2 (lam - mu_i))`` and ``lam`` is the root of
    ``|x(lam)| = rho``, found by safeguarded Newton steps on
    ``1/|x(lam)| - 1/rho``. If ``b`` has no component along the leading
    eigenspace and the remaining components fit inside the sphere
    (the hard case), ``lam = lambda_max`` and the leftover norm is put along a
    leading eigenvector.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu, Q = np.linalg.eigh(A)
    c = Q.T @ b
    mu_max = mu[-1]
    scale = max(np.abs(mu).max(), np.linalg.norm(b) / rho, 1e-300)
    lead = mu >= mu_max - 1e-12 * scale
    gap = mu_max - mu  # >= 0, exact zero on the leading block
    gap[lead] = 0.0
    c_lead = np.linalg.norm(c[lead])
    rest = ~lead & (c != 0.0)

    def norm_at(t):
        # |x| and d|x|/dt for lam = mu_max + t
        d = t + gap
        if t == 0.0:
            terms = c[rest] / (2.0 * d[rest])
            return np.linalg.norm(terms), None
        sq = (c / (2.0 * d)) ** 2
        phi = sq.sum()
        dphi = -(sq / d).sum() * 2.0
        return np.sqrt(phi), dphi / (2.0 * np.sqrt(phi))

    rest_norm, _ = norm_at(0.0)
    if c_lead <= 1e-13 * scale * rho and rest_norm <= rho:
        x_t = np.zeros_like(c)
        x_t[rest] = c[rest] / (2.0 * gap[rest])
        v = Q[:, -1]
        tau = np.sqrt(max(rho**2 - rest_norm**2, 0.0))
        x = Q @ x_t + (tau if v @ b >= 0 else -tau) * v
        x *= rho / np.linalg.norm(x)
        return BoundarySolution(x, float(mu_max), True, 0)

    lo = c_lead / (2.0 * rho)
    hi = np.linalg.norm(b) / (2.0 * rho)
    t = hi if lo == 0.0 else 0.5 * (lo + hi)
    for it in range(1, max_iter + 1):
        nrm, dnrm = norm_at(t)
        if abs(nrm - rho) <= tol * rho or hi - lo <= 4 * np.finfo(float).eps * max(hi, 1e-300):
            break
        if nrm > rho:
            lo = t
        else:
            hi = t
        # Newton on 1/|x| - 1/rho, which is close to linear in t
        step = (1.0 / nrm - 1.0 / rho) / (-dnrm / nrm**2)
        t_new = t - step
        t = t_new if lo < t_new < hi else 0.5 * (lo + hi)
    else:
        raise ConvergenceError("secular equation did not converge", (mu_max + lo, mu_max + hi))
    x = Q @ (c / (2.0 * (t + gap)))
    x *= rho / np.linalg.norm(x)
    return BoundarySolution(x, float(mu_max + t), False, it)


def quadratic_form(w2: np.ndarray, n: int, pairs=None) -> np.ndarray:
    """Symmetric matrix of the quadratic term of one filter."""
    return symmetrize(w2, n, pairs)


def quadratic_optimal_stimulus(w1: np.ndarray, w2: np.ndarray, rho: float, pairs=None) -> np.ndarray:
    """Norm-``rho`` patch maximizing ``x^T W2 x + w1 . x`` for packed ``w2``."""
    w1 = np.asarray(w1, dtype=np.float64)
    A = quadratic_form(np.asarray(w2, dtype=np.float64), w1.size, pairs)
    return maximize_on_sphere(A, w1, rho).x


def stationarity_residual(A, b, x, multiplier) -> float:
    return float(np.linalg.norm(2.0 * A @ x + b - 2.0 * multiplier * x))


@dataclass
class ResponseProfile:
    """Responses of one filter along a grid of stimulus norms.

    y1: full filter at x_o; y2: linear weights at x_o; y3: linear weights at
    x_l; y4: full filter at x_l. The bias enters y1 and y4 only.
    """

    filter_index: int
    rho: np.ndarray
    x_o: np.ndarray  # (len(rho), n)
    x_l: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    y4: np.ndarray
    bias_convention: str = "bias in y1,y4; excluded from y2,y3"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "y1", "y2", "y3", "y4"])
        for row in zip(self.rho, self.y1, self.y2, self.y3, self.y4):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def response_profile(filters, filter_index: int, rho_grid) -> ResponseProfile:
    """Optimal stimuli and the four responses for each norm in ``rho_grid``.

    A linear filter bank is treated as a Volterra bank with zero quadratic
    weights.
    """
    w1 = np.asarray(filters.w1[filter_index], dtype=np.float64)
    bias = float(filters.bias[filter_index])
    if isinstance(filters, LinearFilterBank):
        A = np.zeros((w1.size, w1.size))
    else:
        A = quadratic_form(np.asarray(filters.w2[filter_index], dtype=np.float64), w1.size, filters.pairs)
    rho = np.asarray(rho_grid, dtype=np.float64)
    xo = np.array([maximize_on_sphere(A, w1, r).x for r in rho])
    xl = np.array([linear_optimal_stimulus(w1, r) for r in rho])

    def full(x):
        return np.einsum("ki,ij,kj->k", x, A, x) + x @ w1 + bias

    return ResponseProfile(filter_index, rho, xo, xl, full(xo), xo @ w1, xl @ w1, full(xl))


def default_rho_grid(rms_patch_norm: float, count: int = 16) -> np.ndarray:
    """``count`` log-spaced norms over [0.1, 10] times the RMS patch norm."""
    return rms_patch_norm * np.logspace(-1.0, 1.0, count)
