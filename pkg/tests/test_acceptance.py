"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured numbers
before asserting. Criteria 6 and 9 train 20 small networks on one CPU core and
are marked ``slow``; deselect them with ``-m "not slow"``. The CIFAR smoke test
runs only when ``VOLT_CIFAR_DIR`` points at the CIFAR-10 binary batches.
"""
import json
import os
import statistics
import time

import numpy as np
import pytest

import oracles
from volterranet import cli, kernels
from volterranet.analysis import maximize_on_sphere, stationarity_residual
from volterranet.gradcheck import run_suite
from volterranet.tensor import ConvGeometry

DEMO_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "quadratic_demo.cfg")
DEMO_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok

    return emit


def test_criterion_1_finite_difference_suite(report):
    t0 = time.perf_counter()
    result = run_suite(configs=60, seed=2024, n_values=(4, 9, 27), h=1e-5, tol=1e-5)
    elapsed = time.perf_counter() - t0
    worst = result.max_by_group()
    strides = {c.geom.stride for c in result.checks}
    pads = {c.geom.pad for c in result.checks}
    ns = {c.geom.n for c in result.checks}
    ok = result.passed and elapsed < 120 and len(result.checks) >= 50
    ok = ok and strides == {1, 2} and pads == {0, 1} and ns == {4, 9, 27}
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    assert report(1, ok, f"{len(result.checks)} configs, max rel err {detail}, {elapsed:.1f} s (< 1e-5, < 120 s)")


def _oracle_instances(count=60, seed=7):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        c = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        geom = ConvGeometry(c, k, k, int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(1, 4)))
        h = int(rng.integers(max(k, 2), 9))
        w = int(rng.integers(max(k, 2), 9))
        yield rng, geom, (int(rng.integers(1, 3)), c, h, w)


def test_criterion_2_oracle_equivalence(report):
    t0 = time.perf_counter()
    worst = 0.0
    cases = 0
    for rng, geom, shape in _oracle_instances():
        x = rng.standard_normal(shape)
        bank = kernels.VolterraFilterBank.zeros(geom)
        for arr in (bank.w1, bank.w2, bank.bias):
            arr[...] = rng.standard_normal(arr.shape)
        y = kernels.volterra_forward(x, bank)
        g = rng.standard_normal(y.shape)
        dw1, dw2, db = kernels.volterra_backward_weights(x, g, geom)
        dx = kernels.volterra_backward_input(x, g, bank)
        want_y = oracles.volterra_forward(x, bank.w1, bank.w2, bank.bias, geom)
        want = oracles.volterra_backward(x, g, bank.w1, bank.w2, geom)
        for got, ref in zip((y, dw1, dw2, db, dx), (want_y, *want)):
            worst = max(worst, float(np.abs(got - ref).max()))
        cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60
    assert report(2, ok, f"{cases} instances, max abs diff {worst:.2e}, {elapsed:.1f} s (<= 1e-10, < 60 s)")


def test_criterion_3_reduction_and_homogeneity(report):
    rng = np.random.default_rng(11)
    worst_red = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        geom = ConvGeometry(c, k, k, int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(1, 5)))
        x = rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(k, 9)), int(rng.integers(k, 9))))
        vb = kernels.VolterraFilterBank.zeros(geom)
        vb.w1[...] = rng.standard_normal(vb.w1.shape)
        vb.bias[...] = rng.standard_normal(vb.bias.shape)
        lb = kernels.LinearFilterBank(geom, vb.w1, vb.bias)
        worst_red = max(worst_red, float(np.abs(kernels.volterra_forward(x, vb) - kernels.linear_forward(x, lb)).max()))
    worst_hom = 0.0
    for _ in range(30):
        geom = ConvGeometry(int(rng.integers(1, 4)), 3, 3, 1, 1, 3)
        x = rng.standard_normal((2, geom.in_channels, 6, 6))
        vb = kernels.VolterraFilterBank.zeros(geom)
        vb.w2[...] = rng.standard_normal(vb.w2.shape)
        y = kernels.volterra_forward(x, vb)
        for alpha in (-2.0, 0.5, 3.0):
            diff = np.abs(kernels.volterra_forward(alpha * x, vb) - alpha**2 * y).max() / max(np.abs(y).max(), 1.0)
            worst_hom = max(worst_hom, float(diff))
    ok = worst_red <= 1e-12 and worst_hom <= 1e-10
    assert report(3, ok, f"w2=0 vs linear max diff {worst_red:.2e} (<= 1e-12), "
                         f"homogeneity rel err {worst_hom:.2e} (<= 1e-10)")


def test_criterion_4_parameter_count(report):
    mismatches = [(n, r) for n in range(1, 31) for r in range(4)
                  if kernels.volterra_param_count(n, r) != oracles.monomial_count(n, r)]
    per_filter = kernels.volterra_param_count(9, 2)
    ok = not mismatches and per_filter == 55
    assert report(4, ok, f"{30 * 4} (n, r) pairs, mismatches {mismatches}, 3x3 single-channel count {per_filter}")


def test_criterion_5_sphere_solver(report):
    rng = np.random.default_rng(5)
    viol = stat = gap = 0.0
    small = dominance_failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 28))
        A, b, rho = oracles.sphere_instance(rng, n)
        sol = maximize_on_sphere(A, b, rho)
        x = sol.x
        scale = np.abs(A).max() * rho**2 + np.linalg.norm(b) * rho
        viol = max(viol, abs(np.linalg.norm(x) - rho))
        stat = max(stat, stationarity_residual(A, b, x, sol.multiplier))
        value = x @ A @ x + b @ x
        if n <= 8:
            small += 1
            gap = max(gap, abs(value - oracles.ascent_on_sphere(A, b, rho)))
        # dominance: x is the quadratic maximizer, x_l the linear one
        x_l = rho * b / np.linalg.norm(b) if np.linalg.norm(b) > 0 else x
        y1, y2 = value, b @ x
        y3, y4 = b @ x_l, x_l @ A @ x_l + b @ x_l
        tol = 1e-12 * scale
        if y1 < y4 - tol or y3 < y2 - tol:
            dominance_failures += 1
    ok = viol < 1e-9 and stat < 1e-8 and gap < 1e-7 and dominance_failures == 0
    assert report(5, ok, f"1000 instances: constraint {viol:.1e} (< 1e-9), stationarity {stat:.1e} (< 1e-8), "
                         f"oracle gap {gap:.1e} on {small} small instances (< 1e-7), "
                         f"dominance failures {dominance_failures}")


def _final_error(run_dir):
    with open(os.path.join(run_dir, "history.csv")) as fh:
        rows = fh.read().splitlines()
    header = rows[0].split(",")
    return float(rows[-1].split(",")[header.index("test_error")])


def _demo_runs(root):
    """Train every (seed, kind) pair of the demonstration through the CLI; returns errors and seconds."""
    errors = {}
    t0 = time.perf_counter()
    for seed in DEMO_SEEDS:
        for kind in ("volterra", "linear"):
            out = os.path.join(root, f"{kind}_{seed}")
            code = cli.main(["train", "--config", DEMO_CONFIG, "--first-layer", kind, "--seed", str(seed),
                             "--deterministic", "--threads", "1", "--out", out])
            assert code == 0
            errors[kind, seed] = _final_error(out)
    return errors, time.perf_counter() - t0


@pytest.fixture(scope="module")
def demo_first(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo_first")
    return root, *_demo_runs(str(root))


@pytest.mark.slow
def test_criterion_6_learning_demonstration(demo_first, report):
    _, errors, elapsed = demo_first
    gaps = [errors["linear", s] - errors["volterra", s] for s in DEMO_SEEDS]
    median_gap = 100 * statistics.median(gaps)
    ok = median_gap >= 15.0 and elapsed < 15 * 60
    per_seed = ", ".join(f"seed {s}: {100 * errors['volterra', s]:.1f}% vs {100 * errors['linear', s]:.1f}%"
                         for s in DEMO_SEEDS)
    assert report(6, ok, f"median gap {median_gap:.1f} pp (>= 15), {elapsed / 60:.1f} min (< 15); "
                         f"volterra vs linear test error: {per_seed}")


@pytest.mark.skipif(not os.environ.get("VOLT_CIFAR_DIR"), reason="set VOLT_CIFAR_DIR to the CIFAR-10 batches")
def test_criterion_7_cifar_smoke(tmp_path, report):
    errors = {}
    for kind in ("linear", "volterra"):
        out = tmp_path / kind
        code = cli.main(["train", "--dataset", "cifar10", "--data", os.environ["VOLT_CIFAR_DIR"], "--subset", "5000",
                         "--depth", "10", "--widen", "2", "--epochs", "20", "--first-layer", kind,
                         "--seed", "0", "--deterministic", "--threads", "1", "--out", str(out)])
        assert code == 0
        errors[kind] = _final_error(out)
    ok = all(e < 0.5 for e in errors.values())
    assert report(7, ok, ", ".join(f"{k} {100 * e:.1f}%" for k, e in errors.items()) + " (< 50%)")


def test_criterion_8_cost_shape(tmp_path, report, capsys):
    out = tmp_path / "bench"
    code = cli.main(["bench", "--sizes", "8,12,16,20,24,28,32", "--seed", "0", "--threads", "1", "--out", str(out)])
    capsys.readouterr()
    with open(out / "manifest.json") as fh:
        r2 = json.load(fh)["input_grad_fit_r2"]
    ok = code == 0 and r2 >= 0.8
    note = "" if r2 > 0.9 else " (below the 0.9 target, above the 0.8 failure line)" if ok else ""
    assert report(8, ok, f"input-gradient time vs Ho*Wo over 7 sizes: R^2 = {r2:.4f}{note}")


@pytest.mark.slow
def test_criterion_9_determinism(demo_first, tmp_path_factory, report):
    first_root, _, _ = demo_first
    second_root = tmp_path_factory.mktemp("demo_second")
    _demo_runs(str(second_root))
    differing = []
    for seed in DEMO_SEEDS:
        for kind in ("volterra", "linear"):
            name = os.path.join(f"{kind}_{seed}", "history.csv")
            with open(first_root / name, "rb") as a, open(second_root / name, "rb") as b:
                if a.read() != b.read():
                    differing.append(name)
    ok = not differing
    assert report(9, ok, f"{2 * len(DEMO_SEEDS)} history CSVs compared byte for byte, differing: {differing or 'none'}")
