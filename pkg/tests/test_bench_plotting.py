import numpy as np
import pytest
from numpy.testing import assert_allclose

from volterranet import bench, plotting
from volterranet.analysis import response_profile
from volterranet.kernels import VolterraFilterBank
from volterranet.tensor import ConvGeometry


def test_linear_fit_exact_line():
    slope, intercept, r2 = bench.linear_fit([1, 2, 3, 4], [3.0, 5.0, 7.0, 9.0])
    assert_allclose((slope, intercept, r2), (2.0, 1.0, 1.0))


def test_linear_fit_r2_known_value():
    # residuals of the fit to (0,0),(1,1),(2,0) are known in closed form
    slope, intercept, r2 = bench.linear_fit([0, 1, 2], [0.0, 1.0, 0.0])
    assert_allclose((slope, intercept, r2), (0.0, 1 / 3, 0.0), atol=1e-12)


def test_linear_fit_constant_series():
    assert bench.linear_fit([1, 2, 3], [5.0, 5.0, 5.0])[2] == 1.0


def test_time_geometry_rows_and_csv():
    rows = bench.time_geometry(6, batch=1, channels=1, filters=2, repeats=1)
    assert [r["kind"] for r in rows] == ["linear", "volterra"]
    assert all(r["out_locations"] == 36 for r in rows)
    assert all(r[k] > 0 for r in rows for k in ("forward_s", "weight_grad_s", "input_grad_s"))
    text = bench.to_csv(rows)
    assert text.splitlines()[0] == ",".join(bench.BENCH_HEADER)
    assert len(text.splitlines()) == 3


def test_doubling_spatial_size_quadruples_locations():
    geom = ConvGeometry(3, 3, 3, 1, 1, 4)
    assert geom.output_hw(16, 16)[0] * geom.output_hw(16, 16)[1] == 4 * 64


@pytest.mark.parametrize("shape", [(3, 3), (3, 12), (5, 2)])
def test_pgm_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    image = rng.standard_normal(shape)
    lo, hi = plotting.write_pgm(tmp_path / "a.pgm", image)
    back = plotting.read_pgm(tmp_path / "a.pgm")
    assert back.shape == shape
    assert (lo, hi) == (image.min(), image.max())
    assert_allclose(back, np.rint((image - lo) / (hi - lo) * 255))


def test_pgm_constant_image(tmp_path):
    plotting.write_pgm(tmp_path / "c.pgm", np.full((2, 2), 7.0))
    assert (plotting.read_pgm(tmp_path / "c.pgm") == 0).all()


def test_read_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        plotting.read_pgm(tmp_path / "x.pgm")


def test_channels_side_by_side():
    grid = np.arange(2 * 3 * 3).reshape(2, 3, 3)
    tiled = plotting.channels_side_by_side(grid)
    assert tiled.shape == (3, 6)
    assert_allclose(tiled[:, :3], grid[0])
    assert_allclose(tiled[:, 3:], grid[1])


def test_figures_are_written_and_reproducible(tmp_path):
    rng = np.random.default_rng(1)
    bank = VolterraFilterBank.zeros(ConvGeometry(2, 3, 3, 1, 1, 2))
    bank.w1[...] = rng.standard_normal(bank.w1.shape)
    bank.w2[...] = rng.standard_normal(bank.w2.shape)
    prof = response_profile(bank, 0, [0.5, 1.0, 2.0])
    paths = []
    for run in ("a", "b"):
        paths.append(plotting.response_profile_figure(prof, str(tmp_path / f"profile_{run}.svg")))
    first, second = (open(p, "rb").read() for p in paths)
    assert first.startswith(b"<?xml") and first == second
    hist = plotting.bench_figure([16, 64], {"t": [1.0, 2.0]}, str(tmp_path / "b.png"), fit=(1.0, 0.0, 1.0))
    assert open(hist, "rb").read(4) == b"\x89PNG"
