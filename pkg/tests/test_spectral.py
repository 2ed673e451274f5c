import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfbloch import BandStructure, BlochProblem, ConvergenceFailure, HoleShape, \
    InsufficientSampling, KPath, PotentialSpec, SolverOptions, band_structure, \
    dispersion_surface, eigs_lowest, spectrum_report
from perfbloch.spectral import merge_intervals, richardson

from conftest import free_spectrum

V_COS = PotentialSpec(((2.0, (1, 0), 0.0), (2.0, (0, 1), 0.0)))


def test_free_torus_at_gamma():
    w = BlochProblem(N=32).solve([0, 0], 5).values
    assert abs(w[0]) < 1e-9
    np.testing.assert_allclose(w[1:], 4 * np.pi ** 2, rtol=0.02)


def test_free_torus_half_shift():
    w = BlochProblem(N=32).solve([np.pi / 2, 0], 1).values
    assert w[0] == pytest.approx((np.pi / 2) ** 2, rel=0.01)


@pytest.mark.parametrize("k", [(0.0, 0.0), (1.1, -0.6), (np.pi, np.pi)])
def test_dense_and_iterative_agree(k, disk):
    prob = BlochProblem(hole=disk, potential=V_COS, N=40)
    a = prob.solve(k, 5, method="dense")
    b = prob.solve(k, 5, method="iterative")
    np.testing.assert_allclose(a.values, b.values, rtol=1e-8, atol=1e-8)
    for res in (a, b):
        assert res.residuals.max() <= 1e-9
        M = prob.operator(k).mass
        G = res.vectors.conj().T @ (M @ res.vectors)
        np.testing.assert_allclose(G, np.eye(5), atol=1e-8)


def test_auto_uses_iterative_above_threshold(disk):
    prob = BlochProblem(hole=disk, N=32, solver=SolverOptions(dense_threshold=100))
    assert prob.solve([0.3, 0.2], 3).method == "iterative"
    assert BlochProblem(hole=disk, N=16).solve([0.3, 0.2], 3).method == "dense"


def test_convergence_failure_reports_k(disk):
    prob = BlochProblem(hole=disk, N=32, solver=SolverOptions(max_iters=1, tol=1e-300))
    with pytest.raises(ConvergenceFailure) as info:
        prob.solve([0.3, 0.2], 4, method="iterative")
    assert info.value.residuals is not None
    np.testing.assert_array_equal(info.value.k, [0.3, 0.2])
    assert "k=" in str(info.value)


def test_rejects_complex_k_and_too_many_bands(disk):
    prob = BlochProblem(hole=disk, N=8)
    with pytest.raises(ValueError):
        eigs_lowest(prob.operator(np.array([1 + 1j, 0])), 2)
    with pytest.raises(ValueError):
        prob.solve([0, 0], prob.grid.n_free + 1)


def test_kpath_point_count():
    path = KPath.standard(points_per_segment=7)
    pts, seg, arc, ticks = path.sample()
    assert len(pts) == path.n_points == 3 * 6 + 1
    assert np.all(np.diff(arc) > 0)
    np.testing.assert_allclose(pts[ticks], [[0, 0], [np.pi, 0], [np.pi, np.pi], [0, 0]],
                               atol=1e-15)


@pytest.mark.parametrize("verts", [[("A", (0, 0))], [("A", (0, 0)), ("B", (0, 0))]])
def test_kpath_invalid(verts):
    with pytest.raises(ValueError):
        KPath(tuple(verts))


def test_gamma_to_x_free():
    path = KPath((("G", (0, 0)), ("X", (np.pi, 0))), points_per_segment=2)
    bs = band_structure(BlochProblem(N=32), path, 2)
    assert bs.bands[0, 0] == pytest.approx(0, abs=1e-9)
    assert bs.bands[1, 0] == pytest.approx(np.pi ** 2, rel=0.02)


def test_constant_potential_shift(disk):
    path = KPath.standard(points_per_segment=4)
    a = band_structure(BlochProblem(hole=disk, N=20), path, 4)
    b = band_structure(BlochProblem(hole=disk, potential=PotentialSpec.constant(2.5), N=20),
                       path, 4)
    assert np.abs(b.bands - a.bands - 2.5).max() <= 1e-9


def test_bands_sorted_and_residuals_bounded(disk):
    bs = band_structure(BlochProblem(hole=disk, potential=V_COS, N=20),
                        KPath.standard(points_per_segment=5), 5)
    assert np.all(np.diff(bs.bands, axis=1) >= 0)
    assert bs.max_residual <= 1e-9


def test_parallel_sweep_bitwise_equal(disk):
    prob = BlochProblem(hole=disk, potential=V_COS, N=20)
    path = KPath.standard(points_per_segment=4)
    a = band_structure(prob, path, 3, workers=1)
    b = band_structure(prob, path, 3, workers=2)
    assert np.array_equal(a.bands, b.bands)
    assert np.array_equal(a.residuals, b.residuals)


def test_surface_2x2_free():
    bs = dispersion_surface(BlochProblem(N=32), (2, 2), 3)
    for k, row in zip(bs.k_points, bs.bands):
        np.testing.assert_allclose(row, free_spectrum(k, 3), rtol=0.02, atol=1e-9)


def test_surface_time_reversal(disk):
    n = 4
    bs = dispersion_surface(BlochProblem(hole=disk, potential=V_COS, N=20), (n, n), 3)
    g = bs.gridded()
    for i in range(n):
        for j in range(n):
            np.testing.assert_allclose(g[i, j], g[(-i) % n, (-j) % n], atol=1e-9)


def test_dirichlet_monotone_in_hole_size():
    ks = [(0, 0), (np.pi, 0), (1.0, 2.0)]
    for k in ks:
        small = BlochProblem(hole=HoleShape(0.25), N=32).solve(k, 3).values
        big = BlochProblem(hole=HoleShape(0.30), N=32).solve(k, 3).values
        assert np.all(big >= small - 1e-9)


def test_richardson_exact_on_model():
    Ns = np.array([32, 48, 64])
    assert richardson(Ns, 7.0 + 3.0 / Ns ** 2) == pytest.approx(7.0, abs=1e-12)
    assert richardson(Ns[:2], 7.0 - 2.0 / Ns[:2], order=1) == pytest.approx(7.0, abs=1e-12)


def test_disk_richardson_value_pinned(disk):
    # frozen from the N = 32, 48, 64 least-squares O(N^-2) fit
    Ns = [32, 48, 64]
    vals = [BlochProblem(hole=disk, N=N).solve([0, 0], 1).values[0] for N in Ns]
    assert np.all(np.diff(vals) > 0)
    assert richardson(Ns, vals) == pytest.approx(15.69368982558663, rel=1e-7)


def _synthetic(bands, shape=(9, 9)):
    n = shape[0] * shape[1]
    bands = np.asarray(bands, float)
    return BandStructure(np.zeros((n, 2)), bands, np.full(bands.shape, 1e-12), np.zeros(n),
                         np.zeros(n, int), [], shape, {"N": 8})


def _two_bands(lo1, hi1, lo2, hi2):
    t = np.linspace(0, 1, 81)
    return _synthetic(np.stack([lo1 + (hi1 - lo1) * t, lo2 + (hi2 - lo2) * t], axis=1))


def test_spectrum_overlapping_bands():
    rep = spectrum_report(_two_bands(0, 3, 2, 5))
    assert rep.spectrum == [[0.0, 5.0]] and rep.gaps == []


def test_spectrum_gap():
    rep = spectrum_report(_two_bands(0, 3, 4, 5))
    assert rep.spectrum == [[0.0, 3.0], [4.0, 5.0]] and rep.gaps == [[3.0, 4.0]]
    assert set(rep.to_json()) == {"bands", "spectrum", "gaps", "k_grid", "N"}


def test_spectrum_rejects_path():
    bs = _two_bands(0, 1, 2, 3)
    bs.grid_shape = None
    with pytest.raises(ValueError):
        spectrum_report(bs)


def test_spectrum_flat_band_warns():
    bs = _synthetic(np.full((81, 1), 5.0))
    with pytest.warns(InsufficientSampling):
        spectrum_report(bs)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 20)), min_size=1, max_size=12))
def test_merge_intervals_properties(raw):
    ivs = [(a, a + w) for a, w in raw]
    merged = merge_intervals(ivs)
    for (a, b), (c, d) in zip(merged, merged[1:]):
        assert b < c
    for a, b in ivs:
        assert any(lo <= a and b <= hi for lo, hi in merged)
    # every merged endpoint is an input endpoint, so no spurious coverage
    ends = {x for iv in ivs for x in iv}
    assert all(lo in ends and hi in ends for lo, hi in merged)


def test_spectrum_contains_samples_with_warnings_off(disk):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bs = dispersion_surface(BlochProblem(hole=disk, N=16), (3, 3), 3)
        rep = spectrum_report(bs)
    for lam in bs.bands.ravel():
        assert any(lo <= lam <= hi for lo, hi in rep.spectrum)
