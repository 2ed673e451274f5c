"""Spectral-theory diagnostics: the Thomas certificate, flat-band screening and
shape-analyticity probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl

from .discretize import TorusGrid, multiplier_A, multiplier_B
from .errors import SimplicityLost
from .geometry import ShapeFamily
from .spectral import BandStructure, BlochProblem, KPath, band_structure

FLOOR_RTOL = 1e-8


@dataclass(frozen=True)
class ThomasCertificate:
    C: float
    alpha: float
    beta: float
    sigma_min_B: float
    theoretical_floor: float
    passed: bool
    N: int
    hole: dict | None
    operator_bound: float | None = None

    def to_json(self) -> dict:
        return {
            "C": self.C,
            "alpha": self.alpha,
            "beta": self.beta,
            "sigma_min_B": self.sigma_min_B,
            "floor": self.theoretical_floor,
            "operator_bound": self.operator_bound,
            "pass": self.passed,
            "N": self.N,
            "hole": self.hole,
        }


def _check_thomas_args(C, beta):
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    if beta == "auto" or beta is None:
        beta = C / 6 * 1.2
    beta = float(beta)
    if not beta > C / 6:
        raise ValueError(f"beta must exceed C/6 = {C / 6:.6g}, got {beta}")
    return beta


def _circulant_B(N, alpha, beta):
    """Dense matrix of the first-axis multiplier acting on one grid line."""
    return np.fft.ifft(multiplier_B(N, alpha, beta)[:, None] * np.fft.fft(np.eye(N), axis=0), axis=0)


def sigma_min_B(grid: TorusGrid, alpha: float, beta: float) -> float:
    """Smallest singular value of B on zero-extended FREE-node vectors.

    B only differentiates along the first axis, so it decouples into one
    circulant per grid line ``xi_2 = const``; the subspace restriction keeps
    the FREE columns of each line.
    """
    Bline = _circulant_B(grid.N, alpha, beta)
    free = ~grid.dirichlet
    best = np.inf
    for i2 in range(grid.N):
        cols = np.flatnonzero(free[:, i2])
        if cols.size == 0:
            continue
        s = sl.svdvals(Bline[:, cols])
        best = min(best, float(s[-1]))
    return best


def thomas_operator_bound(grid: TorusGrid, C: float, beta="auto", alpha: float = np.pi) -> float:
    """Smallest singular value of ``A + B`` on zero-extended FREE-node vectors.

    The Gram matrix ``(A+B)^* (A+B)`` is the convolution with the inverse DFT
    of ``|a(m)|^2 + |b(m)|^2``, restricted to FREE nodes; its lowest
    eigenvalue is computed densely.
    """
    beta = _check_thomas_args(C, beta)
    N = grid.N
    sym2 = multiplier_A(N, alpha, beta) ** 2 + np.abs(multiplier_B(N, alpha, beta))[:, None] ** 2
    if not grid.dirichlet.any():
        # circulant Gram matrix: its spectrum is the symbol itself
        return float(np.sqrt(sym2.min()))
    kernel = np.fft.ifft2(sym2)
    f = grid.free_nodes
    f1, f2 = (f // N).astype(np.int32), (f % N).astype(np.int32)
    gram = kernel[(f1[:, None] - f1[None, :]) % N, (f2[:, None] - f2[None, :]) % N]
    lam = sl.eigh(gram, subset_by_index=[0, 0], eigvals_only=True, overwrite_a=True,
                  driver="evr")[0]
    return float(np.sqrt(max(lam, 0.0)))


def thomas_certificate(grid: TorusGrid, C: float, beta="auto", alpha: float = np.pi,
                       with_operator_bound: bool = True) -> ThomasCertificate:
    """Discrete form of the complex-quasimomentum argument for absolute continuity.

    With ``k = (alpha + i beta, 0)`` the multiplier of B has modulus
    ``2 beta |alpha - 2 pi m_1| >= 2 beta pi`` at ``alpha = pi``; restricting
    to functions vanishing on the hole can only raise the minimum.  The
    certificate passes when the measured minimum reaches that floor and the
    floor exceeds ``C``.

    Parameters
    ----------
    C : float
        Bound on the potential (plus any absorbed spectral shift).
    beta : float or "auto"
        Must exceed ``C / 6``; ``"auto"`` takes ``1.2 C / 6``.
    """
    beta = _check_thomas_args(C, beta)
    alpha = float(alpha)
    sig = sigma_min_B(grid, alpha, beta)
    # distance from alpha to the nearest multiple of 2 pi sets the multiplier floor
    floor = 2 * beta * abs(alpha - 2 * np.pi * round(alpha / (2 * np.pi)))
    passed = sig >= floor * (1 - FLOOR_RTOL) and floor > C
    op = thomas_operator_bound(grid, C, beta, alpha) if with_operator_bound else None
    hole = None if grid.shape is None else grid.shape.describe()
    return ThomasCertificate(float(C), alpha, beta, sig, floor, bool(passed), grid.N, hole, op)


@dataclass(frozen=True)
class BandVerdict:
    band: int
    oscillation: float
    threshold: float
    verdict: str  # "NONFLAT" or "SUSPECT"


def flat_band_test(bs: BandStructure, residual: float | None = None) -> list[BandVerdict]:
    """Flag bands whose k-oscillation cannot be told apart from solver noise.

    There is deliberately no FLAT verdict: a sampled test can only fail to
    refute flatness.
    """
    if bs.grid_shape is None:
        raise ValueError("flat_band_test needs a gridded band structure")
    if min(bs.grid_shape) < 9:
        raise ValueError(f"flat_band_test needs at least a 9x9 k-grid, got {bs.grid_shape}")
    residual = bs.max_residual if residual is None else float(residual)
    out = []
    for j in range(bs.n_bands):
        col = bs.bands[:, j]
        osc = float(col.max() - col.min())
        thr = 10 * residual * max(1.0, float(np.abs(col).max()))
        out.append(BandVerdict(j + 1, osc, thr, "NONFLAT" if osc > thr else "SUSPECT"))
    return out


@dataclass
class AnalyticityProbe:
    t: np.ndarray
    lam: np.ndarray
    gap: np.ndarray
    steps: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    order_d1: float
    order_d2: float
    fit_degree: int
    fit_residual: float
    fit_residual_half: float
    band: int
    k0: tuple
    residual: float
    truncated: bool = False
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "d1": [float(v) for v in self.d1],
            "d2": [float(v) for v in self.d2],
            "steps": [float(v) for v in self.steps],
            "orders": {"d1": self.order_d1, "d2": self.order_d2},
            "fit_degree": self.fit_degree,
            "fit_residual": self.fit_residual,
            "fit_residual_half": self.fit_residual_half,
            "band": self.band,
            "k0": list(self.k0),
            "min_gap": float(self.gap.min()),
            "truncated": self.truncated,
        }


def lobatto_samples(t_max: float, n: int) -> np.ndarray:
    """Symmetric Chebyshev-Lobatto points on [-t_max, t_max], ascending."""
    t = np.sort(t_max * np.cos(np.pi * np.arange(n) / (n - 1)))
    return (t - t[::-1]) / 2  # exact mirror symmetry, midpoint exactly 0


def polyfit_residual(t, lam, degree: int) -> float:
    t, lam = np.asarray(t), np.asarray(lam)
    c = np.polynomial.polynomial.polyfit(t, lam, degree)
    return float(np.abs(np.polynomial.polynomial.polyval(t, c) - lam).max())


def _order(d):
    a, b = abs(d[0] - d[1]), abs(d[1] - d[2])
    if a == 0 or b == 0:
        return float("nan")
    return float(np.log2(a / b))


class _Tracker:
    """Follows one eigenvalue in t by nearest-value matching."""

    def __init__(self, problem, k0, band, n_extra=2):
        self.problem = problem
        self.k0 = np.asarray(k0, float)
        self.band = band
        self.n = band + n_extra
        self.cache = {}
        self.worst_residual = 0.0

    def __call__(self, t, ref=None):
        if t not in self.cache:
            res = self.problem.with_t(t).solve(self.k0, self.n)
            self.cache[t] = res
            self.worst_residual = max(self.worst_residual, float(res.residuals.max()))
        res = self.cache[t]
        vals = res.values
        j = self.band - 1 if ref is None else int(np.argmin(np.abs(vals - ref)))
        neigh = [vals[i] for i in (j - 1, j + 1) if 0 <= i < len(vals)]
        gap = min(abs(vals[j] - v) for v in neigh)
        margin = 10 * float(res.residuals.max()) * max(1.0, abs(vals[j]))
        return float(vals[j]), float(gap), gap > margin


def analyticity_probe(problem: BlochProblem, family: ShapeFamily, k0, band: int = 1,
                      t_max: float = 0.1, n_steps: int = 9, step: float | None = None,
                      fit_degree: int = 4) -> AnalyticityProbe:
    """Sample ``lambda_band(k0, t)`` along ``family`` in pull-back mode.

    Central differences use steps ``h, h/2, h/4`` with ``h = step`` (default
    ``t_max / 2``); orders come from successive differences.  Polynomial fits
    of ``fit_degree`` are made on Lobatto samples over ``[-t_max, t_max]`` and
    over the half interval.

    Raises
    ------
    SimplicityLost
        When the tracked eigenvalue comes within 10x solver residual of a
        neighbour; the partial probe is attached to the exception.
    """
    if problem.hole is None:
        raise ValueError("analyticity probe needs a hole")
    from dataclasses import replace
    pb = replace(problem, mode="pullback", family=family, t=0.0)
    track = _Tracker(pb, k0, band)

    lam0, gap0, ok = track(0.0)
    if not ok:
        raise SimplicityLost(f"band {band} is not simple at t=0 (gap {gap0:.3g})")

    h = t_max / 2 if step is None else float(step)
    steps = np.array([h, h / 2, h / 4])
    ts_main = lobatto_samples(t_max, n_steps)
    ts_half = lobatto_samples(t_max / 2, n_steps)
    diff_ts = np.concatenate([steps, -steps])
    wanted = sorted(set(np.concatenate([ts_main, ts_half, diff_ts]).tolist()) | {0.0}, key=abs)

    values, gaps = {0.0: lam0}, {0.0: gap0}
    truncated = False
    for t in wanted:
        if t == 0.0:
            continue
        # nearest already-computed parameter on the same side gives the reference
        ref_t = min((s for s in values if s * t >= 0), key=lambda s: abs(s - t))
        lam, gap, ok = track(t, values[ref_t])
        if not ok:
            truncated = True
            break
        values[t], gaps[t] = lam, gap

    ts_sorted = np.array(sorted(values))
    probe = AnalyticityProbe(
        t=ts_sorted,
        lam=np.array([values[t] for t in ts_sorted]),
        gap=np.array([gaps[t] for t in ts_sorted]),
        steps=steps,
        d1=np.full(3, np.nan),
        d2=np.full(3, np.nan),
        order_d1=float("nan"),
        order_d2=float("nan"),
        fit_degree=fit_degree,
        fit_residual=float("nan"),
        fit_residual_half=float("nan"),
        band=band,
        k0=tuple(float(v) for v in np.asarray(k0, float)),
        residual=track.worst_residual,
        truncated=truncated,
    )
    if truncated:
        raise SimplicityLost(f"band {band} lost simplicity near t={t:.4g}", probe)

    lp = np.array([values[s] for s in steps])
    lm = np.array([values[-s] for s in steps])
    probe.d1 = (lp - lm) / (2 * steps)
    probe.d2 = (lp - 2 * lam0 + lm) / steps ** 2
    probe.order_d1 = _order(probe.d1)
    probe.order_d2 = _order(probe.d2)
    probe.fit_residual = polyfit_residual(ts_main, [values[t] for t in ts_main], fit_degree)
    probe.fit_residual_half = polyfit_residual(ts_half, [values[t] for t in ts_half], fit_degree)
    return probe


def shape_sweep(problem: BlochProblem, family: ShapeFamily, path: KPath, t_values, n_bands: int,
                workers: int = 1) -> dict:
    """Band structures along ``path`` for each ``t``, pull-back mode, keyed by t."""
    from dataclasses import replace
    pb = replace(problem, mode="pullback", family=family, t=0.0)
    out = {}
    for t in t_values:
        out[float(t)] = band_structure(pb.with_t(float(t)), path, n_bands, workers)
    return out


def continuity_ratio(problem: BlochProblem, family: ShapeFamily, k, t: float, delta: float,
                     n_bands: int) -> float:
    """``max|lam(t+delta) - lam(t)| / max|lam(t+delta/2) - lam(t)|`` (about 2 when smooth)."""
    from dataclasses import replace
    pb = replace(problem, mode="pullback", family=family, t=0.0)
    base = pb.with_t(t).solve(k, n_bands).values
    full = pb.with_t(t + delta).solve(k, n_bands).values
    half = pb.with_t(t + delta / 2).solve(k, n_bands).values
    return float(np.abs(full - base).max() / np.abs(half - base).max())
