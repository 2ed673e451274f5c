"""Generalized eigensolvers and Brillouin-zone sweeps."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sl
import scipy.sparse.linalg as sla
from threadpoolctl import threadpool_limits

from .discretize import BlochOperator, PotentialSpec, TorusGrid, assemble, build_grid
from .errors import ConvergenceFailure, InsufficientSampling
from .geometry import HoleShape, Lattice2, ShapeFamily

RESIDUAL_BOUND = 1e-9


@dataclass(frozen=True)
class SolverOptions:
    """``dense_threshold``: largest FREE-node count solved densely."""

    dense_threshold: int = 1500
    max_iters: int = 300
    tol: float = 1e-10
    guard: int = 3


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    method: str
    iterations: int = 0


def residuals(op: BlochOperator, values, vectors) -> np.ndarray:
    """``||S v - lambda M v|| / ||M v||`` for each column."""
    Mv = op.mass @ vectors
    R = op.stiffness @ vectors - Mv * values[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(Mv, axis=0)


def _rayleigh_ritz(S, M, X):
    SX, MX = S @ X, M @ X
    a = X.conj().T @ SX
    b = X.conj().T @ MX
    w, c = sl.eigh((a + a.conj().T) / 2, (b + b.conj().T) / 2)
    return w, X @ c


def _dense(op, n_bands):
    S = op.stiffness.toarray()
    M = op.mass.toarray()
    w, v = sl.eigh(S, M, subset_by_index=[0, n_bands - 1])
    return w, v, 0


def _iterative(op, n_bands, opts: SolverOptions):
    S = op.stiffness.tocsc()
    M = op.mass.tocsc()
    n = S.shape[0]
    # S + (sup|V| + 1) M is positive definite, so its LU is a safe preconditioner
    sigma = -(op.meta.get("v_bound", 0.0) + 1.0)
    lu = sla.splu((S - sigma * M).tocsc())
    prec = sla.LinearOperator((n, n), matvec=lu.solve, matmat=lu.solve, dtype=complex)
    block = n_bands + opts.guard
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, block)) + 1j * rng.standard_normal((n, block))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, X = sla.lobpcg(S, X, B=M, M=prec, tol=opts.tol * 1e-2, maxiter=opts.max_iters,
                          largest=False)
    w, X = _rayleigh_ritz(S, M, X)
    res = residuals(op, w[:n_bands], X[:, :n_bands])
    it = 0
    # shift-invert subspace polish for clustered eigenvalues LOBPCG left behind
    while res.max() > opts.tol and it < opts.max_iters:
        X = lu.solve(np.asarray(M @ X))
        w, X = _rayleigh_ritz(S, M, X)
        res = residuals(op, w[:n_bands], X[:, :n_bands])
        it += 1
    if res.max() > opts.tol:
        raise ConvergenceFailure(
            f"iterative eigensolver stalled at residual {res.max():.3g} (target {opts.tol:g})",
            residuals=res,
        )
    return w[:n_bands], X[:, :n_bands], it


def eigs_lowest(op: BlochOperator, n_bands: int, options: SolverOptions | None = None,
                method: str = "auto") -> EigenResult:
    """Smallest ``n_bands`` generalized eigenpairs of a Hermitian Bloch operator.

    ``method`` is ``"dense"``, ``"iterative"`` or ``"auto"`` (dense up to
    ``options.dense_threshold`` unknowns).  Eigenvectors are M-orthonormal.

    Raises
    ------
    ConvergenceFailure
        Iterative path could not reach ``options.tol``.
    """
    opts = options or SolverOptions()
    n = op.stiffness.shape[0]
    if n_bands > n:
        raise ValueError(f"asked for {n_bands} bands but only {n} free nodes")
    if np.any(op.k.imag != 0):
        raise ValueError("eigs_lowest needs a real quasimomentum (Hermitian problem)")
    if method == "auto":
        small = n <= opts.dense_threshold or n < 5 * (n_bands + opts.guard)
        method = "dense" if small else "iterative"
    if method == "dense":
        w, v, it = _dense(op, n_bands)
    elif method == "iterative":
        w, v, it = _iterative(op, n_bands, opts)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    order = np.argsort(w, kind="stable")
    w, v = np.asarray(w[order], float), v[:, order]
    return EigenResult(w, v, residuals(op, w, v), method, it)


@dataclass(frozen=True, eq=False)
class BlochProblem:
    """Everything needed to assemble the Bloch operator at any ``k``."""

    lattice: Lattice2 = field(default_factory=Lattice2.square)
    hole: HoleShape | None = None
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    N: int = 48
    mode: str = "regrid"
    family: ShapeFamily | None = None
    t: float = 0.0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.hole is None and self.mode != "nohole":
            object.__setattr__(self, "mode", "nohole")

    @cached_property
    def grid(self) -> TorusGrid:
        return build_grid(self.lattice, self.hole, self.N, self.mode, self.t, self.family)

    def with_t(self, t: float) -> "BlochProblem":
        return replace(self, t=float(t))

    def operator(self, k) -> BlochOperator:
        op = assemble(self.grid, self.potential, k, self.family, self.t, self.mode)
        op.meta["v_bound"] = self.potential.sup_bound
        return op

    def solve(self, k, n_bands: int, method: str = "auto") -> EigenResult:
        try:
            return eigs_lowest(self.operator(k), n_bands, self.solver, method)
        except ConvergenceFailure as exc:
            raise ConvergenceFailure(f"{exc} at k={tuple(np.asarray(k))}",
                                     exc.residuals, np.asarray(k)) from exc

    def describe(self) -> dict:
        return {
            "lattice": self.lattice.basis.tolist(),
            "hole": None if self.hole is None else self.hole.describe(),
            "potential": self.potential.describe(),
            "N": self.N,
            "mode": self.mode,
            "t": self.t,
            "family": None if self.family is None else self.family.describe(),
        }


@dataclass(frozen=True)
class KPath:
    """Piecewise-linear path through labelled quasimomenta."""

    vertices: tuple
    points_per_segment: int = 30

    def __post_init__(self):
        verts = tuple((str(lbl), tuple(float(c) for c in k)) for lbl, k in self.vertices)
        if len(verts) < 2:
            raise ValueError("a k-path needs at least two vertices")
        for (_, a), (_, b) in zip(verts, verts[1:]):
            if a == b:
                raise ValueError(f"consecutive k-path vertices coincide: {a}")
        if self.points_per_segment < 2:
            raise ValueError("points_per_segment must be >= 2")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def standard(cls, lattice: Lattice2 | None = None, points_per_segment: int = 30) -> "KPath":
        """Gamma - X - M - Gamma built from the dual basis."""
        lattice = lattice or Lattice2.square()
        d = lattice.dual_basis
        frac = [("G", (0, 0)), ("X", (0.5, 0)), ("M", (0.5, 0.5)), ("G", (0, 0))]
        return cls(tuple((lbl, d @ np.array(f)) for lbl, f in frac), points_per_segment)

    def sample(self):
        """Points, segment index, cumulative arclength, vertex positions."""
        pts, seg, ticks = [], [], [0]
        for s, ((_, a), (_, b)) in enumerate(zip(self.vertices, self.vertices[1:])):
            a, b = np.array(a), np.array(b)
            u = np.linspace(0.0, 1.0, self.points_per_segment)
            if s > 0:
                u = u[1:]
            pts.append(a[None, :] + u[:, None] * (b - a)[None, :])
            seg += [s] * len(u)
            ticks.append(ticks[-1] + len(u) - (1 if s == 0 else 0))
        pts = np.vstack(pts)
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(steps)])
        return pts, np.array(seg), arc, ticks

    @property
    def n_points(self) -> int:
        return (len(self.vertices) - 1) * (self.points_per_segment - 1) + 1


@dataclass
class BandStructure:
    """``bands[i, j]`` is the j-th smallest eigenvalue at ``k_points[i]``."""

    k_points: np.ndarray
    bands: np.ndarray
    residuals: np.ndarray
    arclength: np.ndarray
    segment: np.ndarray
    labels: list = field(default_factory=list)  # (point index, label)
    grid_shape: tuple | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_bands(self) -> int:
        return self.bands.shape[1]

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max())

    def gridded(self) -> np.ndarray:
        """Bands reshaped to (n1, n2, n_bands); only for k-grids."""
        if self.grid_shape is None:
            raise ValueError("band structure is not on a k-grid")
        return self.bands.reshape(*self.grid_shape, self.n_bands)


_WORKER_PROBLEM = None


def _init_worker(problem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem
    threadpool_limits(1)


def _solve_one(args):
    k, n_bands = args
    res = _WORKER_PROBLEM.solve(k, n_bands)
    return res.values, res.residuals


def _sweep(problem: BlochProblem, ks, n_bands: int, workers: int = 1):
    """Solve at every k; results come back in input order."""
    jobs = [(np.asarray(k, float), n_bands) for k in ks]
    if workers <= 1:
        # same single-threaded BLAS as the pool workers, so results match bitwise
        with threadpool_limits(1):
            out = [problem.solve(k, n) for k, n in jobs]
        out = [(r.values, r.residuals) for r in out]
    else:
        problem.grid  # classify once before pickling
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(problem,)) as ex:
            out = list(ex.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    vals = np.array([o[0] for o in out])
    res = np.array([o[1] for o in out])
    return vals, res


def band_structure(problem: BlochProblem, path: KPath, n_bands: int,
                   workers: int = 1) -> BandStructure:
    pts, seg, arc, ticks = path.sample()
    vals, res = _sweep(problem, pts, n_bands, workers)
    meta = problem.describe() | {"n_bands": n_bands, "kind": "path",
                                 "points_per_segment": path.points_per_segment}
    labels = [(i, lbl) for i, (lbl, _) in zip(ticks, path.vertices)]
    return BandStructure(pts, vals, res, arc, seg, labels, None, meta)


def kgrid_points(lattice: Lattice2, shape) -> np.ndarray:
    """Points ``dual_basis @ (i/n1, j/n2)``, row-major over (i, j)."""
    n1, n2 = shape
    i, j = np.meshgrid(np.arange(n1) / n1, np.arange(n2) / n2, indexing="ij")
    frac = np.stack([i.ravel(), j.ravel()], axis=-1)
    return frac @ lattice.dual_basis.T


def dispersion_surface(problem: BlochProblem, shape, n_bands: int,
                       workers: int = 1) -> BandStructure:
    """Bands on an ``n1 x n2`` grid over the dual-basis cell ([0, 2pi)^2 when square).

    ``segment`` holds the first grid index and ``arclength`` the distance
    from the start of that grid row.
    """
    n1, n2 = (int(s) for s in shape)
    pts = kgrid_points(problem.lattice, (n1, n2))
    vals, res = _sweep(problem, pts, n_bands, workers)
    seg = np.repeat(np.arange(n1), n2)
    row0 = pts[seg * n2]
    arc = np.linalg.norm(pts - row0, axis=1)
    meta = problem.describe() | {"n_bands": n_bands, "kind": "grid", "k_grid": [n1, n2]}
    return BandStructure(pts, vals, res, arc, seg, [], (n1, n2), meta)


@dataclass(frozen=True)
class SpectrumReport:
    bands: list
    spectrum: list
    gaps: list
    k_grid: list
    N: int
    grid_spacing: list

    def to_json(self) -> dict:
        return {
            "bands": self.bands,
            "spectrum": self.spectrum,
            "gaps": self.gaps,
            "k_grid": self.k_grid,
            "N": self.N,
        }


def merge_intervals(intervals):
    """Union of closed intervals as a sorted list of disjoint ``[lo, hi]``."""
    merged = []
    for lo, hi in sorted((float(a), float(b)) for a, b in intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def spectrum_report(bs: BandStructure, cutoff: float | None = None) -> SpectrumReport:
    """Project sampled bands onto the energy axis.

    Gaps are the open intervals between merged band intervals; with a
    ``cutoff`` only gaps starting below it are kept.  They are certified only
    to the k-sampling density recorded in ``grid_spacing``.
    """
    if bs.grid_shape is None:
        raise ValueError("spectrum_report needs a gridded band structure, not a path")
    lo, hi = bs.bands.min(axis=0), bs.bands.max(axis=0)
    tol = 10 * bs.max_residual
    for j in range(bs.n_bands):
        if hi[j] - lo[j] < tol:
            warnings.warn(
                f"band {j + 1}: sampled oscillation {hi[j] - lo[j]:.3g} is below "
                f"10x solver residual; flat-band suspect",
                InsufficientSampling,
                stacklevel=2,
            )
    bands = [[float(a), float(b)] for a, b in zip(lo, hi)]
    spec = merge_intervals(bands)
    gaps = [[spec[i][1], spec[i + 1][0]] for i in range(len(spec) - 1)]
    if cutoff is not None:
        gaps = [g for g in gaps if g[0] < cutoff]
    n1, n2 = bs.grid_shape
    return SpectrumReport(bands, spec, gaps, [n1, n2], int(bs.metadata.get("N", 0)),
                          [2 * np.pi / n1, 2 * np.pi / n2])


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def richardson(Ns, values, order: float = 2.0) -> float:
    """Extrapolate ``lambda(N) = lambda* + c N^-order`` to ``N -> inf``.

    Two grids give the classical formula; more are fitted by least squares.
    """
    Ns = np.asarray(Ns, float)
    values = np.asarray(values, float)
    if Ns.size < 2 or Ns.size != values.size:
        raise ValueError("richardson needs matching arrays of at least two grid sizes")
    A = np.stack([np.ones_like(Ns), Ns ** -order], axis=1)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return float(coef[0])
