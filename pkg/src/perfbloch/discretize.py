"""Q1 finite-element Bloch operators on the perforated torus.

The periodic N x N grid lives in fractional coordinates; node ``(i1, i2)``
sits at ``xi = (i1/N, i2/N)`` and has flat index ``i1 * N + i2``.  Nodes
inside the hole are DIRICHLET and are removed from the unknowns.  Elements
whose four corners are all DIRICHLET contribute nothing and are skipped.

``assemble`` discretises the shifted operator ``(D + k)^2 + V`` (and its
pull-back under ``h_t``) with Bloch-modulated Q1 shape functions
``exp(-i Re(k).(h(x) - h(x_a))) phi_a``.  Written in Bloch node values the
same discrete space is plain Q1 with the phase ``exp(i k.p)`` attached to
couplings that wrap around the cell, which is what ``assemble_gauge`` builds.
The two matrices are related by the diagonal unitary ``exp(i k.x_j)``, so
their spectra agree to rounding, and both are exactly periodic in ``k`` on
the dual lattice.

The Fourier multipliers used by the absolute-continuity certificate act on
zero-extended vectors with the DFT, not with the FE matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import HoleTooLarge
from .geometry import HoleShape, Lattice2, ShapeFamily

MODES = ("nohole", "regrid", "pullback")

# corner offsets in counter-clockwise order
_CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
_G = 0.5 / np.sqrt(3.0)
_QPTS = np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G],
                  [0.5 + _G, 0.5 + _G], [0.5 - _G, 0.5 + _G]])


def _ref_basis(pts):
    s, u = pts[:, 0], pts[:, 1]
    phi = np.stack([(1 - s) * (1 - u), s * (1 - u), s * u, (1 - s) * u], axis=-1)
    ds = np.stack([-(1 - u), 1 - u, u, -u], axis=-1)
    du = np.stack([-(1 - s), -s, s, 1 - s], axis=-1)
    return phi, np.stack([ds, du], axis=-1)


_PHI, _DPHI = _ref_basis(_QPTS)  # (Q, A), (Q, A, 2)


@dataclass(frozen=True)
class PotentialSpec:
    """``V(xi) = c0 + sum c cos(2 pi m.xi + phase)`` in fractional coordinates."""

    terms: tuple = ()
    c0: float = 0.0

    def __post_init__(self):
        clean = []
        for c, m, ph in self.terms:
            m = tuple(int(v) for v in m)
            if len(m) != 2:
                raise ValueError(f"potential wave vector must have 2 entries, got {m}")
            clean.append((float(c), m, float(ph)))
        object.__setattr__(self, "terms", tuple(clean))
        object.__setattr__(self, "c0", float(self.c0))

    @classmethod
    def constant(cls, c0: float) -> "PotentialSpec":
        return cls((), c0)

    @property
    def sup_bound(self) -> float:
        return abs(self.c0) + sum(abs(c) for c, _, _ in self.terms)

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        v = np.full(xi.shape[:-1], self.c0)
        for c, m, ph in self.terms:
            v = v + c * np.cos(2 * np.pi * (xi[..., 0] * m[0] + xi[..., 1] * m[1]) + ph)
        return v

    def describe(self) -> dict:
        return {"c0": self.c0, "terms": [[c, list(m), ph] for c, m, ph in self.terms]}


@dataclass(frozen=True, eq=False)
class TorusGrid:
    N: int
    lattice: Lattice2
    shape: HoleShape | None
    dirichlet: np.ndarray  # (N, N) bool, indexed [i1, i2]
    mode: str = "regrid"
    t: float = 0.0

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet.ravel())

    @cached_property
    def free_index(self) -> np.ndarray:
        idx = np.full(self.N * self.N, -1, dtype=np.int64)
        idx[self.free_nodes] = np.arange(self.free_nodes.size)
        return idx

    @property
    def n_free(self) -> int:
        return int(self.free_nodes.size)

    @cached_property
    def node_fractional(self) -> np.ndarray:
        i1, i2 = np.meshgrid(np.arange(self.N), np.arange(self.N), indexing="ij")
        return np.stack([i1.ravel(), i2.ravel()], axis=-1) / self.N

    @cached_property
    def node_physical(self) -> np.ndarray:
        return self.lattice.to_physical(self.node_fractional)

    @cached_property
    def _elements(self):
        N = self.N
        i1, i2 = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        origin = np.stack([i1.ravel(), i2.ravel()], axis=-1)  # (E, 2)
        unwrapped = origin[:, None, :] + _CORNERS[None, :, :]  # (E, 4, 2)
        wrapped = unwrapped % N
        nodes = wrapped[..., 0] * N + wrapped[..., 1]
        keep = (~self.dirichlet.ravel()[nodes]).any(axis=1)
        return origin[keep], unwrapped[keep], nodes[keep]

    @property
    def element_origin(self) -> np.ndarray:
        return self._elements[0]

    @property
    def element_corners(self) -> np.ndarray:
        """Unwrapped integer corner coordinates, shape (E, 4, 2)."""
        return self._elements[1]

    @property
    def element_nodes(self) -> np.ndarray:
        """Flat (wrapped) node indices of each retained element, shape (E, 4)."""
        return self._elements[2]

    def zero_extend(self, u) -> np.ndarray:
        """Vector on FREE nodes -> vector on all N^2 nodes, zero on the hole."""
        u = np.asarray(u)
        full = np.zeros(self.N * self.N, dtype=np.result_type(u.dtype, np.float64))
        full[self.free_nodes] = u
        return full

    def describe(self) -> dict:
        return {
            "N": self.N,
            "mode": self.mode,
            "t": self.t,
            "n_free": self.n_free,
            "hole": None if self.shape is None else self.shape.describe(),
        }


def build_grid(lattice: Lattice2, shape: HoleShape | None, N: int, mode: str = "regrid",
               t: float = 0.0, family: ShapeFamily | None = None) -> TorusGrid:
    """Classify the nodes of the periodic N x N grid.

    In regrid mode with ``t != 0`` the hole is the perturbed one,
    ``r_base + t rho``; in pullback mode the base hole is used for every t.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if N < 8:
        raise ValueError(f"grid needs N >= 8, got {N}")
    if shape is not None and shape.lattice is not lattice and not np.array_equal(
            shape.lattice.basis, lattice.basis):
        raise ValueError("hole shape was built on a different lattice")
    if mode == "pullback" and family is None:
        raise ValueError("pullback mode requires a shape family")

    eff = None if mode == "nohole" else shape
    if mode == "regrid" and t != 0 and eff is not None:
        if family is None:
            raise ValueError("regrid mode with t != 0 requires a shape family")
        eff = family.shape_at(t)

    dirichlet = np.zeros((N, N), dtype=bool)
    grid = TorusGrid(N, lattice, eff, dirichlet, mode, float(t))
    if eff is not None:
        dirichlet[:] = eff.contains(grid.node_physical).reshape(N, N)
    if not (~dirichlet).any():
        raise HoleTooLarge("hole covers every grid node")
    dirichlet.setflags(write=False)
    return grid


@dataclass(frozen=True, eq=False)
class BlochOperator:
    """Discrete generalized eigenproblem ``S v = lambda M v`` over FREE nodes."""

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    k: np.ndarray
    mode: str
    t: float
    grid: TorusGrid
    gauge: str = "shifted"
    meta: dict = field(default_factory=dict)


def _quadrature_geometry(grid: TorusGrid):
    """Physical quadrature points (E, Q, 2), unwrapped corners (E, 4, 2)."""
    N = grid.N
    xi_q = (grid.element_origin[:, None, :] + _QPTS[None, :, :]) / N
    xi_c = grid.element_corners / N
    return grid.lattice.to_physical(xi_q), grid.lattice.to_physical(xi_c)


def _scatter(grid: TorusGrid, elem, dtype):
    nodes = grid.element_nodes
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    n = grid.N * grid.N
    full = sp.coo_matrix((elem.ravel().astype(dtype), (rows, cols)), shape=(n, n)).tocsr()
    free = grid.free_nodes
    out = full[free][:, free]
    out.sort_indices()
    return out


def assemble(grid: TorusGrid, V: PotentialSpec, k, family: ShapeFamily | None = None,
             t: float | None = None, mode: str | None = None) -> BlochOperator:
    """Assemble the shifted Bloch operator ``(D + k)^2 + V`` or its pull-back.

    Parameters
    ----------
    grid : TorusGrid
        Node classification; its ``mode`` must match ``mode``.
    V : PotentialSpec
    k : array_like, shape (2,)
        Quasimomentum in physical units.  May be complex; the matrix is then
        the (non-Hermitian) form ``(conj((D + conj k) u), (D + k) v)``.
    family, t, mode
        Pull-back data.  ``t`` and ``mode`` default to the grid's.

    Notes
    -----
    With ``h = h_t``, ``J = Dh`` and ``y = h(x)``, each quadrature point
    contributes ``|det J| (G_a^* . G_b + V(y) chi_a^* chi_b)`` where
    ``G_a = J^-T (-i grad chi_a) + k chi_a``.  For ``t = 0`` the Jacobian is
    exactly the identity, so pull-back and regrid matrices coincide bitwise.
    """
    mode = grid.mode if mode is None else mode
    t = grid.t if t is None else float(t)
    if mode != grid.mode:
        raise ValueError(f"grid was built for mode {grid.mode!r}, not {mode!r}")
    if mode == "pullback" and family is None:
        raise ValueError("pullback assembly requires a shape family")
    k = np.asarray(k, dtype=complex).reshape(2)
    k_re = k.real.copy()
    lat = grid.lattice
    N = grid.N

    xq, xc = _quadrature_geometry(grid)
    E = xq.shape[0]
    if mode == "pullback":
        jf = family.jacobian(xq, t)
        J, detJ, yq = jf.J, jf.det, jf.image
        yc = family.displace(xc, t)
    else:
        J = np.broadcast_to(np.eye(2), (E, 4, 2, 2))
        detJ = np.ones((E, 4))
        yq, yc = xq, xc

    w = (abs(lat.det) / (4.0 * N * N)) * np.abs(detJ)  # (E, Q)
    Vq = V(lat.to_fractional(yq))

    # reference gradients -> physical gradients of phi, (Q, A, 2)
    grad_phi = N * np.einsum("ij,qaj->qai", lat.inverse.T, _DPHI)

    dy = yq[:, :, None, :] - yc[:, None, :, :]  # (E, Q, A, 2)
    phase = np.exp(-1j * (dy @ k_re))  # (E, Q, A)
    chi = phase * _PHI[None]
    Jt_k = np.einsum("eqij,i->eqj", J, k_re)  # J^T Re(k)
    grad_chi = phase[..., None] * (grad_phi[None] - 1j * Jt_k[:, :, None, :] * _PHI[None, :, :, None])

    JinvT = np.swapaxes(np.linalg.inv(J), -1, -2)
    Dchi = np.einsum("eqij,eqaj->eqai", JinvT, -1j * grad_chi)
    G = Dchi + k[None, None, None, :] * chi[..., None]
    H = Dchi + np.conj(k)[None, None, None, :] * chi[..., None]

    S_e = np.einsum("eq,eqai,eqbi->eab", w, H.conj(), G)
    S_e += np.einsum("eq,eqa,eqb->eab", w * Vq, chi.conj(), chi)
    M_e = np.einsum("eq,eqa,eqb->eab", w, chi.conj(), chi)

    stiffness = _scatter(grid, S_e, complex)
    mass = _scatter(grid, M_e, complex)
    return BlochOperator(stiffness, mass, k, mode, t, grid, "shifted")


def assemble_gauge(grid: TorusGrid, V: PotentialSpec, k) -> BlochOperator:
    """Assemble ``-Delta + V`` on Bloch-periodic Q1 functions.

    Element matrices are the plain real Q1 ones; a coupling between corners
    that lie in different periodic copies of the cell picks up the Bloch
    factors ``exp(i k.p)`` of their period jumps ``p``.
    """
    if grid.mode == "pullback":
        raise ValueError("gauge assembly supports nohole and regrid grids only")
    k = np.asarray(k, dtype=float).reshape(2)
    lat = grid.lattice
    N = grid.N

    xq, _ = _quadrature_geometry(grid)
    w = abs(lat.det) / (4.0 * N * N)
    Vq = V(lat.to_fractional(xq))  # (E, Q)
    gram = N * N * np.einsum("qai,ij,qbj->qab", _DPHI, lat.gram_inverse, _DPHI)
    K_e = w * gram.sum(axis=0)
    M_ref = w * np.einsum("qa,qb->qab", _PHI, _PHI)
    S_e = K_e[None] + np.einsum("eq,qab->eab", Vq, M_ref)
    M_e = np.broadcast_to(M_ref.sum(axis=0), S_e.shape)

    jumps = grid.element_corners // N  # (E, 4, 2) in {0, 1}
    bloch = np.exp(1j * (lat.to_physical(jumps) @ k))  # (E, 4)
    ph = bloch.conj()[:, :, None] * bloch[:, None, :]
    stiffness = _scatter(grid, ph * S_e, complex)
    mass = _scatter(grid, ph * M_e, complex)
    return BlochOperator(stiffness, mass, k.astype(complex), grid.mode, grid.t, grid, "gauge")


def _fourier_modes(N):
    return np.fft.fftfreq(N, d=1.0 / N)  # 0..N/2-1, -N/2..-1


def multiplier_B(N: int, alpha: float, beta: float) -> np.ndarray:
    """Symbol ``2 i beta (alpha - 2 pi m_1)`` on the first-axis frequencies."""
    return 2j * beta * (alpha - 2 * np.pi * _fourier_modes(N))


def multiplier_A(N: int, alpha: float, beta: float) -> np.ndarray:
    """Real symbol ``|2 pi m|^2 + alpha^2 - beta^2 + 4 pi alpha m_1``, shape (N, N)."""
    m = _fourier_modes(N)
    m1, m2 = np.meshgrid(m, m, indexing="ij")
    return (2 * np.pi) ** 2 * (m1 ** 2 + m2 ** 2) + alpha ** 2 - beta ** 2 + 4 * np.pi * alpha * m1


def _as_full(grid: TorusGrid, u):
    u = np.asarray(u)
    if u.shape == (grid.n_free,):
        return grid.zero_extend(u).reshape(grid.N, grid.N)
    raise ValueError(f"expected a vector on the {grid.n_free} FREE nodes, got shape {u.shape}")


def apply_multiplier_B(grid: TorusGrid, u, alpha: float, beta: float) -> np.ndarray:
    """Zero-extend ``u`` and apply ``B = 2 i beta (alpha + i d/dx_1)`` spectrally.

    Returns the result on all N^2 nodes (flat).
    """
    full = _as_full(grid, u)
    mult = multiplier_B(grid.N, alpha, beta)
    out = np.fft.ifft(mult[:, None] * np.fft.fft(full, axis=0), axis=0)
    return out.ravel()


def apply_multiplier_A(grid: TorusGrid, u, alpha: float, beta: float) -> np.ndarray:
    """Zero-extend ``u`` and apply ``-Delta + alpha^2 - beta^2 - 2 i alpha d/dx_1``."""
    full = _as_full(grid, u)
    out = np.fft.ifft2(multiplier_A(grid.N, alpha, beta) * np.fft.fft2(full))
    return out.ravel()


def export_coo(matrix, path) -> None:
    """Write a sparse matrix as ``row col re im`` lines sorted by (row, col)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for i in order:
            v = complex(coo.data[i])
            fh.write(f"{coo.row[i]} {coo.col[i]} {v.real:.17g} {v.imag:.17g}\n")
