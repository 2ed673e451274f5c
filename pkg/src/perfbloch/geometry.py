"""Lattice, hole shapes and radial shape-perturbation maps.

Coordinates come in two flavours.  *Fractional* coordinates ``xi`` live on the
unit square ``[0, 1)^2``; *physical* coordinates are ``x = basis @ xi``.  Holes
are star-shaped about a centre given in fractional coordinates, with the
radius function measured in physical units.

A :class:`ShapeFamily` moves the hole boundary radially.  Inside the disc
``r <= r_inner`` every point is pushed outwards by ``t * rho(theta)``; across
the annulus ``r_inner < r < r_outer`` the push is blended to zero by a
polynomial cutoff; beyond ``r_outer`` the map is the identity, so it folds
consistently onto the torus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import perm

import numpy as np

from .errors import DegenerateMap, HoleTooLarge

_SHAPE_SAMPLES = 4096


@dataclass(frozen=True, eq=False)
class Lattice2:
    """Two-dimensional Bravais lattice; columns of ``basis`` are the periods."""

    basis: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        b = np.array(self.basis, dtype=float)
        if b.shape != (2, 2):
            raise ValueError(f"lattice basis must be 2x2, got shape {b.shape}")
        if not np.linalg.det(b) > 0:
            raise ValueError("lattice basis must have positive determinant")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def square(cls) -> "Lattice2":
        return cls(np.eye(2))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.basis))

    @cached_property
    def gram_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.basis.T @ self.basis)

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.basis)

    @cached_property
    def dual_basis(self) -> np.ndarray:
        """Columns are the reciprocal vectors ``2*pi*inv(basis).T``."""
        return 2 * np.pi * self.inverse.T

    @property
    def is_square(self) -> bool:
        return bool(np.array_equal(self.basis, np.eye(2)))

    def to_physical(self, xi):
        return np.asarray(xi, dtype=float) @ self.basis.T

    def to_fractional(self, x):
        return np.asarray(x, dtype=float) @ self.inverse.T

    def edge_distance(self, xi) -> float:
        """Physical distance from a fractional point to the cell boundary."""
        xi = np.asarray(xi, dtype=float)
        b1, b2 = self.basis[:, 0], self.basis[:, 1]
        # Edges xi_1 = const run along b2, edges xi_2 = const along b1.
        d1 = min(xi[0], 1 - xi[0]) * self.det / np.linalg.norm(b2)
        d2 = min(xi[1], 1 - xi[1]) * self.det / np.linalg.norm(b1)
        return float(min(d1, d2))


def _normalize_coeffs(coeffs, min_order):
    out = []
    for entry in coeffs:
        m, a, b = entry
        if int(m) != m or m < min_order:
            raise ValueError(f"Fourier order must be an integer >= {min_order}, got {m}")
        out.append((int(m), float(a), float(b)))
    return tuple(out)


def _fourier(const, coeffs, theta):
    theta = np.asarray(theta, dtype=float)
    r = np.full_like(theta, const)
    for m, a, b in coeffs:
        r = r + a * np.cos(m * theta) + b * np.sin(m * theta)
    return r


def _fourier_deriv(coeffs, theta):
    theta = np.asarray(theta, dtype=float)
    dr = np.zeros_like(theta)
    for m, a, b in coeffs:
        dr = dr + m * (b * np.cos(m * theta) - a * np.sin(m * theta))
    return dr


_THETA = np.linspace(0.0, 2 * np.pi, _SHAPE_SAMPLES, endpoint=False)


@dataclass(frozen=True, eq=False)
class HoleShape:
    """Star-shaped hole ``r(theta) = r0 + sum(a_m cos m theta + b_m sin m theta)``.

    Raises
    ------
    HoleTooLarge
        If the closed hole does not sit strictly inside the unit cell.
    ValueError
        If the radius function is not positive.
    """

    r0: float
    center: tuple = (0.5, 0.5)
    fourier_coeffs: tuple = ()
    lattice: Lattice2 = field(default_factory=Lattice2.square)

    def __post_init__(self):
        object.__setattr__(self, "r0", float(self.r0))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "fourier_coeffs", _normalize_coeffs(self.fourier_coeffs, 1))
        if not all(0.0 <= c < 1.0 for c in self.center):
            raise ValueError(f"hole centre must be fractional in [0,1)^2, got {self.center}")
        if self.r0 <= 0:
            raise ValueError(f"base radius must be positive, got {self.r0}")
        if self.min_radius <= 0:
            raise ValueError("radius function must stay positive")
        room = self.lattice.edge_distance(self.center)
        if self.max_radius >= room:
            raise HoleTooLarge(
                f"hole exits unit cell: max radius {self.max_radius:.6g} >= "
                f"distance {room:.6g} from centre to cell boundary"
            )

    @cached_property
    def center_physical(self) -> np.ndarray:
        return self.lattice.to_physical(self.center)

    @cached_property
    def max_radius(self) -> float:
        return float(self.radius(_THETA).max())

    @cached_property
    def min_radius(self) -> float:
        return float(self.radius(_THETA).min())

    def radius(self, theta):
        return _fourier(self.r0, self.fourier_coeffs, theta)

    def contains(self, x):
        """True where the physical point(s) ``x`` lie strictly inside the hole."""
        d = np.asarray(x, dtype=float) - self.center_physical
        dist = np.hypot(d[..., 0], d[..., 1])
        return dist < self.radius(np.arctan2(d[..., 1], d[..., 0]))

    def describe(self) -> dict:
        return {
            "r0": self.r0,
            "center": list(self.center),
            "fourier_coeffs": [list(c) for c in self.fourier_coeffs],
        }


def radius(shape: HoleShape, theta):
    return shape.radius(theta)


def contains(shape: HoleShape, x):
    return shape.contains(x)


def cutoff_polynomial(s: int) -> np.polynomial.Polynomial:
    """Degree ``2s+1`` polynomial p on [0, 1] with p(0)=1, p(1)=0 and the
    first ``s`` derivatives vanishing at both ends."""
    if s < 2:
        raise ValueError(f"cutoff smoothness must be >= 2, got {s}")
    deg = 2 * s + 1
    rows, rhs = [], []
    for i in range(s + 1):
        # i-th derivative of u**j is perm(j, i) * u**(j - i)
        at0 = np.zeros(deg + 1)
        at0[i] = perm(i, i)
        at1 = np.array([perm(j, i) if j >= i else 0 for j in range(deg + 1)], float)
        rows += [at0, at1]
        rhs += [1.0 if i == 0 else 0.0, 0.0]
    return np.polynomial.Polynomial(np.linalg.solve(np.array(rows), np.array(rhs)))


@dataclass(frozen=True)
class JacobianField:
    """Jacobian data of ``h_t`` at a batch of points."""

    J: np.ndarray
    det: np.ndarray
    A: np.ndarray
    image: np.ndarray


@dataclass(frozen=True)
class FamilyReport:
    min_det: float
    argmin_x: tuple
    argmin_t: float
    kappa: float
    t_max: float
    samples: int
    passed: bool


@dataclass(frozen=True, eq=False)
class ShapeFamily:
    """Radial perturbation ``(r, theta) -> (r + t rho(theta) chi(r), theta)``.

    ``direction`` holds ``(m, da_m, db_m)`` with ``m >= 0``; an ``m = 0``
    entry is a constant radial push.  ``annulus`` defaults to a band between
    the hole and the cell boundary.
    """

    base: HoleShape
    direction: tuple
    annulus: tuple | None = None
    cutoff_smoothness: int = 2

    def __post_init__(self):
        object.__setattr__(self, "direction", _normalize_coeffs(self.direction, 0))
        room = self.base.lattice.edge_distance(self.base.center)
        if self.annulus is None:
            gap = room - self.base.max_radius
            ann = (self.base.max_radius + 0.2 * gap, self.base.max_radius + 0.9 * gap)
        else:
            ann = tuple(float(a) for a in self.annulus)
        r_in, r_out = ann
        if not self.base.max_radius < r_in < r_out:
            raise ValueError(
                f"annulus must satisfy max hole radius {self.base.max_radius:.6g} "
                f"< r_inner < r_outer, got {ann}"
            )
        if r_out >= room:
            raise ValueError(
                f"annulus outer radius {r_out:.6g} must stay inside the cell (< {room:.6g})"
            )
        object.__setattr__(self, "annulus", ann)
        object.__setattr__(self, "_cut", cutoff_polynomial(int(self.cutoff_smoothness)))

    @classmethod
    def homothetic(cls, base: HoleShape, annulus=None, cutoff_smoothness=2):
        """Family with ``rho = r_base``, i.e. the boundary scales by ``1 + t``."""
        direction = [(0, base.r0, 0.0)] + list(base.fourier_coeffs)
        return cls(base, direction, annulus, cutoff_smoothness)

    @property
    def _const(self):
        return sum(a for m, a, _ in self.direction if m == 0)

    @property
    def _modes(self):
        return tuple(c for c in self.direction if c[0] > 0)

    def rho(self, theta):
        return _fourier(self._const, self._modes, theta)

    def drho(self, theta):
        return _fourier_deriv(self._modes, theta)

    def chi(self, r):
        r = np.asarray(r, dtype=float)
        r_in, r_out = self.annulus
        u = np.clip((r - r_in) / (r_out - r_in), 0.0, 1.0)
        return self._cut(u)

    def dchi(self, r):
        r = np.asarray(r, dtype=float)
        r_in, r_out = self.annulus
        u = (r - r_in) / (r_out - r_in)
        d = self._cut.deriv()(np.clip(u, 0.0, 1.0)) / (r_out - r_in)
        return np.where((u > 0) & (u < 1), d, 0.0)

    def shape_at(self, t: float) -> HoleShape:
        """The hole ``h_t`` produces: radius ``r_base + t rho``."""
        coeffs = {m: [a, b] for m, a, b in self.base.fourier_coeffs}
        for m, a, b in self._modes:
            c = coeffs.setdefault(m, [0.0, 0.0])
            c[0] += t * a
            c[1] += t * b
        return HoleShape(
            self.base.r0 + t * self._const,
            self.base.center,
            tuple((m, a, b) for m, (a, b) in sorted(coeffs.items())),
            self.base.lattice,
        )

    def _polar(self, x):
        d = np.asarray(x, dtype=float) - self.base.center_physical
        r = np.hypot(d[..., 0], d[..., 1])
        theta = np.arctan2(d[..., 1], d[..., 0])
        return r, theta

    def _radial(self, r, theta, t):
        """Pushed radius R, dR/dr, dR/dtheta at interior (moving) points."""
        rho = self.rho(theta)
        chi = self.chi(r)
        R = r + t * rho * chi
        R_r = 1.0 + t * rho * self.dchi(r)
        R_th = t * self.drho(theta) * chi
        return R, R_r, R_th

    def _moving(self, r, t):
        return (r < self.annulus[1]) & (r > 0) if t != 0 else np.zeros(r.shape, bool)

    def displace(self, x, t: float):
        """Image ``h_t(x)`` of physical point(s) ``x``.

        The hole centre is a fixed point by convention; the map is only a
        diffeomorphism away from it.
        """
        x = np.asarray(x, dtype=float)
        out = x.copy()
        r, theta = self._polar(x)
        mv = self._moving(r, t)
        if not mv.any():
            return out
        R, R_r, _ = self._radial(r[mv], theta[mv], t)
        det = R_r * R / r[mv]
        if np.any(det <= 0):
            raise DegenerateMap(f"h_t folds over at t={t}: min det Dh = {det.min():.3g}")
        c = self.base.center_physical
        out[mv] = c + np.stack([R * np.cos(theta[mv]), R * np.sin(theta[mv])], axis=-1)
        return out

    def jacobian(self, x, t: float) -> JacobianField:
        """Closed-form ``J = Dh_t(x)``, ``det J`` and ``A = |det J| J^-1 J^-T``.

        In the polar frame ``(e_r, e_theta)`` the Jacobian is upper triangular,
        ``[[R_r, R_theta / r], [0, R / r]]``, which gives ``det J = R_r R / r``.
        """
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        J = np.broadcast_to(np.eye(2), shape + (2, 2)).copy()
        det = np.ones(shape)
        A = J.copy()
        image = x.copy()
        r, theta = self._polar(x)
        mv = self._moving(r, t)
        if not mv.any():
            return JacobianField(J, det, A, image)

        rm, th = r[mv], theta[mv]
        R, R_r, R_th = self._radial(rm, th, t)
        dj = R_r * R / rm
        if np.any(dj <= 0):
            raise DegenerateMap(f"h_t folds over at t={t}: min det Dh = {dj.min():.3g}")
        er = np.stack([np.cos(th), np.sin(th)], axis=-1)
        et = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        outer = lambda a, b: a[..., :, None] * b[..., None, :]
        Jm = (
            R_r[:, None, None] * outer(er, er)
            + (R_th / rm)[:, None, None] * outer(er, et)
            + (R / rm)[:, None, None] * outer(et, et)
        )
        Jinv = np.empty_like(Jm)
        Jinv[:, 0, 0] = Jm[:, 1, 1]
        Jinv[:, 1, 1] = Jm[:, 0, 0]
        Jinv[:, 0, 1] = -Jm[:, 0, 1]
        Jinv[:, 1, 0] = -Jm[:, 1, 0]
        Jinv /= dj[:, None, None]
        Am = np.abs(dj)[:, None, None] * (Jinv @ np.swapaxes(Jinv, -1, -2))

        J[mv], det[mv], A[mv] = Jm, dj, Am
        image[mv] = self.base.center_physical + R[:, None] * er
        return JacobianField(J, det, A, image)

    def validate(self, t_max: float, samples: int = 200) -> FamilyReport:
        return validate_family(self, t_max, samples)

    def describe(self) -> dict:
        return {
            "base": self.base.describe(),
            "direction": [list(c) for c in self.direction],
            "annulus": list(self.annulus),
            "cutoff_smoothness": int(self.cutoff_smoothness),
        }


def displace(family: ShapeFamily, x, t: float):
    return family.displace(x, t)


def jacobian(family: ShapeFamily, x, t: float) -> JacobianField:
    return family.jacobian(x, t)


def validate_family(family: ShapeFamily, t_max: float, samples: int = 200) -> FamilyReport:
    """Sample ``det Dh_t`` over the perforated region and ``t in [-t_max, t_max]``.

    ``samples`` angular rays are used, with ``samples // 4`` radii per ray
    running from the base boundary to ``r_outer``, and 21 parameter values.
    Folding is reported, not raised.
    """
    if samples < 100:
        raise ValueError(f"validate_family needs samples >= 100, got {samples}")
    theta = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    s = np.linspace(0.0, 1.0, max(samples // 4, 8))
    rb = family.base.radius(theta)
    r = rb[:, None] + s[None, :] * (family.annulus[1] - rb[:, None])
    th = np.broadcast_to(theta[:, None], r.shape)
    ts = np.linspace(-t_max, t_max, 21)

    best = (np.inf, None, None)
    kappa = 1.0
    for t in ts:
        R, R_r, R_th = family._radial(r, th, t)
        det = R_r * R / r
        i = np.unravel_index(np.argmin(det), det.shape)
        if det[i] < best[0]:
            c = family.base.center_physical
            xy = c + r[i] * np.array([np.cos(th[i]), np.sin(th[i])])
            best = (float(det[i]), tuple(float(v) for v in xy), float(t))
        ok = det > 0
        if ok.any():
            # eigenvalues of A = |det| (J^T J)^-1 from the polar-frame Jacobian
            a, b, d = R_r[ok], (R_th / r)[ok], (R / r)[ok]
            tr = a * a + b * b + d * d
            disc = np.sqrt(np.maximum(tr * tr - 4 * (a * d) ** 2, 0.0))
            smax = (tr + disc) / 2
            smin = (a * d) ** 2 / smax
            lam_hi = np.abs(a * d) / smin
            lam_lo = np.abs(a * d) / smax
            kappa = max(kappa, float(lam_hi.max()), float((1 / lam_lo).max()))
    return FamilyReport(
        min_det=best[0],
        argmin_x=best[1],
        argmin_t=best[2],
        kappa=kappa,
        t_max=float(t_max),
        samples=int(samples),
        passed=bool(best[0] > 0),
    )
