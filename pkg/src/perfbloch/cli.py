"""Command-line driver: JSON run configuration, commands and artifacts."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, export
from .discretize import PotentialSpec, apply_multiplier_A, apply_multiplier_B, assemble, \
    assemble_gauge, build_grid
from .errors import ParseError, PerfBlochError, ValidationError
from .geometry import HoleShape, Lattice2, ShapeFamily
from .spectral import BlochProblem, KPath, SolverOptions, band_structure, default_workers, \
    dispersion_surface, spectrum_report

COMMANDS = ("bands", "surface", "gaps", "sweep", "thomas", "probe", "validate")


@dataclass(frozen=True)
class RunConfig:
    lattice: Lattice2 = field(default_factory=Lattice2.square)
    hole: HoleShape | None = None
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    N: int = 48
    mode: str = "regrid"
    t: float = 0.0
    family: ShapeFamily | None = None
    kpath: KPath = field(default_factory=KPath.standard)
    kgrid: tuple | None = None
    n_bands: int = 5
    solver: SolverOptions = field(default_factory=SolverOptions)
    output: str = "out"
    thomas: dict = field(default_factory=lambda: {"C": None, "beta": "auto"})
    probe: dict = field(default_factory=lambda: {"k0": [0.0, 0.0], "band": 1, "t_max": 0.1,
                                                 "n_steps": 9})
    sweep: dict = field(default_factory=lambda: {"t_values": [0.0, 0.05, 0.1]})

    def problem(self) -> BlochProblem:
        return BlochProblem(self.lattice, self.hole, self.potential, self.N, self.mode,
                            self.family, self.t, self.solver)


# -- loading ------------------------------------------------------------------

_TOP_KEYS = {"lattice", "hole", "potential", "grid", "mode", "t", "family", "kpath", "kgrid",
             "n_bands", "solver", "output", "thomas", "probe", "sweep"}


def _require(cond, fld, constraint, value):
    if not cond:
        raise ValidationError(fld, constraint, value)


def _number(raw, fld, lo=None, hi=None, integer=False, strict_lo=False):
    ok = isinstance(raw, (int, float)) and not isinstance(raw, bool)
    if integer:
        ok = ok and float(raw).is_integer()
    _require(ok and np.isfinite(raw), fld, "must be a finite " + ("integer" if integer else
                                                                 "number"), raw)
    if lo is not None:
        if strict_lo:
            _require(raw > lo, fld, f"must be > {lo}", raw)
        else:
            _require(raw >= lo, fld, f"must be >= {lo}", raw)
    if hi is not None:
        _require(raw <= hi, fld, f"must be <= {hi}", raw)
    return int(raw) if integer else float(raw)


def _vector(raw, fld, n=2):
    _require(isinstance(raw, list) and len(raw) == n, fld, f"must be a list of {n} numbers", raw)
    return [_number(v, f"{fld}[{i}]") for i, v in enumerate(raw)]


def _keys(raw, fld, allowed):
    _require(isinstance(raw, dict), fld, "must be an object", raw)
    extra = sorted(set(raw) - set(allowed))
    _require(not extra, f"{fld}.{extra[0]}" if extra else fld, "unknown key", None)


def _coeffs(raw, fld, m_min):
    _require(isinstance(raw, list), fld, "must be a list of [m, a, b]", raw)
    out = []
    for i, c in enumerate(raw):
        _require(isinstance(c, list) and len(c) == 3, f"{fld}[{i}]", "must be [m, a, b]", c)
        m = _number(c[0], f"{fld}[{i}][0]", lo=m_min, integer=True)
        out.append((m, _number(c[1], f"{fld}[{i}][1]"), _number(c[2], f"{fld}[{i}][2]")))
    return out


def _parse_lattice(raw):
    _require(isinstance(raw, list) and len(raw) == 2, "lattice", "must be a 2x2 row-major basis",
             raw)
    rows = [_vector(r, f"lattice[{i}]") for i, r in enumerate(raw)]
    basis = np.array(rows)  # the matrix B itself; its columns are the basis vectors
    _require(abs(np.linalg.det(basis)) > 1e-12, "lattice", "basis must be nonsingular", raw)
    return Lattice2(basis)


def _parse_hole(raw, lattice):
    if raw is None:
        return None
    _keys(raw, "hole", {"r0", "center", "fourier_coeffs"})
    _require("r0" in raw, "hole.r0", "is required", None)
    r0 = _number(raw["r0"], "hole.r0", lo=0, strict_lo=True)
    center = _vector(raw.get("center", [0.5, 0.5]), "hole.center")
    for i, c in enumerate(center):
        _require(0 <= c < 1, f"hole.center[{i}]", "must lie in [0, 1)", c)
    coeffs = _coeffs(raw.get("fourier_coeffs", []), "hole.fourier_coeffs", 1)
    try:
        return HoleShape(r0, tuple(center), tuple(coeffs), lattice)
    except ValueError as exc:
        constraint = "hole exits unit cell" if "exits" in str(exc) else str(exc)
        raise ValidationError("hole", constraint, raw) from exc


def _parse_potential(raw):
    _keys(raw, "potential", {"c0", "terms"})
    c0 = _number(raw.get("c0", 0.0), "potential.c0")
    terms = []
    for i, term in enumerate(raw.get("terms", [])):
        fld = f"potential.terms[{i}]"
        _keys(term, fld, {"c", "m", "phase"})
        _require("c" in term and "m" in term, fld, "needs 'c' and 'm'", term)
        m = [_number(v, f"{fld}.m[{j}]", integer=True) for j, v in
             enumerate(term["m"] if isinstance(term["m"], list) else [None])]
        _require(len(m) == 2, f"{fld}.m", "must have 2 entries", term["m"])
        terms.append((_number(term["c"], f"{fld}.c"), tuple(m),
                      _number(term.get("phase", 0.0), f"{fld}.phase")))
    return PotentialSpec(tuple(terms), c0)


def _parse_family(raw, hole):
    if raw is None:
        return None
    _keys(raw, "family", {"kind", "direction", "annulus", "cutoff_smoothness"})
    _require(hole is not None, "family", "needs a hole", raw)
    kind = raw.get("kind", "radial")
    _require(kind in ("homothetic", "radial"), "family.kind", "must be homothetic or radial",
             kind)
    annulus = raw.get("annulus")
    if annulus is not None:
        annulus = tuple(_vector(annulus, "family.annulus"))
    s = _number(raw.get("cutoff_smoothness", 2), "family.cutoff_smoothness", lo=1, integer=True)
    try:
        if kind == "homothetic":
            return ShapeFamily.homothetic(hole, annulus, s)
        _require("direction" in raw, "family.direction", "is required for radial families",
                 None)
        return ShapeFamily(hole, tuple(_coeffs(raw["direction"], "family.direction", 0)),
                           annulus, s)
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("family", str(exc), raw) from exc


def _parse_kpath(raw, lattice):
    if raw is None:
        return KPath.standard(lattice)
    _keys(raw, "kpath", {"vertices", "points_per_segment"})
    pps = _number(raw.get("points_per_segment", 30), "kpath.points_per_segment", lo=2,
                  integer=True)
    if "vertices" not in raw:
        return KPath.standard(lattice, pps)
    verts = raw["vertices"]
    _require(isinstance(verts, list) and len(verts) >= 2, "kpath.vertices",
             "must list at least two [label, [k1, k2]]", verts)
    parsed = []
    for i, v in enumerate(verts):
        _require(isinstance(v, list) and len(v) == 2 and isinstance(v[0], str),
                 f"kpath.vertices[{i}]", "must be [label, [k1, k2]]", v)
        parsed.append((v[0], tuple(_vector(v[1], f"kpath.vertices[{i}][1]"))))
    for i in range(1, len(parsed)):
        _require(parsed[i][1] != parsed[i - 1][1], f"kpath.vertices[{i}]",
                 "must differ from the previous vertex", verts[i])
    return KPath(tuple(parsed), pps)


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a decoded JSON object and fill defaults."""
    _require(isinstance(raw, dict), "<root>", "must be a JSON object", type(raw).__name__)
    extra = sorted(set(raw) - _TOP_KEYS)
    _require(not extra, extra[0] if extra else "", "unknown key", None)

    lattice = _parse_lattice(raw["lattice"]) if "lattice" in raw else Lattice2.square()
    hole = _parse_hole(raw.get("hole"), lattice)
    potential = _parse_potential(raw.get("potential", {}))

    grid = raw.get("grid", {})
    _keys(grid, "grid", {"N"})
    N = _number(grid.get("N", 48), "grid.N", lo=8, integer=True)

    mode = raw.get("mode", "regrid" if hole is not None else "nohole")
    _require(mode in ("regrid", "pullback", "nohole"), "mode",
             "must be regrid, pullback or nohole", mode)
    if mode != "nohole":
        _require(hole is not None, "mode", f"{mode} mode needs a hole", mode)
    family = _parse_family(raw.get("family"), hole)
    if mode == "pullback":
        _require(family is not None, "family", "is required in pullback mode", None)
    t = _number(raw.get("t", 0.0), "t")
    if t != 0.0:
        _require(family is not None, "t", "nonzero t needs a family", t)

    kpath = _parse_kpath(raw.get("kpath"), lattice)
    kgrid = raw.get("kgrid")
    if kgrid is not None:
        _require(isinstance(kgrid, list) and len(kgrid) == 2, "kgrid", "must be [n1, n2]", kgrid)
        kgrid = tuple(_number(v, f"kgrid[{i}]", lo=1, integer=True) for i, v in enumerate(kgrid))

    n_bands = _number(raw.get("n_bands", 5), "n_bands", lo=1, integer=True)

    sraw = raw.get("solver", {})
    _keys(sraw, "solver", {"dense_threshold", "max_iters", "tol"})
    d = SolverOptions()
    solver = SolverOptions(
        dense_threshold=_number(sraw.get("dense_threshold", d.dense_threshold),
                                "solver.dense_threshold", lo=0, integer=True),
        max_iters=_number(sraw.get("max_iters", d.max_iters), "solver.max_iters", lo=1,
                          integer=True),
        tol=_number(sraw.get("tol", d.tol), "solver.tol", lo=0, hi=1e-9, strict_lo=True),
    )

    output = raw.get("output", "out")
    _require(isinstance(output, str) and output, "output", "must be a nonempty path", output)

    thomas = {"C": None, "beta": "auto"} | _section(raw, "thomas", {"C", "beta"})
    if thomas["C"] is not None:
        _number(thomas["C"], "thomas.C", lo=0, strict_lo=True)
    if thomas["beta"] != "auto":
        _number(thomas["beta"], "thomas.beta", lo=0, strict_lo=True)
        if thomas["C"] is not None:
            _require(thomas["beta"] > thomas["C"] / 6, "thomas.beta", "must exceed C/6",
                     thomas["beta"])

    probe = RunConfig().probe | _section(raw, "probe", {"k0", "band", "t_max", "n_steps"})
    probe["k0"] = _vector(probe["k0"], "probe.k0")
    probe["band"] = _number(probe["band"], "probe.band", lo=1, integer=True)
    probe["t_max"] = _number(probe["t_max"], "probe.t_max", lo=0, strict_lo=True)
    probe["n_steps"] = _number(probe["n_steps"], "probe.n_steps", lo=5, integer=True)

    sweep = RunConfig().sweep | _section(raw, "sweep", {"t_values"})
    _require(isinstance(sweep["t_values"], list) and sweep["t_values"], "sweep.t_values",
             "must be a nonempty list", sweep["t_values"])
    sweep["t_values"] = [_number(v, f"sweep.t_values[{i}]")
                         for i, v in enumerate(sweep["t_values"])]

    return RunConfig(lattice, hole, potential, N, mode, t, family, kpath, kgrid, n_bands, solver,
                     output, thomas, probe, sweep)


def _section(raw, name, allowed):
    sec = raw.get(name, {})
    _keys(sec, name, allowed)
    return dict(sec)


def load_config(path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises
    ------
    ParseError
        Malformed JSON; the message carries line and column.
    ValidationError
        A field is out of range or inconsistent; the message names it.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


# -- commands -----------------------------------------------------------------

def _title(cfg: RunConfig, what: str) -> str:
    hole = "no hole" if cfg.hole is None else f"hole r0={cfg.hole.r0:g}"
    return f"{what}: {hole}, N={cfg.N}, mode={cfg.mode}, t={cfg.t:g}"


def _need_kgrid(cfg, command):
    if cfg.kgrid is None:
        raise ValidationError("kgrid", f"is required by '{command}'", None)
    return cfg.kgrid


def cmd_bands(cfg: RunConfig, out: Path, workers: int) -> dict:
    bs = band_structure(cfg.problem(), cfg.kpath, cfg.n_bands, workers)
    export.write_bands_csv(bs, out / "bands.csv")
    export.write_band_svg(bs, out / "bands.svg", _title(cfg, "bands"))
    return {"max_residual": bs.max_residual, "n_k": len(bs.k_points)}


def cmd_surface(cfg: RunConfig, out: Path, workers: int) -> dict:
    bs = dispersion_surface(cfg.problem(), _need_kgrid(cfg, "surface"), cfg.n_bands, workers)
    export.write_bands_csv(bs, out / "surface.csv")
    export.write_band_svg(bs, out / "surface.svg", _title(cfg, "surface"))
    return {"max_residual": bs.max_residual, "n_k": len(bs.k_points)}


def cmd_gaps(cfg: RunConfig, out: Path, workers: int) -> dict:
    bs = dispersion_surface(cfg.problem(), _need_kgrid(cfg, "gaps"), cfg.n_bands, workers)
    export.write_bands_csv(bs, out / "gaps.csv")
    rep = spectrum_report(bs)
    export.write_json(rep.to_json(), out / "spectrum.json")
    if min(bs.grid_shape) < 9:
        print("gaps: k-grid smaller than 9x9, flat-band screening skipped", file=sys.stderr)
        return {"verdicts": None, "max_residual": bs.max_residual}
    verdicts = analysis.flat_band_test(bs)
    export.write_json({"bands": [v.__dict__ for v in verdicts]}, out / "flatband.json")
    return {"verdicts": [v.verdict for v in verdicts], "max_residual": bs.max_residual}


def cmd_sweep(cfg: RunConfig, out: Path, workers: int) -> dict:
    if cfg.family is None:
        raise ValidationError("family", "is required by 'sweep'", None)
    res = analysis.shape_sweep(cfg.problem(), cfg.family, cfg.kpath, cfg.sweep["t_values"],
                               cfg.n_bands, workers)
    export.write_sweep_csv(res, out / "sweep.csv")
    export.write_sweep_svg(res, out / "sweep.svg", _title(cfg, "shape sweep"))
    return {"t_values": sorted(res)}


def cmd_thomas(cfg: RunConfig, out: Path, workers: int) -> dict:
    C = cfg.thomas["C"]
    if C is None:
        C = cfg.potential.sup_bound
    if C <= 0:
        raise ValidationError("thomas.C", "must be > 0 (set it when V = 0)", C)
    grid = build_grid(cfg.lattice, cfg.hole, cfg.N, cfg.mode, cfg.t, cfg.family)
    cert = analysis.thomas_certificate(grid, C, cfg.thomas["beta"])
    export.write_json(cert.to_json(), out / "thomas.json")
    return {"pass": cert.passed}


def cmd_probe(cfg: RunConfig, out: Path, workers: int) -> dict:
    if cfg.family is None:
        raise ValidationError("family", "is required by 'probe'", None)
    p = cfg.probe
    probe = analysis.analyticity_probe(cfg.problem(), cfg.family, p["k0"], p["band"],
                                       p["t_max"], p["n_steps"])
    export.write_probe_csv(probe, out / "probe.csv")
    export.write_json(probe.summary(), out / "probe.json")
    return {"d1": probe.d1.tolist()}


def _check_free(cfg):
    k = np.array([np.pi / 2, 0.0])
    prob = BlochProblem(cfg.lattice, None, PotentialSpec(), cfg.N, solver=cfg.solver)
    got = prob.solve(k, 5).values
    d = cfg.lattice.dual_basis
    m = np.array([(a, b) for a in range(-3, 4) for b in range(-3, 4)])
    exact = np.sort(np.sum((k[None, :] + m @ d.T) ** 2, axis=1))[:5]
    err = float(np.max(np.abs(got - exact) / np.maximum(exact, 1.0)))
    return err <= 0.02, f"max rel err {err:.3g} (<= 0.02)"


def _validation_hole(cfg):
    return cfg.hole if cfg.hole is not None else HoleShape(0.25, lattice=cfg.lattice)


def _check_gauge(cfg):
    hole = _validation_hole(cfg)
    grid = build_grid(cfg.lattice, hole, cfg.N, "regrid")
    k = np.random.default_rng(1).uniform(-np.pi, np.pi, 2)
    opts = replace(cfg.solver, dense_threshold=10**9)
    from .spectral import eigs_lowest
    a = eigs_lowest(assemble(grid, cfg.potential, k), 5, opts).values
    b = eigs_lowest(assemble_gauge(grid, cfg.potential, k), 5, opts).values
    err = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))
    return err <= 1e-10, f"max rel diff {err:.3g} (<= 1e-10)"


def _check_pythagoras(cfg):
    grid = build_grid(cfg.lattice, _validation_hole(cfg), cfg.N, "regrid")
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        u = rng.standard_normal(grid.n_free) + 1j * rng.standard_normal(grid.n_free)
        a = apply_multiplier_A(grid, u, np.pi, 2.0)
        b = apply_multiplier_B(grid, u, np.pi, 2.0)
        na, nb, nab = (np.vdot(v, v).real for v in (a, b, a + b))
        worst = max(worst, abs(nab - na - nb) / (na + nb))
    return worst <= 1e-10, f"max rel defect {worst:.3g} (<= 1e-10)"


def _check_pullback(cfg):
    hole = _validation_hole(cfg)
    fam = cfg.family if cfg.family is not None else ShapeFamily.homothetic(hole)
    k = np.array([0.3, -0.7])
    rg = assemble(build_grid(cfg.lattice, hole, cfg.N, "regrid"), cfg.potential, k)
    pb = assemble(build_grid(cfg.lattice, hole, cfg.N, "pullback", 0.0, fam), cfg.potential, k,
                  fam, 0.0, "pullback")
    diff = max(abs(rg.stiffness - pb.stiffness).max(), abs(rg.mass - pb.mass).max())
    return diff <= 1e-13, f"max entry diff {diff:.3g} (<= 1e-13)"


VALIDATION_CHECKS = (
    ("free-operator oracle", _check_free),
    ("gauge equivalence", _check_gauge),
    ("Pythagoras identity", _check_pythagoras),
    ("pullback t=0", _check_pullback),
)


def cmd_validate(cfg: RunConfig, out: Path, workers: int) -> dict:
    rows = []
    for name, check in VALIDATION_CHECKS:
        ok, detail = check(cfg)
        rows.append({"check": name, "pass": bool(ok), "detail": detail})
    width = max(len(r["check"]) for r in rows)
    for r in rows:
        print(f"{r['check']:<{width}}  {'PASS' if r['pass'] else 'FAIL'}  {r['detail']}")
    export.write_json({"checks": rows}, out / "validate.json")
    return {"pass": all(r["pass"] for r in rows)}


_DISPATCH = {
    "bands": cmd_bands,
    "surface": cmd_surface,
    "gaps": cmd_gaps,
    "sweep": cmd_sweep,
    "thomas": cmd_thomas,
    "probe": cmd_probe,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perfbloch",
                                 description="Bloch band structure of perforated periodic media.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--threads", type=int, default=None,
                    help="parallel workers for k/t sweeps")
    ap.add_argument("--grid-n", type=int, default=None, help="override grid.N")
    ap.add_argument("--bands", type=int, default=None, help="override n_bands")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config) if args.config else config_from_dict({})
        if args.grid_n is not None:
            _number(args.grid_n, "--grid-n", lo=8, integer=True)
            cfg = replace(cfg, N=args.grid_n)
        if args.bands is not None:
            _number(args.bands, "--bands", lo=1, integer=True)
            cfg = replace(cfg, n_bands=args.bands)
        workers = default_workers() if args.threads is None else args.threads
        _number(workers, "--threads", lo=1, integer=True)
        out = Path(args.out or cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        summary = _DISPATCH[args.command](cfg, out, workers)
        export.write_sidecar(out / f"{args.command}.meta.json", args.command, started,
                             {"config": args.config, "N": cfg.N, "n_bands": cfg.n_bands,
                              "workers": workers, "summary": summary})
    except (PerfBlochError, ValueError, OSError) as exc:
        print(f"perfbloch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if args.command in ("validate", "thomas") and not summary["pass"]:
        return 1
    return 0


def main() -> None:
    sys.exit(run())
