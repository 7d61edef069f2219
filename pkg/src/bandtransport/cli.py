"""Command-line front end: ``bandtransport <command> --config run.yaml --out DIR``.

Every command validates the whole config before computing, writes into a
temporary directory next to ``--out`` and renames it into place only on
success.  Failures print a JSON error record on stderr and exit with

    2 config error, 3 solver failure, 4 CFL violation, 5 under-resolution,
    1 a verification (identities) exceeded its tolerance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import click
import jsonschema
import numpy as np
import yaml

from . import __version__
from .bloch import (
    CrossingDescriptor,
    band_grid,
    bands_at_points,
    cutoff_for_count,
    find_crossings,
    fit_crossing,
    grid_points,
    solve_bands,
)
from .coupling import EtaParams, apply_L_with_loss, build_Q, verify_eta, verify_orthogonality_identities
from .errors import BandTransportError, CflViolation, ConfigError
from .lattice import (
    chain_lattice,
    cosine_preset,
    crossing_preset,
    free_preset,
    honeycomb_preset,
    make_lattice,
    potential_from_items,
    square_lattice,
    triangular_lattice,
)
from .oracle import ComparisonSetup, compare_sweep, strictly_decreasing
from .transport import (
    RandomMedium,
    Regime,
    build_collision_kernel,
    classify_regime,
    make_field,
    ring_points,
    step_deterministic,
    step_graphene_ring,
    step_graphene_valley,
    step_random,
    step_reduced_away,
)

WORKERS_ENV = "BANDTRANSPORT_WORKERS"
VERIFICATION_FAILED = 1
EVOLVE_MODES = ("deterministic", "random", "reduced", "valley", "ring")


# config ----------------------------------------------------------------------

_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_POS_LIST = {"type": "array", "items": _POSITIVE, "minItems": 1}
_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lattice": {
            "oneOf": [
                {"enum": ["chain", "square", "triangular"]},
                {"type": "object", "required": ["basis"], "additionalProperties": False,
                 "properties": {"basis": {"type": "array", "items": {"type": "array", "items": _NUMBER}}}},
            ]
        },
        "potential": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["free", "cosine", "crossing", "honeycomb"]},
                "strength": _NUMBER,
                "spacing": _POSITIVE,
                "coefficients": {
                    "type": "array",
                    "items": {"type": "object", "required": ["mu"], "additionalProperties": False,
                              "properties": {"mu": {"type": "array", "items": {"type": "integer"}},
                                             "re": _NUMBER, "im": _NUMBER}},
                },
            },
        },
        "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "grids": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "object", "additionalProperties": False,
                      "properties": {"nodes": _INT_LIST, "lengths": _POS_LIST}},
                "p": {"type": "object", "additionalProperties": False, "properties": {"nodes": _INT_LIST}},
                "ring": {"type": "object", "additionalProperties": False,
                         "properties": {"radius_factor": {"type": "number", "minimum": 0},
                                        "n_r": {"type": "integer", "minimum": 1},
                                        "n_theta": {"type": "integer", "minimum": 1}}},
                "time": {"type": "object", "additionalProperties": False,
                         "properties": {"dt": _POSITIVE, "t_end": _POSITIVE,
                                        "snapshots": {"type": "integer", "minimum": 1}}},
            },
        },
        "medium": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"strength": {"type": "number", "minimum": 0}, "correlation_length": _POSITIVE,
                           "intervalley": {"type": "boolean"}},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scheme": {"enum": ["muscl-ssprk2"]},
                "cutoff": _POSITIVE,
                "dual_count": {"type": "integer", "minimum": 1},
                "n_bands": {"type": "integer", "minimum": 2},
                "eta_shell": _POSITIVE,
                "tolerance": _POSITIVE,
                "gap_tol": _POSITIVE,
                "crossing_radius": _POSITIVE,
                "crossings": {"type": "array", "items": {"type": "array", "items": _NUMBER}},
                "crossing_order": {"type": "integer", "minimum": 1},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"center": {"type": "array", "items": _NUMBER}, "width": _POSITIVE,
                           "sigma": {"type": "array", "items": {"type": "array", "items": _NUMBER}}},
        },
        "identities": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"points": {"type": "integer", "minimum": 1},
                           "dual_count": {"type": "integer", "minimum": 1},
                           "eta_theta": _POS_LIST,
                           "eta_tolerance": _POSITIVE,
                           "eta_mode": {"type": "array", "items": _NUMBER}},
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"eps_values": {"type": "array", "minItems": 1,
                                          "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                           "seeds": {"type": "integer", "minimum": 1},
                           "p0": _NUMBER, "envelope_width": _POSITIVE, "t_end": _POSITIVE,
                           "transport_dt": _POSITIVE, "transport_nodes": {"type": "integer", "minimum": 4},
                           "nodes_per_cell": {"type": "integer", "minimum": 1}},
        },
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


@dataclass
class RunConfig:
    lattice: Any = None
    potential: dict = field(default_factory=lambda: {"preset": "free"})
    eps: float = 0.05
    grids: dict = field(default_factory=dict)
    medium: dict = field(default_factory=lambda: {"strength": 0.0, "correlation_length": 1.0})
    solver: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    identities: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    output: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_schema(raw)
    cfg = RunConfig(**raw)
    validate(cfg)
    return cfg


def _check_schema(raw: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = ".".join(str(p) for p in first.path) or "<root>"
        raise ConfigError(f"config schema violation at {where}: {first.message}")


def validate(cfg: RunConfig) -> None:
    """Schema plus the cross-field checks a schema cannot express."""
    _check_schema({k: v for k, v in cfg.to_dict().items() if v is not None})
    sigma = cfg.initial.get("sigma")
    if sigma is not None:
        matrix = np.asarray(sigma, dtype=float)
        if matrix.shape != (2, 2) or not np.allclose(matrix, matrix.T, atol=1e-12):
            raise ConfigError("initial.sigma must be a real symmetric 2x2 matrix")
    build_system(cfg)  # lattice/potential errors surface before any compute


def build_system(cfg: RunConfig):
    """Return (lattice, potential, extras) where extras holds K, K' for honeycomb."""
    pot_spec = cfg.potential
    preset = pot_spec.get("preset")
    strength = pot_spec.get("strength")
    extras: dict = {}
    if preset == "honeycomb":
        spacing = float(pot_spec.get("spacing", 2 * np.pi))
        lat, pot, k_point, k_prime = honeycomb_preset(float(strength if strength is not None else 0.1), spacing)
        extras.update(K=k_point, K_prime=k_prime)
        return lat, pot, extras
    if preset == "cosine":
        lat, pot = cosine_preset(float(strength if strength is not None else 1.0))
        return lat, pot, extras
    if preset == "crossing":
        lat, pot = crossing_preset(float(strength if strength is not None else 0.1))
        return lat, pot, extras
    lat = _build_lattice(cfg.lattice)
    if preset == "free":
        return lat, free_preset(lat), extras
    if preset is None and "coefficients" in pot_spec:
        items = []
        for entry in pot_spec["coefficients"]:
            try:
                items.append((entry["mu"], complex(entry.get("re", 0.0), entry.get("im", 0.0))))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad potential coefficient {entry!r}") from exc
        return lat, potential_from_items(lat, items), extras
    raise ConfigError(f"unknown potential preset {preset!r}")


def _build_lattice(spec):
    if spec is None or spec == "chain":
        return chain_lattice()
    if spec == "square":
        return square_lattice(2 * np.pi)
    if spec == "triangular":
        return triangular_lattice()
    if isinstance(spec, dict) and "basis" in spec:
        return make_lattice(spec["basis"])
    raise ConfigError(f"unknown lattice spec {spec!r}")


def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
    return 1


def solver_cutoff(cfg: RunConfig, lat) -> float | None:
    if cfg.solver.get("cutoff") is not None:
        return float(cfg.solver["cutoff"])
    if cfg.solver.get("dual_count") is not None:
        return cutoff_for_count(lat, int(cfg.solver["dual_count"]))
    return None


# output ----------------------------------------------------------------------


class AtomicOutput:
    """Collects files in a temp dir and renames it onto ``target`` on success."""

    def __init__(self, target: Path):
        self.target = Path(target)

    def __enter__(self) -> Path:
        parent = self.target.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            old = self.tmp.with_name(self.tmp.name + ".old")
            self.target.rename(old)
            self.tmp.rename(self.target)
            shutil.rmtree(old, ignore_errors=True)
        else:
            self.tmp.rename(self.target)
        return False


def write_manifest(path: Path, cfg: RunConfig, command: str, started: float, diagnostics: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "wall_clock_seconds": time.time() - started,
        "diagnostics": diagnostics,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(_jsonable(manifest), handle, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, Regime):
        return obj.value
    return obj


# commands --------------------------------------------------------------------


def _p_grid_shape(cfg: RunConfig, lat) -> tuple[int, ...]:
    nodes = cfg.grids.get("p", {}).get("nodes", [32] * lat.dimension)
    nodes = [int(n) for n in np.atleast_1d(nodes)]
    if len(nodes) != lat.dimension or min(nodes) < 2:
        raise ConfigError("grids.p.nodes needs one count >= 2 per dimension")
    return tuple(nodes)


def cmd_bands(cfg: RunConfig, out: Path, workers: int) -> dict:
    lat, pot, extras = build_system(cfg)
    n_bands = int(cfg.solver.get("n_bands", 2))
    cutoff = solver_cutoff(cfg, lat)
    bs = band_grid(lat, pot, _p_grid_shape(cfg, lat), cutoff, n_bands=n_bands, workers=workers)
    bs.write_csv(out / "bands.csv")
    diagnostics = {"bands": bs.metadata()}
    if "K" in extras:
        states = solve_bands(extras["K"], pot, cutoff, 2)
        diagnostics["gap_at_K"] = states[1].energy - states[0].energy
    return diagnostics


def cmd_crossings(cfg: RunConfig, out: Path, workers: int) -> dict:
    lat, pot, _ = build_system(cfg)
    cutoff = solver_cutoff(cfg, lat)
    bs = band_grid(lat, pot, _p_grid_shape(cfg, lat), cutoff, n_bands=2, workers=workers)
    gap_tol = float(cfg.solver.get("gap_tol", 0.05))
    radius = float(cfg.solver.get("crossing_radius", 0.02))
    rows = []
    for point in find_crossings(bs, (1, 2), gap_tol):
        desc = fit_crossing(bs, point, radius)
        rows.append(desc)
    with open(out / "crossings.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        d = lat.dimension
        writer.writerow([f"p{i + 1}" for i in range(d)] + ["order", "slope", "residual", "alternative_residual"])
        for desc in rows:
            writer.writerow([f"{v:.17g}" for v in desc.point] + [desc.order] +
                            [f"{v:.17g}" for v in (desc.slope, desc.residual, desc.alternative_residual)])
    return {"crossings": len(rows)}


def cmd_identities(cfg: RunConfig, out: Path, workers: int) -> tuple[dict, bool]:
    lat, pot, _ = build_system(cfg)
    spec = cfg.identities
    tolerance = float(cfg.solver.get("tolerance", 1e-8))
    count = int(spec.get("points", 10))
    cutoff = solver_cutoff(cfg, lat)
    if cutoff is None:
        cutoff = cutoff_for_count(lat, int(spec.get("dual_count", 200)))
    rng = np.random.default_rng(int(cfg.seed))
    points = rng.random((count, lat.dimension)) @ lat.dual
    worst: dict[str, float] = {}
    for p in points:
        states = solve_bands(p, pot, cutoff, 2)
        report = verify_orthogonality_identities(states, pot, tolerance)
        for key, value in report.errors.items():
            worst[key] = max(worst.get(key, 0.0), value)
        eig = 0.0
        for m in states:
            for n in states:
                q = build_Q(m, n)
                res = apply_L_with_loss(q, pot).field
                eig = max(eig, float(np.linalg.norm(res.values - 1j * (m.energy - n.energy) * q.values)
                                     / np.linalg.norm(q.values)))
        worst["eigenoperator"] = max(worst.get("eigenoperator", 0.0), eig)
    eta_rel = 0.0
    eta_tol = float(spec.get("eta_tolerance", 1e-6))
    thetas = spec.get("eta_theta", [0.05, 0.1, 0.2])
    mode = np.asarray(spec.get("eta_mode", (0.37 * lat.dual[0] + (0.21 * lat.dual[1] if lat.dimension == 2 else 0))))
    sigma_p = np.array([[1.0, 0.3 + 0.1j], [0.3 - 0.1j, 0.5]])
    sigma_q = np.array([[0.7, -0.2j], [0.2j, 0.4]])
    for theta in thetas:
        for pair in ((1, 1), (1, 2), (2, 1), (2, 2)):
            params = EtaParams(float(theta), mode, 1.0, pair, points[0])
            eta_rel = max(eta_rel, verify_eta(params, pot, sigma_p, sigma_q, cutoff).relative_error)
    worst["eta_relative"] = eta_rel
    limits = {key: (eta_tol if key == "eta_relative" else tolerance) for key in worst}
    failed = {k: v for k, v in worst.items() if v > limits[k]}
    report = {"errors": worst, "tolerances": limits, "failed": sorted(failed), "passed": not failed}
    with open(out / "identities.json", "w", encoding="utf-8") as handle:
        json.dump(_jsonable(report), handle, indent=2, sort_keys=True)
    return report, not failed


def _x_grid(cfg: RunConfig, dimension: int):
    x = cfg.grids.get("x", {})
    nodes = [int(n) for n in x.get("nodes", [64] * dimension)]
    lengths = [float(v) for v in x.get("lengths", [2 * np.pi] * dimension)]
    if len(nodes) != dimension or len(lengths) != dimension:
        raise ConfigError("grids.x needs nodes and lengths per dimension")
    return tuple(nodes), tuple(lengths)


def _initial_sigma(cfg: RunConfig, lengths):
    init = cfg.initial
    center = np.asarray(init.get("center", [L / 2 for L in lengths]), dtype=float)
    width = float(init.get("width", 0.5))
    matrix = np.asarray(init.get("sigma", [[1.0, 0.0], [0.0, 0.5]]), dtype=complex)

    def sigma0(x, i):
        envelope = np.exp(-np.sum((x - center) ** 2, axis=-1) / (2 * width**2))
        return envelope[..., None, None] * matrix

    return sigma0


def _evolve_setup(cfg: RunConfig, mode: str, workers: int):
    lat, pot, extras = build_system(cfg)
    cutoff = solver_cutoff(cfg, lat)
    eps = float(cfg.eps)
    medium = RandomMedium(float(cfg.medium.get("strength", 0.0)), float(cfg.medium.get("correlation_length", 1.0)))
    x_nodes, lengths = _x_grid(cfg, lat.dimension)
    if mode in ("valley", "ring"):
        if "K" not in extras:
            raise ConfigError(f"mode {mode} needs the honeycomb potential")
        if cutoff is None:
            cutoff = cutoff_for_count(lat, 200)
        if mode == "valley":
            points = np.stack([extras["K"], extras["K_prime"]])
            weights = np.ones(2)
        else:
            ring = cfg.grids.get("ring", {})
            radius = float(ring.get("radius_factor", 1.0)) * eps
            points, _, weights = ring_points(extras["K"], extras["K_prime"], radius,
                                             int(ring.get("n_r", 4)), int(ring.get("n_theta", 8)))
    else:
        shape = _p_grid_shape(cfg, lat)
        points = grid_points(lat, shape)
        weights = np.full(len(points), lat.bz_volume / len(points))
    bands = bands_at_points(pot, points, cutoff=cutoff, workers=workers)
    fld = make_field(_initial_sigma(cfg, lengths), x_nodes, lengths, points, weights, eps)
    return lat, pot, extras, medium, bands, fld


def cmd_evolve(cfg: RunConfig, out: Path, workers: int, mode: str) -> dict:
    if mode not in EVOLVE_MODES:
        raise ConfigError(f"mode must be one of {EVOLVE_MODES}")
    lat, pot, extras, medium, bands, fld = _evolve_setup(cfg, mode, workers)
    time_grid = cfg.grids.get("time", {})
    dt = float(time_grid.get("dt", 0.01))
    t_end = float(time_grid.get("t_end", 1.0))
    n_snap = int(time_grid.get("snapshots", 4))
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigError("grids.time.t_end must be a multiple of dt")
    eta = cfg.solver.get("eta_shell")
    crossings = []
    if mode == "deterministic":
        step = lambda f, h: step_deterministic(f, bands, h)  # noqa: E731
    elif mode == "random":
        kernel = build_collision_kernel(bands, medium, fld.p_weights, eta)
        step = lambda f, h: step_random(f, kernel, bands, h)  # noqa: E731
    elif mode == "reduced":
        kernel = build_collision_kernel(bands, medium, fld.p_weights, eta)
        crossings = _configured_crossings(cfg, lat, pot)
        step = lambda f, h: step_reduced_away(f, kernel, bands, h, crossings)  # noqa: E731
    elif mode == "valley":
        crossings = _dirac_crossings(extras)
        intervalley = bool(cfg.medium.get("intervalley", True))
        step = lambda f, h: step_graphene_valley(f, bands, medium, h, intervalley=intervalley)  # noqa: E731
    else:
        crossings = _dirac_crossings(extras)
        step = lambda f, h: step_graphene_ring(f, bands, medium, h)  # noqa: E731

    mass0 = fld.total_density()
    herm = fld.hermiticity_defect()
    offdiag = 0.0
    marks = set(np.linspace(0, n_steps, n_snap + 1).round().astype(int).tolist())
    snaps = []
    current = fld
    for i in range(n_steps + 1):
        if i in marks:
            name = f"snapshot_{len(snaps):03d}.csv"
            current.write_csv(out / name)
            snaps.append({"file": name, "t": current.t})
        if i == n_steps:
            break
        current = step(current, dt)
        herm = max(herm, current.hermiticity_defect())
        offdiag = max(offdiag, float(np.max(np.abs(current.sigma[..., 0, 1]))))
    diagnostics = {
        "mode": mode,
        "snapshots": snaps,
        "hermiticity_defect_max": herm,
        "mass_drift": abs(current.total_density() - mass0),
        "offdiagonal_max": offdiag,
        "regimes": _regime_histogram(fld, bands, crossings),
        "medium": medium.to_dict(),
    }
    if mode == "valley":
        diagnostics["intervalley_weight"] = medium.intervalley_weight(extras["K"], extras["K_prime"], lat)
        diagnostics["cross_valley_influence"] = _cross_valley_influence(fld, step, dt, n_steps)
    return diagnostics


def _dirac_crossings(extras: dict) -> list:
    nan = float("nan")
    return [CrossingDescriptor(np.asarray(extras[k]), 1, nan, nan, nan) for k in ("K", "K_prime")]


def _configured_crossings(cfg: RunConfig, lat, pot):
    points = cfg.solver.get("crossings")
    if not points:
        return []
    order = int(cfg.solver.get("crossing_order", 1))
    return [CrossingDescriptor(np.atleast_1d(np.asarray(p, dtype=float)), order, float("nan"), float("nan"),
                               float("nan")) for p in points]


def _regime_histogram(fld, bands, crossings) -> dict:
    counts = {r.value: 0 for r in Regime}
    for p in fld.p_points:
        tags = [classify_regime(p, fld.eps, c, lattice=bands.lattice).regime for c in crossings]
        worst = Regime.FAR
        if Regime.NEAR in tags:
            worst = Regime.NEAR
        elif Regime.TRANSITION in tags:
            worst = Regime.TRANSITION
        counts[worst.value] += 1
    return counts


def _cross_valley_influence(fld, step, dt, n_steps) -> float:
    """Max change of the K block when the K' data is switched off."""
    from dataclasses import replace

    altered = fld.sigma.copy()
    altered[1] = 0.0
    a, b = fld, replace(fld, sigma=altered)
    for _ in range(n_steps):
        a, b = step(a, dt), step(b, dt)
    return float(np.max(np.abs(a.sigma[0] - b.sigma[0])))


def cmd_oracle_compare(cfg: RunConfig, out: Path, workers: int, mode: str) -> dict:
    lat, pot, _ = build_system(cfg)
    if lat.dimension != 1:
        raise ConfigError("oracle comparison is one-dimensional")
    spec = cfg.oracle
    eps_values = [float(e) for e in spec.get("eps_values", [1 / 16, 1 / 32, 1 / 64])]
    setup = ComparisonSetup(
        p0=float(spec.get("p0", 0.25)),
        envelope_width=float(spec.get("envelope_width", 0.4)),
        t_end=float(spec.get("t_end", 0.5)),
        transport_dt=float(spec.get("transport_dt", 0.005)),
        transport_nodes=int(spec.get("transport_nodes", 256)),
        nodes_per_cell=int(spec.get("nodes_per_cell", 32)),
    )
    medium = None
    seeds: list[int] = []
    if mode == "random":
        medium = RandomMedium(float(cfg.medium.get("strength", 0.0)), float(cfg.medium.get("correlation_length", 1.0)))
        seeds = list(range(int(cfg.seed), int(cfg.seed) + int(spec.get("seeds", 32))))
    elif mode != "deterministic":
        raise ConfigError("oracle-compare mode must be deterministic or random")
    rows = compare_sweep(pot, eps_values, mode, medium, seeds, setup)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["eps", "l1", "seeds", "l1_spread"])
        for r in rows:
            writer.writerow([f"{r.eps:.17g}", f"{r.l1:.17g}", r.seeds, f"{r.l1_spread:.17g}"])
    return {"mode": mode, "rows": [r.__dict__ for r in rows], "monotone": strictly_decreasing(rows), "seeds": seeds}


# click wiring ----------------------------------------------------------------


def _fail(exc: BandTransportError) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    if isinstance(exc, CflViolation):
        record["suggested_dt"] = exc.suggested_dt
    click.echo(json.dumps(record), err=True)
    sys.exit(exc.exit_code)


def _run(command: str, config: str, out: str | None, seed: int | None, body) -> None:
    started = time.time()
    try:
        cfg = load_config(config)
        if seed is not None:
            cfg.seed = int(seed)
        out = out or cfg.output
        if not out:
            raise ConfigError("no output directory: pass --out or set output in the config")
        cfg.output = str(out)
        with AtomicOutput(Path(out)) as tmp:
            diagnostics, ok = body(cfg, tmp)
            write_manifest(tmp, cfg, command, started, diagnostics)
    except BandTransportError as exc:
        _fail(exc)
    except np.linalg.LinAlgError as exc:
        _fail(BandTransportError(f"linear algebra failure: {exc}"))
    if not ok:
        record = {"error": "VerificationFailed", "exit_code": VERIFICATION_FAILED,
                  "failed": {k: diagnostics["errors"][k] for k in diagnostics.get("failed", [])}}
        click.echo(json.dumps(_jsonable(record)), err=True)
        sys.exit(VERIFICATION_FAILED)


_common = [
    click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="YAML run config."),
    click.option("--out", "out", default=None, type=click.Path(file_okay=False),
                 help="Output directory (default: output in the config)."),
    click.option("--workers", type=int, default=None, help=f"Worker threads (default: ${WORKERS_ENV} or 1)."),
    click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the config seed."),
]


def common(func):
    for option in reversed(_common):
        func = option(func)
    return func


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Band-crossing transport toolkit."""


@main.command()
@common
def bands(config, out, workers, seed):
    """Band energies on a Brillouin-zone grid."""
    _run("bands", config, out, seed, lambda cfg, tmp: (cmd_bands(cfg, tmp, resolve_workers(workers)), True))


@main.command()
@common
def crossings(config, out, workers, seed):
    """Locate and fit band crossings."""
    _run("crossings", config, out, seed, lambda cfg, tmp: (cmd_crossings(cfg, tmp, resolve_workers(workers)), True))


@main.command()
@common
def identities(config, out, workers, seed):
    """Verify the orthogonality, eigenoperator and eta identities."""
    _run("identities", config, out, seed, lambda cfg, tmp: cmd_identities(cfg, tmp, resolve_workers(workers)))


@main.command()
@common
@click.option("--mode", type=click.Choice(EVOLVE_MODES), default="deterministic", show_default=True)
def evolve(config, out, workers, seed, mode):
    """Evolve the coherence field and write snapshots."""
    _run("evolve", config, out, seed, lambda cfg, tmp: (cmd_evolve(cfg, tmp, resolve_workers(workers), mode), True))


@main.command("oracle-compare")
@common
@click.option("--mode", type=click.Choice(("deterministic", "random")), default="deterministic", show_default=True)
def oracle_compare(config, out, workers, seed, mode):
    """Compare transport against the direct solver over an eps sweep."""
    _run("oracle-compare", config, out, seed,
         lambda cfg, tmp: (cmd_oracle_compare(cfg, tmp, resolve_workers(workers), mode), True))


if __name__ == "__main__":
    main()
