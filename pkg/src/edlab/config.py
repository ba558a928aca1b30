"""Experiment configuration: a flat, sectioned key-value file with a fixed schema.

Every key has a type, a default and a range check.  Unknown sections or keys
are errors.  :func:`validate` collects every violation as a :class:`Finding`
instead of stopping at the first one.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass

import numpy as np

EXPERIMENTS = ("simulate", "sample", "path-check", "algebra-check", "uniqueness-scan", "maxent-check")


class ConfigError(ValueError):
    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("; ".join(str(f) for f in self.findings))


@dataclass(frozen=True)
class Finding:
    field: str
    message: str
    level: str = "error"

    def __str__(self):
        return f"{self.level}: {self.field}: {self.message}"


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | str | floats | ints
    default: object
    choices: tuple = ()
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False


def _k(kind, default, choices=(), lo=None, hi=None, lo_open=False):
    return Key(kind, default, tuple(choices), lo, hi, lo_open)


PROFILE_KINDS = ("uniform", "sinusoidal", "tabulated")

SCHEMA = {
    "background": {
        "kind": _k("str", "minkowski", ("minkowski", "rindler", "static-diagonal")),
        "acceleration": _k("float", 0.05),
        "profile": _k("floats", "1.0"),
    },
    "lattice": {
        "n_sites": _k("int", 1, lo=1, hi=3),
        "surface_sites": _k("int", 16, lo=3),
    },
    "grid": {
        "box_half_width": _k("float", 8.0, lo=0.0, lo_open=True),
        "points_per_axis": _k("int", 64, lo=16),
    },
    "state": {
        "family": _k("str", "gaussian", ("gaussian", "path-check")),
        "center": _k("floats", "0.0"),
        "width": _k("floats", "1.0"),
        "momentum": _k("floats", "0.0"),
        "covariance": _k("floats", ""),
    },
    "dynamics": {
        "mode": _k("str", "pde", ("pde", "wave", "hybrid")),
        "potential": _k("str", "zero", ("zero", "mass", "polynomial")),
        "mass": _k("float", 1.0),
        "coefficients": _k("floats", ""),
        "eta": _k("float", 1.0, lo=0.0, lo_open=True),
        "lambda": _k("float", 0.125),
        "dtau": _k("float", 1e-3, lo=0.0, lo_open=True),
        "T": _k("float", 0.0, lo=0.0),
    },
    "foliation": {
        "lapse": _k("str", "uniform", PROFILE_KINDS),
        "lapse_value": _k("float", 1.0),
        "lapse_amplitude": _k("float", 0.5),
        "lapse_wavenumber": _k("int", 1),
        "lapse_phase": _k("float", 0.0),
        "lapse_table": _k("floats", ""),
        "shift": _k("str", "uniform", PROFILE_KINDS),
        "shift_value": _k("float", 0.0),
        "shift_amplitude": _k("float", 0.0),
        "shift_wavenumber": _k("int", 1),
        "shift_phase": _k("float", 0.0),
        "shift_table": _k("floats", ""),
    },
    "candidate": {
        "f1_scale": _k("float", math.nan),
        "f2": _k("float", 0.0),
        "h0": _k("float", 0.0),
        "h1": _k("float", 0.0),
        "h2_scale": _k("float", math.nan),
    },
    "sampler": {
        "walkers": _k("int", 200000, lo=1),
        "scaling_walkers": _k("ints", ""),
        "l1_tolerance": _k("float", 0.02, lo=0.0, lo_open=True),
        "slope_tolerance": _k("float", 0.1, lo=0.0, lo_open=True),
        "replicates": _k("int", 3, lo=1),
    },
    "path": {
        "eps": _k("floats", "0.01, 0.005, 0.0025"),
        "amplitude": _k("float", 0.9, lo=0.0),
        "phase": _k("float", 0.7),
        "substeps": _k("int", 4, lo=1),
        "support": _k("float", 1e-6, lo=0.0, hi=1.0),
        "min_order": _k("float", 2.5),
        "max_order_broken": _k("float", 2.2),
    },
    "algebra": {
        "smear_f": _k("floats", ""),
        "smear_g": _k("floats", ""),
        "tolerance_perp_perp": _k("float", 1e-8, lo=0.0, lo_open=True),
        "tolerance_tan_tan": _k("float", 1e-5, lo=0.0, lo_open=True),
        "probe_factor": _k("float", 1.1),
        "probe_ratio": _k("float", 10.0, lo=0.0),
    },
    "scan": {
        "states": _k("int", 20, lo=1),
        "tolerance_close": _k("float", 1e-8, lo=0.0, lo_open=True),
        "tolerance_fail": _k("float", 1e-3, lo=0.0, lo_open=True),
    },
    "maxent": {
        "kappa": _k("float", 0.01, lo=0.0, lo_open=True),
        "drift_grads": _k("floats", "0.0, 2.0, -5.0"),
        "points": _k("int", 4001, lo=101),
        "tolerance": _k("float", 1e-6, lo=0.0, lo_open=True),
    },
    "run": {
        "experiment": _k("str", "", ("",) + EXPERIMENTS),
        "seed": _k("int", 0, lo=0, hi=2**64 - 1),
        "output": _k("str", "edlab-out"),
    },
}


def _parse_value(key: Key, raw: str):
    raw = raw.strip()
    if key.kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if key.kind == "int":
        return int(raw)
    if key.kind == "str":
        return raw
    parts = [p for p in raw.replace(",", " ").split() if p]
    if key.kind == "floats":
        vals = [float(p) for p in parts]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("must be finite")
        return vals
    if key.kind == "ints":
        return [int(p) for p in parts]
    raise AssertionError(key.kind)


def _check_range(name: str, key: Key, value, out: list):
    vals = value if isinstance(value, list) else [value]
    if key.choices and value not in key.choices:
        shown = ", ".join(c for c in key.choices if c)
        out.append(Finding(name, f"unknown value {value!r}; expected one of {shown}"))
        return
    for v in vals:
        if isinstance(v, str):
            continue
        if key.lo is not None and (v <= key.lo if key.lo_open else v < key.lo):
            out.append(Finding(name, f"value {v!r} below the allowed minimum {key.lo!r}"))
        if key.hi is not None and v > key.hi:
            out.append(Finding(name, f"value {v!r} above the allowed maximum {key.hi!r}"))


class ExperimentConfig:
    """Parsed configuration; ``cfg["grid"]["points_per_axis"]`` style access with defaults filled in."""

    def __init__(self, values: dict, present: dict):
        self.values = values
        self.present = present

    def __getitem__(self, section):
        return self.values[section]

    def has_section(self, section) -> bool:
        return bool(self.present.get(section))

    def as_dict(self) -> dict:
        """Every setting after defaults, in schema order (used to echo inputs)."""
        out = {}
        for section, keys in SCHEMA.items():
            if section == "candidate" and not self.has_section("candidate"):
                continue
            out[section] = {k: _jsonable(self.values[section][k]) for k in keys}
        return out


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def parse(text: str) -> tuple[ExperimentConfig, list]:
    """Parse config text; returns the config and the type/key findings."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str  # keys are case-sensitive (``T``)
    findings = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([Finding("<file>", f"cannot parse: {exc.message if hasattr(exc, 'message') else exc}")])
    values = {s: {k: None for k in keys} for s, keys in SCHEMA.items()}
    present = {s: {} for s in SCHEMA}
    for section in cp.sections():
        if section not in SCHEMA:
            findings.append(Finding(section, "unknown section"))
            continue
        for k, raw in cp.items(section):
            name = f"{section}.{k}"
            if k not in SCHEMA[section]:
                findings.append(Finding(name, "unknown key"))
                continue
            key = SCHEMA[section][k]
            try:
                present[section][k] = _parse_value(key, raw)
            except ValueError as exc:
                findings.append(Finding(name, f"cannot read {raw.strip()!r} as {key.kind}: {exc}"))
    for section, keys in SCHEMA.items():
        for k, key in keys.items():
            if k in present[section]:
                v = present[section][k]
            else:
                v = _parse_value(key, str(key.default)) if key.kind != "float" or not (
                    isinstance(key.default, float) and math.isnan(key.default)) else math.nan
            values[section][k] = v
    return ExperimentConfig(values, present), findings


def load(path) -> tuple[ExperimentConfig, list]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([Finding("<file>", f"cannot read {path}: {exc.strerror}")]) from None
    return parse(text)


def validate(cfg: ExperimentConfig, experiment: str | None = None) -> list:
    """Range and consistency findings; warnings carry ``level='warning'``."""
    out = []
    for section, keys in SCHEMA.items():
        for k, key in keys.items():
            if k in cfg.present[section]:
                _check_range(f"{section}.{k}", key, cfg.present[section][k], out)
    # the schema minimum already reports m < 16, phrase it the standard way
    out = [Finding(f.field, "points_per_axis below minimum 16") if f.field == "grid.points_per_axis"
           and "minimum" in f.message else f for f in out]
    if experiment is not None and experiment not in EXPERIMENTS:
        out.append(Finding("experiment", f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}"))
    named = cfg["run"]["experiment"]
    if experiment and named and named != experiment:
        out.append(Finding("run.experiment", f"config names {named!r} but the command runs {experiment!r}"))
    if any(f.level == "error" for f in out):
        return out

    n = cfg["lattice"]["n_sites"]
    ns = cfg["lattice"]["surface_sites"]
    d = cfg["dynamics"]
    if d["mode"] == "hybrid" and d["lambda"] != 0 and "lambda" in cfg.present["dynamics"]:
        out.append(Finding("dynamics.lambda", "must be 0 (or omitted) in hybrid mode"))
    if d["mode"] == "wave" and not d["lambda"] > 0:
        out.append(Finding("dynamics.lambda", "wave mode needs lambda > 0"))
    if d["potential"] == "polynomial" and len(d["coefficients"]) > 7:
        out.append(Finding("dynamics.coefficients", "polynomial degree must be at most 6"))
    for prefix in ("lapse", "shift"):
        f = cfg["foliation"]
        if f[prefix] == "tabulated" and len(f[f"{prefix}_table"]) != ns:
            out.append(Finding(f"foliation.{prefix}_table", f"needs {ns} values (one per surface site)"))
    st = cfg["state"]
    for k in ("center", "width", "momentum"):
        if len(st[k]) not in (1, n):
            out.append(Finding(f"state.{k}", f"needs 1 or {n} values"))
    if any(w <= 0 for w in st["width"]):
        out.append(Finding("state.width", "widths must be positive"))
    if st["covariance"]:
        if len(st["covariance"]) != n * n:
            out.append(Finding("state.covariance", f"needs {n * n} values (row-major {n}x{n})"))
        else:
            c = np.array(st["covariance"]).reshape(n, n)
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(0.5 * (c + c.T)) <= 0):
                out.append(Finding("state.covariance", "must be symmetric positive definite"))
    if st["family"] == "path-check" and n != 2:
        out.append(Finding("state.family", "path-check state needs lattice.n_sites = 2"))
    if cfg["background"]["kind"] == "static-diagonal" and not cfg["background"]["profile"]:
        out.append(Finding("background.profile", "static-diagonal needs profile coefficients"))
    if cfg.has_section("candidate"):
        c = cfg["candidate"]
        if "f1_scale" not in cfg.present["candidate"]:
            out.append(Finding("candidate.f1_scale", "required when a candidate section is given"))
    if experiment == "path-check":
        if n != 2:
            out.append(Finding("lattice.n_sites", "path-check needs n_sites = 2"))
        if len(cfg["path"]["eps"]) < 3:
            out.append(Finding("path.eps", "needs at least three values"))
        if any(e <= 0 for e in cfg["path"]["eps"]):
            out.append(Finding("path.eps", "values must be positive"))
        if d["mode"] == "wave":
            out.append(Finding("dynamics.mode", "path-check evolves (rho, Phi); use pde or hybrid"))
    if experiment == "sample":
        if d["mode"] == "wave":
            out.append(Finding("dynamics.mode", "the sampler follows the (rho, Phi) solution; use pde or hybrid"))
        if cfg["foliation"]["shift"] != "uniform" or cfg["foliation"]["shift_value"] != 0:
            out.append(Finding("foliation.shift", "the sampler supports zero shift only"))
        if any(m < 1 for m in cfg["sampler"]["scaling_walkers"]):
            out.append(Finding("sampler.scaling_walkers", "counts must be positive"))
        if 0 < len(cfg["sampler"]["scaling_walkers"]) < 3:
            out.append(Finding("sampler.scaling_walkers", "needs at least three counts for a slope"))
    if experiment == "algebra-check":
        if n < 2:
            out.append(Finding("lattice.n_sites", "algebra-check needs n_sites >= 2"))
        for k in ("smear_f", "smear_g"):
            if cfg["algebra"][k] and len(cfg["algebra"][k]) != n:
                out.append(Finding(f"algebra.{k}", f"needs {n} values (one per field site)"))
    if experiment in ("simulate", "sample") and d["T"] > 0:
        steps = d["T"] / d["dtau"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            out.append(Finding("dynamics.T", "must be an integer multiple of dtau"))
    if not any(f.level == "error" for f in out) and experiment in (None, "simulate", "sample", "path-check", "algebra-check"):
        out.extend(_boundary_findings(cfg))
    return out


def _boundary_findings(cfg) -> list:
    from .statespace import StateError

    try:
        state = initial_state(cfg)
    except (StateError, np.linalg.LinAlgError, ValueError) as exc:
        return [Finding("state", f"cannot build the initial state: {exc}")]
    rho = state.rho
    edge = 0.0
    for ax in range(rho.ndim):
        edge = max(edge, float(np.take(rho, 0, axis=ax).max()), float(np.take(rho, -1, axis=ax).max()))
    if edge > 1e-12:
        return [Finding("grid.box_half_width",
                        f"initial rho at the box edge is {edge:.3g} > 1e-12; widen the box or narrow the state",
                        level="warning")]
    return []


# ---------------------------------------------------------------------------
# builders shared by the experiments


def grid_of(cfg):
    from .statespace import ConfigGrid

    g = cfg["grid"]
    return ConfigGrid(cfg["lattice"]["n_sites"], g["box_half_width"], g["points_per_axis"])


def initial_state(cfg):
    from .covariance import path_check_state
    from .statespace import gaussian_state

    grid = grid_of(cfg)
    st = cfg["state"]
    if st["family"] == "path-check":
        return path_check_state(grid)
    n = grid.n_sites
    cov = np.array(st["covariance"]).reshape(n, n) if st["covariance"] else None
    width = np.broadcast_to(np.array(st["width"]), (n,))
    return gaussian_state(grid, center=np.array(st["center"]), width=width, momentum=np.array(st["momentum"]),
                          covariance=cov)


def background_of(cfg):
    from .geometry import SpacetimeBackground

    b = cfg["background"]
    if b["kind"] == "minkowski":
        return SpacetimeBackground.minkowski()
    if b["kind"] == "rindler":
        return SpacetimeBackground.rindler(b["acceleration"])
    poly = np.polynomial.Polynomial(b["profile"])
    return SpacetimeBackground.static_diagonal(poly, poly.deriv())


def potential_of(cfg):
    from .dynamics import PotentialSpec

    d = cfg["dynamics"]
    if d["potential"] == "mass":
        return PotentialSpec.of_mass(d["mass"])
    if d["potential"] == "polynomial":
        return PotentialSpec.polynomial(d["coefficients"])
    return PotentialSpec.zero()


def constants_of(cfg):
    from .statespace import Constants

    d = cfg["dynamics"]
    lam = 0.0 if d["mode"] == "hybrid" else d["lambda"]
    return Constants(eta=d["eta"], lam=lam)


def candidate_of(cfg):
    from .dynamics import CandidateCoefficients

    if not cfg.has_section("candidate"):
        return None
    c = cfg["candidate"]
    h2 = c["h2_scale"] if "h2_scale" in cfg.present["candidate"] else -0.5 * c["f1_scale"]
    return CandidateCoefficients(c["f1_scale"], c["f2"], c["h0"], c["h1"], h2, potential_of(cfg))


def profile(cfg, prefix: str) -> np.ndarray:
    """Lapse or shift over the surface labels ``0 .. surface_sites - 1``."""
    f = cfg["foliation"]
    ns = cfg["lattice"]["surface_sites"]
    x = np.arange(ns)
    kind = f[prefix]
    if kind == "uniform":
        return np.full(ns, f[f"{prefix}_value"], dtype=float)
    if kind == "sinusoidal":
        return f[f"{prefix}_value"] + f[f"{prefix}_amplitude"] * np.sin(
            2 * np.pi * f[f"{prefix}_wavenumber"] * x / ns + f[f"{prefix}_phase"])
    return np.array(f[f"{prefix}_table"], dtype=float)
