"""Command-line experiment runner.

``edlab <experiment> --config <path> [--seed N] [--out DIR]``

Each run writes ``summary.json`` plus the experiment's CSV files into the
output directory.  Exit status is 0 when every assertion passes, 1 when one
fails, 2 for an invalid configuration and 3 for a numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .config import EXPERIMENTS, ConfigError, Finding

log = logging.getLogger("edlab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

TAGS = {
    "simulate": ["local-time-fokker-planck", "local-time-hamilton-jacobi", "quantum-potential"],
    "sample": ["transition-probability", "entropic-step-moments", "local-time-fokker-planck"],
    "path-check": ["consistency-condition", "compensating-deformation", "local-time-hamilton-jacobi"],
    "algebra-check": ["e-poisson-bracket", "hamiltonian-generators", "surface-deformation-algebra"],
    "uniqueness-scan": ["ensemble-constraint-equation", "candidate-potential", "quantum-potential"],
    "maxent-check": ["entropy-transition-probability", "transition-probability"],
}


@dataclass
class Outcome:
    """What an experiment hands back to the runner."""

    assertions: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    def check(self, name: str, value: float, tolerance: float, passed: bool, relation: str) -> None:
        self.assertions.append({
            "name": name,
            "value": _clean(value),
            "tolerance": _clean(tolerance),
            "relation": relation,
            "passed": bool(passed),
        })

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions)


class NumericalFailure(RuntimeError):
    pass


def _clean(v):
    """JSON-safe value: NaN/inf become None, numpy scalars become Python ones."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def versions() -> dict:
    import scipy
    import sympy

    from . import __version__
    from .kernels import BACKEND

    return {
        "edlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sympy": sympy.__version__,
        "kernel_backend": BACKEND,
    }


# ---------------------------------------------------------------------------
# shared builders


def _field_sites(cfg):
    from .covariance import default_field_sites

    ns = cfg["lattice"]["surface_sites"]
    return default_field_sites(ns, cfg["lattice"]["n_sites"])


def _surface_geometry(cfg):
    from .dynamics import SiteGeometry
    from .geometry import Hypersurface, induced_metric

    surface = Hypersurface.flat(cfg["lattice"]["surface_sites"])
    bg = cfgmod.background_of(cfg)
    sites = _field_sites(cfg)
    return surface, bg, sites, SiteGeometry.from_induced(induced_metric(bg, surface), sites)


def _n_steps(cfg) -> int:
    d = cfg["dynamics"]
    return int(round(d["T"] / d["dtau"]))


def _schedule(cfg, sites):
    from .geometry import FoliationSchedule

    lapse = cfgmod.profile(cfg, "lapse")[sites]
    shift = cfgmod.profile(cfg, "shift")[sites]
    return FoliationSchedule.uniform(lapse, shift, cfg["dynamics"]["dtau"], _n_steps(cfg)), lapse, shift


# ---------------------------------------------------------------------------
# experiments


def run_simulate(cfg, seed, out) -> Outcome:
    from .dynamics import evolve
    from .statespace import from_wave, to_wave

    res = Outcome(tags=list(TAGS["simulate"]))
    mode = cfg["dynamics"]["mode"]
    constants = cfgmod.constants_of(cfg)
    potential = cfgmod.potential_of(cfg)
    candidate = cfgmod.candidate_of(cfg)
    _, bg, sites, geom = _surface_geometry(cfg)
    schedule, lapse, shift = _schedule(cfg, sites)
    state = cfgmod.initial_state(cfg)

    traj = evolve(state, schedule, "pde", geom, potential, constants, candidate)
    traj.to_csv(os.path.join(out, "trajectory.csv"))
    traj.final.to_csv(os.path.join(out, "final_state.csv"))
    res.files += ["trajectory.csv", "final_state.csv"]
    rows = traj.rows
    norm_steps = [abs(rows[k][2] - rows[k - 1][2]) for k in range(1, len(rows))]
    res.metrics.update({
        "steps": len(rows) - 1,
        "initial": dict(zip(traj.COLUMNS, rows[0])),
        "final": dict(zip(traj.COLUMNS, rows[-1])),
    })
    res.check("norm-step-drift", max(norm_steps, default=0.0), 1e-10, max(norm_steps, default=0.0) <= 1e-10, "<=")
    # round-off in the far tails may dip below zero by far less than the density floor
    min_rho = min(r[4] for r in rows)
    res.check("min-rho-above-floor", min_rho, -1e-12, min_rho >= -1e-12, ">=")
    # every built-in background is static, so energy is conserved under a uniform lapse
    if candidate is None and np.all(lapse == lapse[0]) and not np.any(shift):
        drift = abs(rows[-1][3] - rows[0][3])
        res.check("energy-drift", drift, 1e-6, drift <= 1e-6, "<=")
    if mode == "wave":
        wtraj = evolve(to_wave(state, constants), schedule, "wave", geom, potential, constants)
        wtraj.to_csv(os.path.join(out, "wave_trajectory.csv"))
        res.files.append("wave_trajectory.csv")
        wsteps = [abs(wtraj.rows[k][2] - wtraj.rows[k - 1][2]) for k in range(1, len(wtraj.rows))]
        res.check("wave-norm-step-drift", max(wsteps, default=0.0), 1e-12, max(wsteps, default=0.0) <= 1e-12, "<=")
        gap = float(np.max(np.abs(traj.final.rho - np.abs(wtraj.final.psi) ** 2)))
        res.check("madelung-agreement", gap, 1e-4, gap <= 1e-4, "<=")
        res.tags.append("madelung-map")
        res.metrics["wave_final"] = dict(zip(wtraj.COLUMNS, wtraj.rows[-1]))
        from_wave(wtraj.final, constants)  # fails loudly if the wave collapsed
    return res


def run_sample(cfg, seed, out) -> Outcome:
    from .sampler import sampler_vs_pde

    res = Outcome(tags=list(TAGS["sample"]))
    s = cfg["sampler"]
    constants = cfgmod.constants_of(cfg)
    potential = cfgmod.potential_of(cfg)
    _, _, sites, geom = _surface_geometry(cfg)
    schedule, _, _ = _schedule(cfg, sites)
    state = cfgmod.initial_state(cfg)

    rep = sampler_vs_pde(state, schedule, s["walkers"], constants, geom, potential, seed=seed)
    rep.to_csv(os.path.join(out, "discrepancy.csv"))
    res.files.append("discrepancy.csv")
    final = float(rep.l1[-1])
    res.metrics.update({"walkers": s["walkers"], "steps": len(schedule), "final_l1": final})
    res.check("final-l1", final, s["l1_tolerance"], final <= s["l1_tolerance"], "<=")

    counts = s["scaling_walkers"]
    if counts:
        rows, means = [], []
        for M in counts:
            vals = []
            for r in range(s["replicates"]):
                l1 = float(sampler_vs_pde(state, schedule, M, constants, geom, potential, seed=seed + r).l1[-1])
                vals.append(l1)
                rows.append((M, r, seed + r, l1))
            means.append(float(np.mean(vals)))
        write_csv(os.path.join(out, "scaling.csv"), ("walkers", "replicate", "seed", "l1"), rows)
        res.files.append("scaling.csv")
        slope = float(np.polyfit(np.log(np.asarray(counts, float)), np.log(means), 1)[0])
        res.metrics.update({"scaling_walkers": list(counts), "scaling_mean_l1": means, "scaling_slope": slope})
        err = abs(slope + 0.5)
        res.check("l1-slope-vs-walkers", slope, s["slope_tolerance"], err <= s["slope_tolerance"], "|x+0.5|<=")
    return res


def _is_canonical(candidate) -> bool:
    return candidate is None or candidate.remainder().is_zero


def run_path_check(cfg, seed, out) -> Outcome:
    from .covariance import sinusoidal_lapses, two_path_test

    res = Outcome(tags=list(TAGS["path-check"]))
    p = cfg["path"]
    constants = cfgmod.constants_of(cfg)
    potential = cfgmod.potential_of(cfg)
    candidate = cfgmod.candidate_of(cfg)
    surface, bg, sites, _ = _surface_geometry(cfg)
    xi, eta = sinusoidal_lapses(surface.n_sites, p["amplitude"], p["phase"])
    state = cfgmod.initial_state(cfg)
    rep = two_path_test(state, surface, bg, xi, eta, p["eps"], potential, constants, candidate,
                        field_sites=sites, substeps=p["substeps"], support=p["support"])
    write_csv(os.path.join(out, "path_check.csv"), ("eps", "disc_rho", "disc_phi"), rep.rows())
    res.files.append("path_check.csv")
    res.metrics.update(rep.as_dict())
    res.metrics["canonical"] = _is_canonical(candidate)
    order = rep.fitted_order
    if _is_canonical(candidate):
        res.check("fitted-order-canonical", order, p["min_order"], order >= p["min_order"], ">=")
    else:
        res.check("fitted-order-perturbed", order, p["max_order_broken"], order <= p["max_order_broken"], "<=")
    return res


def run_algebra_check(cfg, seed, out) -> Outcome:
    from .covariance import smeared_algebra_check

    res = Outcome(tags=list(TAGS["algebra-check"]))
    a = cfg["algebra"]
    n = cfg["lattice"]["n_sites"]
    constants = cfgmod.constants_of(cfg)
    potential = cfgmod.potential_of(cfg)
    surface, bg, sites, _ = _surface_geometry(cfg)
    state = cfgmod.initial_state(cfg)
    rng = np.random.Generator(np.random.PCG64(seed))
    f = np.array(a["smear_f"]) if a["smear_f"] else 1.0 + 0.3 * rng.standard_normal(n)
    g = np.array(a["smear_g"]) if a["smear_g"] else 0.5 + 0.3 * rng.standard_normal(n)
    r = smeared_algebra_check(state, surface, bg, f, g, potential, constants, field_sites=sites)
    rows = [("perp_perp", r.values["lhs_perp_perp"], r.values["rhs_perp_perp"], r.perp_perp),
            ("tan_perp", r.values["lhs_tan_perp"], r.values["rhs_tan_perp"], r.tan_perp),
            ("tan_tan", r.values["lhs_tan_tan"], r.values["rhs_tan_tan"], r.tan_tan)]
    res.metrics.update({"smear_f": f, "smear_g": g, **r.as_dict()})
    res.check("perp-perp", r.perp_perp, a["tolerance_perp_perp"], r.perp_perp <= a["tolerance_perp_perp"], "<=")
    res.check("tan-perp", r.tan_perp, a["tolerance_tan_tan"], r.tan_perp <= a["tolerance_tan_tan"], "<=")
    res.check("tan-tan", r.tan_tan, a["tolerance_tan_tan"], r.tan_tan <= a["tolerance_tan_tan"], "<=")
    if constants.lam > 0 and a["probe_factor"] != 1.0:
        probe = smeared_algebra_check(state, surface, bg, f, g, potential, constants, field_sites=sites,
                                      lam_hj=a["probe_factor"] * constants.lam)
        rows.append(("perp_perp_probe", probe.values["lhs_perp_perp"], probe.values["rhs_perp_perp"],
                     probe.perp_perp))
        need = a["probe_ratio"] * a["tolerance_perp_perp"]
        res.metrics["perp_perp_probe"] = probe.perp_perp
        res.check("probe-sensitivity", probe.perp_perp, need, probe.perp_perp >= need, ">=")
    write_csv(os.path.join(out, "algebra.csv"), ("relation", "lhs", "rhs", "residual"), rows)
    res.files.append("algebra.csv")
    return res


def run_uniqueness_scan(cfg, seed, out) -> Outcome:
    from .covariance import test_battery, uniqueness_scan

    res = Outcome(tags=list(TAGS["uniqueness-scan"]))
    s = cfg["scan"]
    battery = test_battery(s["states"], seed)
    reports = uniqueness_scan(battery=battery, tolerance=s["tolerance_close"])
    cols = ("f1_scale", "f2", "h0", "h1", "h2_scale", "residual", "verdict", "canonical", "ode_f1", "ode_h2")
    rows = []
    for rep in reports:
        c = rep.candidate
        rows.append((c.f1_scale, c.f2, c.h0, c.h1, c.h2_scale, rep.residual, rep.verdict, rep.canonical,
                     *rep.ode_residuals))
    write_csv(os.path.join(out, "scan.csv"), cols, rows)
    res.files.append("scan.csv")
    canon = [r for r in reports if r.canonical]
    other = [r for r in reports if not r.canonical]
    worst_canon = max((r.residual for r in canon), default=0.0)
    best_other = min((r.residual for r in other), default=math.inf)
    closing = [r.candidate.as_dict() for r in reports if r.verdict == "closes"]
    res.metrics.update({
        "candidates": len(reports),
        "closing": closing,
        "max_canonical_residual": worst_canon,
        "min_noncanonical_residual": best_other,
    })
    res.check("canonical-closes", worst_canon, s["tolerance_close"], worst_canon <= s["tolerance_close"], "<=")
    res.check("perturbed-fails", best_other, s["tolerance_fail"], best_other >= s["tolerance_fail"], ">=")
    return res


def run_maxent_check(cfg, seed, out) -> Outcome:
    from .sampler import maxent_kernel_check

    res = Outcome(tags=list(TAGS["maxent-check"]))
    m = cfg["maxent"]
    kappa, tol = m["kappa"], m["tolerance"]
    rows, worst = [], 0.0
    maximizer = True
    for g in m["drift_grads"]:
        u = kappa if g == 0 else (-1.0 + math.sqrt(1.0 + 4.0 * g * g * kappa)) / (2.0 * g * g)
        r = maxent_kernel_check(kappa, g, n_points=m["points"], seed=seed)
        err = max(abs(r.mean - g * u), abs(r.variance - u))
        worst = max(worst, err)
        maximizer = maximizer and r.is_maximizer
        rows.append((g, r.alpha, r.alpha_prime, r.mean, g * u, r.variance, u, r.entropy, r.iterations,
                     min(r.perturbation_gaps, default=math.nan)))
    cols = ("drift_grad", "alpha", "alpha_prime", "mean", "mean_closed_form", "variance", "variance_closed_form",
            "entropy", "iterations", "min_perturbation_gap")
    write_csv(os.path.join(out, "maxent.csv"), cols, rows)
    res.files.append("maxent.csv")
    res.metrics.update({"kappa": kappa, "max_moment_error": worst})
    res.check("moments-match-closed-form", worst, tol, worst <= tol, "<=")
    res.check("perturbations-lower-entropy", float(maximizer), 1.0, maximizer, "==")
    return res


RUNNERS = {
    "simulate": run_simulate,
    "sample": run_sample,
    "path-check": run_path_check,
    "algebra-check": run_algebra_check,
    "uniqueness-scan": run_uniqueness_scan,
    "maxent-check": run_maxent_check,
}


# ---------------------------------------------------------------------------
# entry point


def _write_summary(out, experiment, status, seed, cfg, outcome=None, findings=(), diagnostics=None):
    from .kernels import BACKEND, thread_count

    summary = {
        "experiment": experiment,
        "status": status,
        "seed": seed,
        "equation_tags": outcome.tags if outcome else TAGS[experiment],
        "tolerances": {a["name"]: a["tolerance"] for a in outcome.assertions} if outcome else {},
        "assertions": outcome.assertions if outcome else [],
        "passed": bool(outcome and outcome.passed),
        "metrics": _clean(outcome.metrics) if outcome else {},
        "files": outcome.files if outcome else [],
        "warnings": [str(f) for f in findings if f.level == "warning"],
        "inputs": cfg.as_dict(),
        "versions": versions(),
        "backend": BACKEND,
        "threads": thread_count(),
    }
    if diagnostics is not None:
        summary["diagnostics"] = diagnostics
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(_clean(summary), fh, indent=2, allow_nan=False)
        fh.write("\n")


def _require_finite(metrics) -> None:
    bad = [k for k, v in metrics.items() if isinstance(v, float) and math.isnan(v)]
    if bad:
        raise NumericalFailure(f"non-finite metrics: {', '.join(bad)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edlab", description="Run an entropic-dynamics lattice experiment.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="path to the experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", default=None, help="override run.output")
    p.add_argument("--validate-only", action="store_true", help="print findings and exit")
    return p


def _config_error(findings) -> int:
    for f in findings:
        print(f"edlab: {f}", file=sys.stderr)
    return EXIT_CONFIG


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="edlab: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)

    from .kernels import thread_count

    try:
        thread_count()
    except ValueError as exc:
        return _config_error([Finding("EDLAB_THREADS", str(exc))])
    try:
        cfg, findings = cfgmod.load(args.config)
    except ConfigError as exc:
        return _config_error(exc.findings)
    if args.seed is not None:
        if args.seed < 0:
            findings.append(Finding("--seed", "must be non-negative"))
        cfg.values["run"]["seed"] = args.seed
        cfg.present["run"]["seed"] = args.seed
    if args.out is not None:
        cfg.values["run"]["output"] = args.out
        cfg.present["run"]["output"] = args.out
    findings = findings + cfgmod.validate(cfg, args.experiment)
    errors = [f for f in findings if f.level == "error"]
    if errors:
        return _config_error(errors)
    for f in findings:
        print(f"edlab: {f}", file=sys.stderr)
    if args.validate_only:
        return EXIT_OK

    seed = cfg["run"]["seed"]
    out = cfg["run"]["output"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        return _config_error([Finding("run.output", f"cannot create {out}: {exc.strerror}")])

    from .dynamics import NumericalError, StepError
    from .sampler import OptimizationError, ParameterError
    from .statespace import StateError

    try:
        outcome = RUNNERS[args.experiment](cfg, seed, out)
        _require_finite(outcome.metrics)
    except (ParameterError, StateError) as exc:
        return _config_error([Finding(args.experiment, str(exc))])
    except (StepError, NumericalError, NumericalFailure, OptimizationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, OptimizationError):
            diag["residual"] = exc.residual
        _write_summary(out, args.experiment, "numerical-failure", seed, cfg, findings=findings, diagnostics=diag)
        print(f"edlab: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    status = "passed" if outcome.passed else "failed"
    _write_summary(out, args.experiment, status, seed, cfg, outcome, findings)
    for a in outcome.assertions:
        mark = "PASS" if a["passed"] else "FAIL"
        print(f"{mark} {a['name']}: {a['value']!r} {a['relation']} {a['tolerance']!r}")
    return EXIT_OK if outcome.passed else EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
