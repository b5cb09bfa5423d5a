"""Experiment runners behind the command-line interface.

Every runner is a pure function of the configuration, input files and seeds.
Outputs are written with sorted keys and ``repr`` floats so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import data_io
from .config import ConfigError, ExperimentConfig
from .models import bind_parameters
from .objective import (
    ObservationSet,
    ResidualFunction,
    SENTINEL,
    balanced_weights,
    objective_value,
    unit_weights,
    write_breakdown_csv,
)
from .optimizer import LMAbort, lm_solve, relative_error_report, write_trace_csv
from .solver import SolverError, make_initial_data, simulate

log = logging.getLogger(__name__)

__all__ = [
    "identify",
    "initial_data",
    "perturb_study",
    "reference_values",
    "report",
    "run_identify",
    "run_perturb",
    "run_scan",
    "run_simulate",
    "scan_grid",
    "target_observations",
]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def initial_data(cfg: ExperimentConfig):
    ini = cfg.initial
    return make_initial_data(ini["kind"], ini["n_vertices"], ini["species_init"],
                             length=ini["length"], radius=ini["radius"])


def reference_values(cfg: ExperimentConfig) -> np.ndarray:
    """True values when known, otherwise the values set on the model."""
    if cfg.c_true is not None:
        return cfg.c_true
    return cfg.spec.values()


def target_observations(cfg: ExperimentConfig) -> ObservationSet:
    """Observations from file, or simulated at the true parameters."""
    if cfg.observations is not None:
        return data_io.load_observations(cfg.observations)
    c = reference_values(cfg)
    model = bind_parameters(cfg.spec, c, check_box=False)
    return data_io.generate_targets(cfg.solver, model, initial_data(cfg), cfg.times,
                                    c_true=c, names=cfg.spec.names)


def _weights(cfg, weights, fn: ResidualFunction, c_ref):
    n_s = fn.n_s
    if isinstance(weights, str):
        if weights == "ones":
            return unit_weights(n_s)
        chi = fn.with_weights(unit_weights(n_s))(c_ref)
        if np.any(chi >= SENTINEL):
            raise LMAbort("forward solve failed at the reference point used to balance weights")
        return balanced_weights(chi)
    if isinstance(weights, tuple):
        return unit_weights(n_s, weights[1])
    w = np.asarray(weights, dtype=float)
    if w.shape != (2 * n_s,):
        raise ValueError(f"explicit weights need {2 * n_s} entries")
    return w


def identify(cfg: ExperimentConfig, obs: ObservationSet, map_fn=map, c0=None):
    """Run LM on ``obs``; returns ``(result, residual_fn)``."""
    fn = ResidualFunction(obs, cfg.spec, cfg.solver, cfg.form, None, cfg.epsilon)
    c0 = cfg.c0 if c0 is None else np.asarray(c0, dtype=float)
    ref = cfg.c_true if cfg.c_true is not None else c0
    fn = fn.with_weights(_weights(cfg, cfg.weights, fn, ref))
    scale = cfg.c_true if cfg.lm.scaling_reference == "provided_values" else None
    result = lm_solve(fn, c0, cfg.spec.lower, cfg.spec.upper, cfg.lm, scale=scale,
                      c_true=cfg.c_true, map_fn=map_fn)
    return result, fn


def trajectory_summary(traj) -> dict:
    from .geometry import enclosed_area

    snaps = []
    for s in traj.snapshots:
        snaps.append({
            "t": s.t,
            "area": enclosed_area(s.points),
            "species_min": [float(v) for v in s.fields.min(axis=1)],
            "species_max": [float(v) for v in s.fields.max(axis=1)],
        })
    return {"n_snapshots": len(snaps), "final_area": snaps[-1]["area"], "snapshots": snaps}


def run_simulate(cfg: ExperimentConfig) -> dict:
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    c = reference_values(cfg)
    model = bind_parameters(cfg.spec, c, check_box=False)
    traj = simulate(initial_data(cfg), cfg.solver, model, cfg.times)
    obs = ObservationSet.from_trajectory(traj, {"c_true": dict(zip(cfg.spec.names, map(float, c)))})
    data_io.save_observations(obs, out / "trajectory.json")
    summary = trajectory_summary(traj)
    write_json(out / "summary.json", summary)
    return summary


def run_identify(cfg: ExperimentConfig, map_fn=map):
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    obs = target_observations(cfg)
    if cfg.noise is not None:
        obs = data_io.add_noise(obs, cfg.noise)
    result, fn = identify(cfg, obs, map_fn)
    names = cfg.spec.names
    payload = result.to_dict(names)
    _, pos, conc = objective_value(result.chi)
    payload.update({
        "names": names,
        "form": cfg.form,
        "epsilon": cfg.epsilon if cfg.form == "phase_field" else None,
        "weights": [float(w) for w in fn.weights],
        "objective_position": pos,
        "objective_concentration": conc,
        "initial": dict(zip(names, map(float, cfg.c0))),
        "true": dict(zip(names, map(float, cfg.c_true))) if cfg.c_true is not None else None,
        "initial_relative_errors": (relative_error_report(cfg.c0, cfg.c_true)
                                    if cfg.c_true is not None else None),
        "accepted_objective": [float(v) for v in result.accepted_values()],
    })
    write_json(out / "result.json", payload)
    write_trace_csv(out / "trace.csv", result, names)
    write_breakdown_csv(out / "breakdown.csv", result.chi, obs.times[1:])
    return result, payload


def _perturb_job(job):
    cfg, clean, dist, k_n, seed = job
    noisy = data_io.add_noise(clean, data_io.NoiseSpec(dist, k_n, seed))
    try:
        result, _ = identify(cfg, noisy)
    except (LMAbort, SolverError) as exc:
        return {"ok": False, "error": str(exc)}
    return {"ok": True, "c": [float(x) for x in result.c], "termination": result.termination,
            "iterations": result.n_iterations, "nfev": result.nfev,
            "errors": [e["error"] for e in result.relative_errors]}


def perturb_study(cfg: ExperimentConfig, map_fn=map):
    """Replicated noisy identification.

    Replication ``r`` uses seed ``cfg.seed + r`` for every noise level and
    distribution, so levels are compared on common random numbers.
    """
    if cfg.c_true is None:
        raise ValueError("the perturbation study needs true parameter values")
    clean = target_observations(cfg)
    jobs = [(cfg, clean, dist, k_n, cfg.seed + r)
            for dist in cfg.perturb["distributions"]
            for k_n in cfg.perturb["k_n"]
            for r in range(cfg.perturb["replications"])]
    runs = []
    for (_, _, dist, k_n, seed), res in zip(jobs, map_fn(_perturb_job, jobs)):
        runs.append({"distribution": dist, "k_n": k_n, "seed": seed, **res})
    summary = []
    for dist in cfg.perturb["distributions"]:
        for k_n in cfg.perturb["k_n"]:
            group = [r for r in runs if r["distribution"] == dist and r["k_n"] == k_n]
            ok = [r for r in group if r["ok"]]
            errs = np.array([r["errors"] for r in ok]) if ok else np.empty((0, cfg.spec.n_free))
            summary.append({
                "distribution": dist, "k_n": k_n, "runs": len(group), "failed": len(group) - len(ok),
                "mean": errs.mean(axis=0).tolist() if ok else [float("nan")] * cfg.spec.n_free,
                "std": errs.std(axis=0).tolist() if ok else [float("nan")] * cfg.spec.n_free,
            })
    return runs, summary


def run_perturb(cfg: ExperimentConfig, map_fn=map):
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    runs, summary = perturb_study(cfg, map_fn)
    names = cfg.spec.names
    with open(out / "perturb_runs.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["distribution", "k_n", "seed", "ok", "termination", "iterations", "nfev",
                     *names, *(f"relerr_{n}" for n in names), "error"])
        for r in runs:
            if r["ok"]:
                wr.writerow([r["distribution"], repr(r["k_n"]), r["seed"], 1, r["termination"],
                             r["iterations"], r["nfev"], *map(repr, r["c"]), *map(repr, r["errors"]), ""])
            else:
                wr.writerow([r["distribution"], repr(r["k_n"]), r["seed"], 0, "", "", "",
                             *[""] * (2 * len(names)), r["error"]])
    with open(out / "perturb_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["distribution", "k_n", "runs", "failed",
                     *(f"mean_{n}" for n in names), *(f"std_{n}" for n in names)])
        for s in summary:
            wr.writerow([s["distribution"], repr(s["k_n"]), s["runs"], s["failed"],
                         *map(repr, s["mean"]), *map(repr, s["std"])])
    return runs, summary


def _scan_job(job):
    fn, c = job
    chi = fn(c)
    if np.any(chi >= SENTINEL):
        return None
    return chi


def scan_grid(cfg: ExperimentConfig, obs: ObservationSet = None, map_fn=map, form=None, epsilon=None):
    """Objective over a 2-parameter grid around the reference values.

    Returns ``(axis1, axis2, chi)`` where ``chi[i, j]`` is the unit-weight
    residual at ``(axis1[i], axis2[j])`` or ``None`` for failed cells.
    """
    obs = target_observations(cfg) if obs is None else obs
    form = cfg.form if form is None else form
    epsilon = cfg.epsilon if epsilon is None else epsilon
    p1, p2 = cfg.scan["parameters"]
    names = cfg.spec.names
    i1, i2 = names.index(p1), names.index(p2)
    ref = reference_values(cfg)
    n, span = cfg.scan["n"], cfg.scan["span"]
    rel = np.linspace(-span, span, n) if n > 1 else np.zeros(1)
    ax1 = ref[i1] * (1.0 + rel)
    ax2 = ref[i2] * (1.0 + rel)
    fn = ResidualFunction(obs, cfg.spec, cfg.solver, form, None, epsilon)
    jobs = []
    for a in ax1:
        for b in ax2:
            c = ref.copy()
            c[i1], c[i2] = a, b
            jobs.append((fn, c))
    flat = list(map_fn(_scan_job, jobs))
    chi = [flat[k * n:(k + 1) * n] for k in range(n)]
    return ax1, ax2, chi


def scan_values(chi_grid, alpha: float) -> np.ndarray:
    """``J`` on the grid for weights ``w_pos = 1``, ``w_conc = alpha``; NaN for failed cells."""
    n1, n2 = len(chi_grid), len(chi_grid[0])
    out = np.full((n1, n2), np.nan)
    for i in range(n1):
        for j in range(n2):
            chi = chi_grid[i][j]
            if chi is not None:
                _, pos, conc = objective_value(chi)
                out[i, j] = pos + alpha * conc
    return out


def run_scan(cfg: ExperimentConfig, map_fn=map):
    if len(cfg.scan["parameters"]) != 2:
        raise ConfigError("[scan] needs a model with at least two free parameters")
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    obs = target_observations(cfg)
    p1, p2 = cfg.scan["parameters"]
    rows = []
    for form in cfg.scan["forms"]:
        eps_list = cfg.scan["epsilon"] if form == "phase_field" else [None]
        for eps in eps_list:
            ax1, ax2, chi = scan_grid(cfg, obs, map_fn, form, eps if eps is not None else cfg.epsilon)
            for i, a in enumerate(ax1):
                for j, b in enumerate(ax2):
                    c = chi[i][j]
                    for alpha in cfg.scan["alpha"]:
                        if c is None:
                            rows.append([form, eps, alpha, a, b, None, None, None])
                            continue
                        _, pos, conc = objective_value(c)
                        rows.append([form, eps, alpha, a, b, pos + alpha * conc, pos, alpha * conc])
    with open(out / "scan.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["form", "epsilon", "alpha", p1, p2, "J", "J_position", "J_concentration"])
        for r in rows:
            wr.writerow(["" if v is None else (repr(float(v)) if not isinstance(v, str) else v) for v in r])
    return rows


def _fmt(v) -> str:
    return f"{v:.3e}"


def report(run_dir) -> str:
    """Human-readable summary of whatever artifacts a run directory holds."""
    run_dir = Path(run_dir)
    lines = [f"cellfit report: {run_dir}", ""]
    found = False
    missing = []
    res_path = run_dir / "result.json"
    if res_path.exists():
        found = True
        res = json.loads(res_path.read_text())
        lines.append(f"Identification ({res.get('form')} objective): {res['termination']} after "
                     f"{res['iterations']} iterations, {res['function_evaluations']} function evaluations")
        lines.append(f"Objective J = {res['objective']:.6e}")
        header = f"{'Parameter':<12}{'True value':>14}{'Starting value':>24}{'Computed value':>24}"
        lines += ["", header, "-" * len(header)]
        true = res.get("true") or {}
        init_err = res.get("initial_relative_errors") or []
        rel = res.get("relative_errors") or []
        for k, name in enumerate(res.get("names") or sorted(res["parameters"])):
            t = _fmt(true[name]) if name in true else "-"
            s = _fmt(res["initial"][name])
            if k < len(init_err):
                s += f" ({init_err[k]['error']:.2f})"
            c = _fmt(res["parameters"][name])
            if k < len(rel):
                c += f" ({rel[k]['error']:.2f})"
            lines.append(f"{name:<12}{t:>14}{s:>24}{c:>24}")
        lines.append("")
    for name in ("trace.csv", "breakdown.csv"):
        if res_path.exists() and not (run_dir / name).exists():
            missing.append(name)
    summ = run_dir / "perturb_summary.csv"
    if summ.exists():
        found = True
        with open(summ) as fh:
            rows = list(csv.reader(fh))
        lines.append("Noisy identification: mean (std) relative error %")
        head = rows[0]
        n_par = (len(head) - 4) // 2
        names = [h[len("mean_"):] for h in head[4:4 + n_par]]
        lines.append(f"{'distribution':<14}{'k_n':>6}{'runs':>6}{'failed':>8}" + "".join(f"{n:>22}" for n in names))
        for r in rows[1:]:
            cells = "".join(f"{float(r[4 + k]):>12.4f} ({float(r[4 + n_par + k]):.3f})".rjust(22)
                            for k in range(n_par))
            lines.append(f"{r[0]:<14}{float(r[1]):>6.2f}{r[2]:>6}{r[3]:>8}{cells}")
        lines.append("")
    scan = run_dir / "scan.csv"
    if scan.exists():
        found = True
        with open(scan) as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        groups = {}
        for r in body:
            groups.setdefault((r[0], r[1], r[2]), []).append(r)
        lines.append("Objective scans (minimum cell per form/epsilon/alpha)")
        for (form, eps, alpha), rs in groups.items():
            good = [r for r in rs if r[5] != ""]
            if not good:
                lines.append(f"  {form} eps={eps or '-'} alpha={alpha}: all cells failed")
                continue
            best = min(good, key=lambda r: float(r[5]))
            lines.append(f"  {form} eps={eps or '-'} alpha={alpha}: min J={float(best[5]):.4e} at "
                         f"{head[3]}={float(best[3]):.6g}, {head[4]}={float(best[4]):.6g} "
                         f"({len(rs) - len(good)} failed cells)")
        lines.append("")
    sim = run_dir / "summary.json"
    if sim.exists():
        found = True
        s = json.loads(sim.read_text())
        lines.append(f"Simulation: {s['n_snapshots']} snapshots, final area {s['final_area']:.6f}")
        lines.append("")
    if not found:
        lines.append("Empty report: no run artifacts found in this directory.")
    elif missing:
        lines.append("Missing artifacts: " + ", ".join(missing))
    text = "\n".join(lines).rstrip() + "\n"
    if run_dir.is_dir():
        (run_dir / "report.txt").write_text(text)
    return text
