"""Experiment configuration: TOML parsing, validation and built-in presets."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data_io import NoiseSpec
from .models import FreeParameter, ModelSpec, Proportional, Schnakenberg, YeastThreshold
from .optimizer import LMOptions
from .solver import SolverConfig

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


_MOTILITY = {
    "forward": {
        "dt": 1e-2, "n_vertices": 128, "sigma": 5e-3, "k_b": 1e-2, "lam": 1.0,
        "diffusion": [1.0, 100.0], "initial_shape": "unit_circle",
        "species_init": "paper_perturbation", "species_values": [20.0, 0.1, 0.9],
    },
    "model": {
        "forcing": "proportional", "kp": [-1e-2, 5e-2],
        "kinetics": "schnakenberg", "gamma": 20.0, "k1": 0.1, "k2": 0.9,
        "free": [
            {"name": "kp_2", "lower": 0.0, "upper": 0.15, "initial": 3.75e-2, "true": 5e-2},
            {"name": "gamma", "lower": 0.0, "upper": 60.0, "initial": 25.0, "true": 20.0},
            {"name": "k_b", "lower": 0.0, "upper": 3e-2, "initial": 1.15e-2, "true": 1e-2},
        ],
    },
    "objective": {"form": "sharp", "epsilon": 0.5, "weights": "ones"},
    "optimizer": {"scaling_reference": "provided_values"},
    "data": {"times": {"start": 0.0, "stop": 10.0, "step": 1.0}},
    "perturb": {"replications": 20, "k_n": [0.02, 0.10], "distributions": ["normal", "uniform"]},
    "scan": {"parameters": ["gamma", "kp_2"], "n": 33, "span": 0.25, "alpha": [0.01, 1.0, 100.0]},
}

_YEAST = {
    "forward": {
        "dt": 0.1, "n_vertices": 128, "sigma": 1e-2, "k_b": 1e-2, "lam": 0.0,
        "diffusion": [1e-3], "initial_shape": "capsule", "length": 4.0, "radius": 1.0,
        "species_init": "tip_gaussian", "species_values": [0.1, 0.4, 0.8],
    },
    "model": {
        "forcing": "yeast", "yeast_k1": 0.2, "yeast_k2": 0.01, "k_reg": 5e-2, "kinetics": "none",
        "free": [
            {"name": "yeast_k1", "lower": 0.0, "upper": 0.6, "initial": 0.3, "true": 0.2},
            {"name": "yeast_k2", "lower": 0.0, "upper": 0.03, "initial": 0.015, "true": 0.01},
        ],
    },
    "objective": {"form": "sharp", "epsilon": 0.5, "weights": "ones"},
    "optimizer": {"scaling_reference": "initial_guess"},
    "data": {"times": {"start": 0.0, "stop": 50.0, "step": 5.0}},
}

PRESETS = {
    "motility_sharp": _MOTILITY,
    "motility_phase_field": {**_MOTILITY, "objective": {"form": "phase_field", "epsilon": 0.5, "weights": "ones"}},
    "yeast_synthetic": _YEAST,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    solver: SolverConfig
    initial: dict
    spec: ModelSpec
    c0: np.ndarray
    c_true: np.ndarray | None
    form: str
    epsilon: float
    weights: object
    lm: LMOptions
    times: np.ndarray | None
    observations: Path | None
    noise: NoiseSpec | None
    perturb: dict
    scan: dict
    output: Path
    seed: int = 0
    raw: dict = field(default_factory=dict)

    @property
    def n_s(self) -> int:
        return len(self.times) - 1 if self.times is not None else None


def _get(section: dict, key: str, default, kind, where: str):
    value = section.get(key, default)
    if value is None:
        return None
    try:
        if kind is list:
            if not isinstance(value, list):
                raise TypeError
            return value
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{where}] {key}: expected {kind.__name__}, got {value!r}") from None


def _times(data: dict):
    t = data.get("times")
    if t is None:
        return None
    if isinstance(t, dict):
        try:
            start, stop, step = float(t.get("start", 0.0)), float(t["stop"]), float(t["step"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError("[data] times: need stop and step") from None
        if step <= 0 or stop <= start:
            raise ConfigError("[data] times: need step > 0 and stop > start")
        n = int(round((stop - start) / step))
        return start + step * np.arange(n + 1)
    if isinstance(t, list):
        arr = np.array(t, dtype=float)
        if arr.ndim != 1 or arr.size < 2 or np.any(np.diff(arr) <= 0):
            raise ConfigError("[data] times: need at least two strictly increasing times")
        return arr
    raise ConfigError("[data] times: expected a list or a {start, stop, step} table")


def _model(m: dict):
    forcing_kind = m.get("forcing", "proportional")
    if forcing_kind == "proportional":
        forcing = Proportional(tuple(float(v) for v in _get(m, "kp", [-1e-2, 5e-2], list, "model")))
    elif forcing_kind == "yeast":
        forcing = YeastThreshold(
            _get(m, "yeast_k1", 0.2, float, "model"), _get(m, "yeast_k2", 0.01, float, "model"),
            _get(m, "k_reg", 5e-2, float, "model"), _get(m, "smoothstep_transition", False, bool, "model"),
            _get(m, "species", 0, int, "model"),
        )
    else:
        raise ConfigError(f"[model] forcing: unknown kind {forcing_kind!r}")
    kin_kind = m.get("kinetics", "schnakenberg" if forcing_kind == "proportional" else "none")
    if kin_kind == "schnakenberg":
        kinetics = Schnakenberg(_get(m, "gamma", 20.0, float, "model"), _get(m, "k1", 0.1, float, "model"),
                                _get(m, "k2", 0.9, float, "model"))
    elif kin_kind == "none":
        kinetics = None
    else:
        raise ConfigError(f"[model] kinetics: unknown kind {kin_kind!r}")

    free, c0, truth = [], [], []
    for i, p in enumerate(m.get("free", [])):
        where = f"model.free[{i}]"
        if "name" not in p:
            raise ConfigError(f"[{where}] missing name")
        if "lower" not in p or "upper" not in p:
            raise ConfigError(f"[{where}] free parameter {p['name']!r} needs a box (lower and upper)")
        if "initial" not in p:
            raise ConfigError(f"[{where}] free parameter {p['name']!r} needs an initial value")
        try:
            free.append(FreeParameter(p["name"], float(p["lower"]), float(p["upper"])))
        except ValueError as exc:
            raise ConfigError(f"[{where}] {exc}") from None
        c0.append(float(p["initial"]))
        truth.append(p.get("true"))
    try:
        spec = ModelSpec(forcing=forcing, kinetics=kinetics, free=tuple(free))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[model] {exc}") from None
    c0 = np.array(c0)
    if free and (np.any(c0 < spec.lower) or np.any(c0 > spec.upper)):
        raise ConfigError("[model] initial values must lie inside their boxes")
    if any(t is None for t in truth):
        if any(t is not None for t in truth):
            raise ConfigError("[model] give true values for all free parameters or for none")
        c_true = None
    else:
        c_true = np.array(truth, dtype=float)
    return spec, c0, c_true


def parse_config(raw: dict, base_dir: Path = Path("."), output=None, seed=None) -> ExperimentConfig:
    """Validate a config mapping (already parsed from TOML)."""
    preset = raw.get("preset")
    user_scan = raw.get("scan", {})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = _merge(PRESETS[preset], {k: v for k, v in raw.items() if k != "preset"})
    known = {"forward", "model", "objective", "optimizer", "data", "noise", "perturb", "scan", "output", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    fw = raw.get("forward", {})
    try:
        solver = SolverConfig(
            dt=_get(fw, "dt", 1e-2, float, "forward"),
            n_vertices=_get(fw, "n_vertices", 128, int, "forward"),
            sigma=_get(fw, "sigma", 5e-3, float, "forward"),
            k_b=_get(fw, "k_b", 1e-2, float, "forward"),
            lam=_get(fw, "lam", 1.0, float, "forward"),
            diffusion=tuple(_get(fw, "diffusion", [1.0, 100.0], list, "forward")),
            remesh_ratio_threshold=_get(fw, "remesh_ratio_threshold", 3.0, float, "forward"),
            remesh_enabled=_get(fw, "remesh", True, bool, "forward"),
            check_self_intersection=_get(fw, "check_self_intersection", False, bool, "forward"),
            paper_literal_volume_sign=_get(fw, "paper_literal_volume_sign", False, bool, "forward"),
        )
    except ValueError as exc:
        raise ConfigError(f"[forward] {exc}") from None
    species_rule = fw.get("species_init", "paper_perturbation")
    initial = {
        "kind": fw.get("initial_shape", "unit_circle"),
        "n_vertices": solver.n_vertices,
        "species_init": (species_rule, _get(fw, "species_values", [20.0, 0.1, 0.9], list, "forward")),
        "length": _get(fw, "length", 4.0, float, "forward"),
        "radius": _get(fw, "radius", 1.0, float, "forward"),
    }

    spec, c0, c_true = _model(raw.get("model", {}))

    ob = raw.get("objective", {})
    form = ob.get("form", "sharp")
    if form not in ("sharp", "phase_field"):
        raise ConfigError(f"[objective] form must be 'sharp' or 'phase_field', got {form!r}")
    epsilon = _get(ob, "epsilon", 0.5, float, "objective")
    if epsilon <= 0:
        raise ConfigError("[objective] epsilon must be positive")
    weights = ob.get("weights", "ones")
    alpha = _get(ob, "alpha", 1.0, float, "objective")
    if isinstance(weights, str):
        if weights not in ("ones", "balanced", "alpha"):
            raise ConfigError(f"[objective] weights: unknown preset {weights!r}")
        if weights == "alpha":
            weights = ("alpha", alpha)
    elif isinstance(weights, list):
        if not all(isinstance(w, (int, float)) and w > 0 for w in weights):
            raise ConfigError("[objective] weights: explicit weights must be positive numbers")
    else:
        raise ConfigError("[objective] weights: expected a preset name or a list")

    op = raw.get("optimizer", {})
    try:
        lm = LMOptions(
            fd_step=_get(op, "fd_step", 5e-3, float, "optimizer"),
            stop_gradient=_get(op, "stop_gradient", 1e-6, float, "optimizer"),
            stop_update=_get(op, "stop_update", 1e-6, float, "optimizer"),
            stop_error=_get(op, "stop_error", 1e-6, float, "optimizer"),
            max_iterations=_get(op, "max_iterations", 100, int, "optimizer"),
            damping_init_factor=_get(op, "damping_init_factor", 1e-3, float, "optimizer"),
            scaling_reference=op.get("scaling_reference", "initial_guess"),
            central_differences=_get(op, "central_differences", False, bool, "optimizer"),
        )
    except ValueError as exc:
        raise ConfigError(f"[optimizer] {exc}") from None
    if lm.scaling_reference == "provided_values" and c_true is None:
        raise ConfigError("[optimizer] scaling_reference='provided_values' needs true values in [model.free]")

    data = raw.get("data", {})
    times = _times(data)
    obs_path = data.get("observations")
    if obs_path is not None:
        obs_path = Path(obs_path)
        if not obs_path.is_absolute():
            obs_path = base_dir / obs_path
        if not obs_path.exists():
            raise ConfigError(f"[data] observations file not found: {obs_path}")
    elif times is None:
        raise ConfigError("[data] need either an observations file or observation times")

    seed = int(seed if seed is not None else raw.get("seed", 0))
    nz = raw.get("noise")
    noise = None
    if nz:
        try:
            noise = NoiseSpec(nz.get("distribution", "normal"), float(nz.get("k_n", 0.0)),
                              int(nz.get("seed", seed)))
        except ValueError as exc:
            raise ConfigError(f"[noise] {exc}") from None

    if isinstance(weights, list) and times is not None and len(weights) != 2 * (len(times) - 1):
        raise ConfigError(f"[objective] weights: need {2 * (len(times) - 1)} entries, got {len(weights)}")

    pt = raw.get("perturb", {})
    perturb = {
        "replications": _get(pt, "replications", 20, int, "perturb"),
        "k_n": [float(v) for v in _get(pt, "k_n", [0.02, 0.05, 0.10, 0.20], list, "perturb")],
        "distributions": list(_get(pt, "distributions", ["normal", "uniform"], list, "perturb")),
    }
    if perturb["replications"] < 1 or any(k < 0 for k in perturb["k_n"]):
        raise ConfigError("[perturb] need replications >= 1 and k_n >= 0")
    for d in perturb["distributions"]:
        if d not in ("normal", "uniform"):
            raise ConfigError(f"[perturb] unknown distribution {d!r}")

    sc = raw.get("scan", {})
    scan_params = list(_get(sc, "parameters", spec.names[:2], list, "scan"))
    if "parameters" not in user_scan and not set(scan_params) <= set(spec.names):
        scan_params = spec.names[:2]  # preset axes do not apply to this model
    scan = {
        "parameters": scan_params,
        "n": _get(sc, "n", 33, int, "scan"),
        "span": _get(sc, "span", 0.25, float, "scan"),
        "alpha": [float(a) for a in _get(sc, "alpha", [1.0], list, "scan")],
        "epsilon": [float(e) for e in _get(sc, "epsilon", [epsilon], list, "scan")],
        "forms": list(_get(sc, "forms", [form], list, "scan")),
    }
    if len(scan["parameters"]) != min(2, spec.n_free):
        raise ConfigError("[scan] parameters: exactly two names required")
    if spec.n_free and not set(scan["parameters"]) <= set(spec.names):
        raise ConfigError(f"[scan] parameters must be free parameters {spec.names}")
    if scan["n"] < 1 or not 0 <= scan["span"] < 1:
        raise ConfigError("[scan] need n >= 1 and 0 <= span < 1")
    if any(a <= 0 for a in scan["alpha"]) or any(e <= 0 for e in scan["epsilon"]):
        raise ConfigError("[scan] alpha and epsilon values must be positive")
    for f in scan["forms"]:
        if f not in ("sharp", "phase_field"):
            raise ConfigError(f"[scan] unknown form {f!r}")

    out = Path(output if output is not None else raw.get("output", "cellfit_out"))
    if not out.is_absolute() and output is None:
        out = base_dir / out

    return ExperimentConfig(solver, initial, spec, c0, c_true, form, epsilon, weights, lm, times,
                            obs_path, noise, perturb, scan, out, seed, raw)


def load_config(path, output=None, seed=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return parse_config(raw, path.parent, output, seed)
