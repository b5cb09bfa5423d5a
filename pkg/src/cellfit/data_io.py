"""Observation files, synthetic targets and the observation noise model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import BoundModel
from .objective import ObservationSet
from .solver import Snapshot, SolverConfig, simulate

__all__ = [
    "NoiseSpec",
    "ObservationFormatError",
    "RNG_ALGORITHM",
    "add_noise",
    "generate_targets",
    "load_observations",
    "observations_from_dict",
    "observations_to_dict",
    "save_observations",
]

RNG_ALGORITHM = "numpy.random.Philox"


class ObservationFormatError(ValueError):
    """Schema violation in an observation file; ``path`` is the JSON location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise with mean zero and standard deviation ``k_n``.

    The uniform variant draws from ``[-sqrt(3) k_n, sqrt(3) k_n]``.
    """

    distribution: str = "normal"
    k_n: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("normal", "uniform"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")
        if not self.k_n >= 0:
            raise ValueError("noise standard deviation k_n must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(int(self.seed)))

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.distribution == "normal":
            return rng.normal(0.0, self.k_n, size=shape)
        half = np.sqrt(3.0) * self.k_n
        return rng.uniform(-half, half, size=shape)


def _range(v: np.ndarray, axis: int) -> np.ndarray:
    return v.max(axis=axis) - v.min(axis=axis)


def add_noise(obs: ObservationSet, spec: NoiseSpec) -> ObservationSet:
    """Perturb snapshots 1..n_s by ``eta * range`` per coordinate and species.

    Ranges are those of the clean snapshot.  Snapshot 0 (the initial data) is
    left untouched.  Every scalar gets its own draw; the draw order is
    snapshot by snapshot, points then fields, so results depend only on the
    seed.
    """
    meta = dict(obs.metadata)
    meta["noise"] = {"distribution": spec.distribution, "k_n": spec.k_n, "seed": int(spec.seed),
                     "rng": RNG_ALGORITHM}
    if spec.k_n == 0:
        return ObservationSet(obs.snapshots, meta)
    rng = spec.generator()
    snaps = [obs.snapshots[0]]
    for s in obs.snapshots[1:]:
        pts = s.points + spec.draw(rng, s.points.shape) * _range(s.points, 0)
        flds = s.fields + spec.draw(rng, s.fields.shape) * _range(s.fields, 1)[:, None]
        snaps.append(Snapshot(s.t, pts, flds, ordered=s.ordered))
    return ObservationSet(tuple(snaps), meta)


def generate_targets(config: SolverConfig, model: BoundModel, initial, observation_times,
                     c_true=None, names=None) -> ObservationSet:
    """Simulate and package the snapshots as observations."""
    traj = simulate(initial, config, model, observation_times)
    meta = {}
    if c_true is not None:
        c_true = [float(x) for x in np.atleast_1d(c_true)]
        meta["c_true"] = dict(zip(names, c_true)) if names is not None else c_true
    return ObservationSet.from_trajectory(traj, meta)


def observations_to_dict(obs: ObservationSet) -> dict:
    return {
        "times": [float(t) for t in obs.times],
        "snapshots": [
            {
                "t": float(s.t),
                "points": s.points.tolist(),
                "ordered": bool(s.ordered),
                "fields": s.fields.tolist(),
            }
            for s in obs.snapshots
        ],
        "metadata": obs.metadata,
    }


def _require(d, key, path):
    if not isinstance(d, dict):
        raise ObservationFormatError(path, "expected an object")
    if key not in d:
        raise ObservationFormatError(f"{path}.{key}", f"missing required key {key!r}")
    return d[key]


def _float_array(value, path, ndim):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ObservationFormatError(path, "expected numeric arrays") from None
    if arr.ndim != ndim:
        raise ObservationFormatError(path, f"expected a {ndim}-d array, got {arr.ndim}-d")
    if not np.all(np.isfinite(arr)):
        raise ObservationFormatError(path, "non-finite values")
    return arr


def observations_from_dict(d) -> ObservationSet:
    times = _float_array(_require(d, "times", "$"), "$.times", 1)
    raw = _require(d, "snapshots", "$")
    if not isinstance(raw, list):
        raise ObservationFormatError("$.snapshots", "expected a list")
    if len(raw) != times.size:
        raise ObservationFormatError("$.snapshots", f"{len(raw)} snapshots but {times.size} times")
    snaps = []
    for i, s in enumerate(raw):
        base = f"$.snapshots[{i}]"
        t = float(_require(s, "t", base))
        if t != times[i]:
            raise ObservationFormatError(f"{base}.t", f"time {t} differs from times[{i}] = {times[i]}")
        pts = _float_array(_require(s, "points", base), f"{base}.points", 2)
        if pts.shape[0] == 0 or pts.shape[1] != 2:
            raise ObservationFormatError(f"{base}.points", "expected a non-empty list of [x, y] pairs")
        flds = _float_array(_require(s, "fields", base), f"{base}.fields", 2)
        if flds.shape[1] != pts.shape[0]:
            raise ObservationFormatError(
                f"{base}.fields",
                f"snapshot {i}: fields have {flds.shape[1]} values but there are {pts.shape[0]} points",
            )
        ordered = s.get("ordered", True)
        if not isinstance(ordered, bool):
            raise ObservationFormatError(f"{base}.ordered", "expected a boolean")
        snaps.append(Snapshot(t, pts, flds, ordered=ordered))
    meta = d.get("metadata", {}) or {}
    if not isinstance(meta, dict):
        raise ObservationFormatError("$.metadata", "expected an object")
    try:
        return ObservationSet(tuple(snaps), meta)
    except ValueError as exc:
        raise ObservationFormatError("$", str(exc)) from None


def save_observations(obs: ObservationSet, path) -> None:
    # json writes floats with repr(), i.e. the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(observations_to_dict(obs), indent=1) + "\n")


def load_observations(path) -> ObservationSet:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ObservationFormatError("$", f"invalid JSON: {exc}") from None
    return observations_from_dict(d)
