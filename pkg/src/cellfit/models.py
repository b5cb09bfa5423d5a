"""Kinetics, forcing laws and the binding of free parameters to model slots."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "BoundModel",
    "FreeParameter",
    "ModelSpec",
    "Proportional",
    "Schnakenberg",
    "YeastThreshold",
    "bind_parameters",
    "sign_box",
    "proportional_forcing",
    "schnakenberg",
    "steady_state",
    "yeast_forcing",
]

CONSTANT_SLOTS = ("sigma", "k_b", "lam")
DEFAULT_K_REG = 5e-2


def schnakenberg(a, gamma, k1, k2):
    """Activator-depleted substrate kinetics.

    ``a`` has species along the first axis; returns ``(f1, f2)`` with the same
    trailing shape.
    """
    a1, a2 = a[0], a[1]
    a1sq_a2 = a1 * a1 * a2
    return np.array([gamma * (k1 - a1 + a1sq_a2), gamma * (k2 - a1sq_a2)])


def steady_state(gamma, k1, k2):
    """Spatially homogeneous steady state; independent of ``gamma``."""
    s = k1 + k2
    if s == 0:
        raise ValueError("k1 + k2 must be nonzero")
    return (s, k2 / (s * s))


def proportional_forcing(a, kp):
    """Normal forcing ``kp . a``, evaluated along the species axis."""
    a = np.asarray(a, dtype=float)
    kp = np.asarray(kp, dtype=float)
    if a.shape[0] != kp.shape[0]:
        raise ValueError(f"k_p has {kp.shape[0]} entries but a has {a.shape[0]} species")
    return np.tensordot(kp, a, axes=1)


def yeast_forcing(eta, k1, k2, k_reg, smoothstep: bool = False):
    """Thresholded growth forcing driven by an intensity ``eta``.

    Zero below ``k1``, ``k2`` above ``k1 + k_reg`` and a polynomial ramp in
    between.  The default ramp is ``k2 * (s * (3 - 2 s))**2`` with
    ``s = (eta - k1) / k_reg``, which peaks at ``81/64 k2`` for ``s = 3/4``;
    ``smoothstep=True`` uses the monotone ``k2 * s**2 * (3 - 2 s)`` instead.
    """
    if k_reg <= 0:
        raise ValueError("k_reg must be positive")
    eta = np.asarray(eta, dtype=float)
    s = np.clip((eta - k1) / k_reg, 0.0, 1.0)
    if smoothstep:
        ramp = s * s * (3.0 - 2.0 * s)
    else:
        ramp = (s * (3.0 - 2.0 * s)) ** 2
    out = k2 * ramp
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Schnakenberg:
    gamma: float
    k1: float
    k2: float

    def __call__(self, a):
        return schnakenberg(a, self.gamma, self.k1, self.k2)


@dataclass(frozen=True)
class Proportional:
    kp: tuple

    def __call__(self, a):
        return proportional_forcing(a, self.kp)


@dataclass(frozen=True)
class YeastThreshold:
    k1: float
    k2: float
    k_reg: float = DEFAULT_K_REG
    smoothstep: bool = False
    species: int = 0

    def __call__(self, a):
        return yeast_forcing(np.asarray(a)[self.species], self.k1, self.k2, self.k_reg, self.smoothstep)


@dataclass(frozen=True)
class FreeParameter:
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not (self.lower <= self.upper):
            raise ValueError(f"box for {self.name!r} has lower > upper")


def sign_box(true_value: float, factor: float = 3.0) -> tuple:
    """Sign-preserving box with magnitude at most ``factor`` times the truth."""
    if true_value >= 0:
        return (0.0, factor * true_value)
    return (factor * true_value, 0.0)


@dataclass(frozen=True)
class ModelSpec:
    """Model components plus the free parameters of an identification run.

    ``constants`` holds physical-constant slots (``sigma``, ``k_b``, ``lam``,
    ``D_1`` ...) that override the solver configuration when bound.  Slot
    names for the components are ``gamma``/``k1``/``k2`` (Schnakenberg),
    ``kp_1``... (proportional forcing) and ``yeast_k1``/``yeast_k2``/``k_reg``
    (threshold forcing).
    """

    forcing: object
    kinetics: object = None
    free: tuple = ()
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "free", tuple(self.free))
        names = [p.name for p in self.free]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate free parameters: {names}")
        for name in names:
            _check_slot(self.forcing, self.kinetics, name)

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def names(self) -> list:
        return [p.name for p in self.free]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.free], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.free], dtype=float)

    def slot_value(self, name: str) -> float:
        """Current value of a slot; raises ``KeyError`` for unknown or unset slots."""
        return _slot_value(self.forcing, self.kinetics, self.constants, name)

    def values(self) -> np.ndarray:
        return np.array([self.slot_value(n) for n in self.names], dtype=float)


def _index(name: str, n: int) -> int:
    try:
        i = int(name.split("_", 1)[1]) - 1
    except (IndexError, ValueError):
        raise KeyError(f"malformed slot name {name!r}") from None
    if not 0 <= i < n:
        raise KeyError(f"slot {name!r} out of range (1..{n})")
    return i


def _check_slot(forcing, kinetics, name: str) -> None:
    if name in CONSTANT_SLOTS or name.startswith("D_"):
        if name.startswith("D_"):
            _index(name, 10**6)
        return
    if isinstance(kinetics, Schnakenberg) and name in ("gamma", "k1", "k2"):
        return
    if isinstance(forcing, Proportional) and name.startswith("kp_"):
        _index(name, len(forcing.kp))
        return
    if isinstance(forcing, YeastThreshold) and name in ("yeast_k1", "yeast_k2", "k_reg"):
        return
    raise KeyError(f"unknown model slot {name!r}")


def _slot_value(forcing, kinetics, constants, name: str) -> float:
    _check_slot(forcing, kinetics, name)
    if name in constants:
        return float(constants[name])
    if name in ("gamma", "k1", "k2"):
        return float(getattr(kinetics, name))
    if name.startswith("kp_"):
        return float(forcing.kp[_index(name, len(forcing.kp))])
    if name in ("yeast_k1", "yeast_k2", "k_reg"):
        return float(getattr(forcing, name.replace("yeast_", "")))
    raise KeyError(f"constant slot {name!r} is not set on the model; it comes from the solver config")


@dataclass(frozen=True)
class BoundModel:
    """Evaluable model: forcing ``g(a)``, reaction ``f(a)`` and constant overrides."""

    forcing: object
    kinetics: object = None
    constants: dict = field(default_factory=dict)

    def reaction(self, a):
        if self.kinetics is None:
            return np.zeros_like(a)
        return self.kinetics(a)

    def normal_forcing(self, a):
        return self.forcing(a)

    def slot_value(self, name: str) -> float:
        return _slot_value(self.forcing, self.kinetics, self.constants, name)


def bind_parameters(spec: ModelSpec, c: Sequence[float] = (), check_box: bool = True) -> BoundModel:
    """Substitute the parameter vector ``c`` into the named slots of ``spec``."""
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.size != spec.n_free:
        raise ValueError(f"expected {spec.n_free} parameters, got {c.size}")
    if not np.all(np.isfinite(c)):
        raise ValueError("parameter vector contains non-finite values")
    if check_box and spec.n_free:
        outside = (c < spec.lower) | (c > spec.upper)
        if np.any(outside):
            bad = [n for n, o in zip(spec.names, outside) if o]
            raise ValueError(f"parameters outside the admissible box: {bad}")

    kinetics = spec.kinetics
    forcing = spec.forcing
    constants = dict(spec.constants)
    kin_updates = {}
    force_updates = {}
    kp = list(forcing.kp) if isinstance(forcing, Proportional) else None
    for name, value in zip(spec.names, c):
        value = float(value)
        _check_slot(forcing, kinetics, name)
        if name in CONSTANT_SLOTS or name.startswith("D_"):
            constants[name] = value
        elif name in ("gamma", "k1", "k2"):
            kin_updates[name] = value
        elif name.startswith("kp_"):
            kp[_index(name, len(kp))] = value
        else:
            force_updates[name.replace("yeast_", "")] = value
    if kin_updates:
        kinetics = replace(kinetics, **kin_updates)
    if kp is not None:
        forcing = Proportional(tuple(kp))
    if force_updates:
        forcing = replace(forcing, **force_updates)
    return BoundModel(forcing=forcing, kinetics=kinetics, constants=constants)


def motility_model(free: Sequence[FreeParameter] = ()) -> ModelSpec:
    """Keratocyte-fragment model used to generate the synthetic curve targets."""
    return ModelSpec(
        forcing=Proportional((-1e-2, 5e-2)),
        kinetics=Schnakenberg(20.0, 0.1, 0.9),
        free=tuple(free),
    )

