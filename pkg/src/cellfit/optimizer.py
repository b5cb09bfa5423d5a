"""Box-constrained Levenberg-Marquardt with finite-difference Jacobians.

The iteration runs in rescaled coordinates ``u = c / scale`` so that the
damping term, the finite-difference step and the stopping tests treat
parameters of very different magnitude alike.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "LMAbort",
    "LMOptions",
    "LMResult",
    "Iterate",
    "fd_jacobian",
    "lm_solve",
    "lm_step",
    "relative_error_report",
    "write_trace_csv",
]

SENTINEL_THRESHOLD = 1e9  # residual entries at or above this mark a failed forward solve
TERMINATIONS = ("small_error", "small_gradient", "small_update", "max_iterations")


class LMAbort(RuntimeError):
    """Raised when the residual cannot be evaluated well enough to continue."""


@dataclass(frozen=True)
class LMOptions:
    fd_step: float = 5e-3
    stop_gradient: float = 1e-6
    stop_update: float = 1e-6
    stop_error: float = 1e-6
    max_iterations: int = 100
    damping_init_factor: float = 1e-3
    scaling_reference: str = "initial_guess"
    central_differences: bool = False
    max_rejections: int = 20

    def __post_init__(self):
        for name in ("fd_step", "stop_gradient", "stop_update", "stop_error", "damping_init_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 0 or self.max_rejections < 1:
            raise ValueError("iteration limits must be non-negative")
        if self.scaling_reference not in ("initial_guess", "provided_values"):
            raise ValueError(f"unknown scaling_reference {self.scaling_reference!r}")


@dataclass(frozen=True)
class Iterate:
    iteration: int
    c: np.ndarray
    value: float
    mu: float
    accepted: bool
    nfev: int
    chi: np.ndarray


@dataclass
class LMResult:
    c: np.ndarray
    termination: str
    iterates: list
    nfev: int
    n_jacobians: int
    chi: np.ndarray
    relative_errors: list = None
    flagged_columns: list = field(default_factory=list)

    @property
    def value(self) -> float:
        return 0.5 * float(self.chi @ self.chi)

    @property
    def n_iterations(self) -> int:
        """Number of accepted steps."""
        return sum(1 for it in self.iterates[1:] if it.accepted)

    @property
    def converged(self) -> bool:
        return self.termination != "max_iterations"

    def accepted_values(self) -> np.ndarray:
        return np.array([it.value for it in self.iterates if it.accepted])

    def to_dict(self, names=None) -> dict:
        names = list(names) if names is not None else [f"c{i + 1}" for i in range(self.c.size)]
        out = {
            "parameters": dict(zip(names, map(float, self.c))),
            "termination": self.termination,
            "iterations": self.n_iterations,
            "function_evaluations": self.nfev,
            "jacobians": self.n_jacobians,
            "objective": self.value,
            "chi": [float(x) for x in self.chi],
        }
        if self.relative_errors is not None:
            out["relative_errors"] = self.relative_errors
        return out


def _is_failed(chi) -> bool:
    chi = np.asarray(chi)
    return bool(np.any(~np.isfinite(chi)) or np.any(np.abs(chi) >= SENTINEL_THRESHOLD))


def _fd_points(c, scale, h, lower, upper, central):
    """Perturbed parameter vectors and the signed steps actually taken."""
    n = c.size
    steps = h * np.abs(scale)
    points, taken = [], np.empty(n)
    for j in range(n):
        s = steps[j]
        if c[j] + s > upper[j]:
            s = -s  # forward point would leave the box: difference backwards
            if c[j] + s < lower[j]:
                s = upper[j] - c[j] if upper[j] - c[j] >= c[j] - lower[j] else lower[j] - c[j]
        if s == 0:
            raise LMAbort(f"box for parameter {j} is degenerate; cannot difference")
        cp = c.copy()
        cp[j] += s
        taken[j] = s
        points.append(cp)
    if central:
        for j in range(n):
            cm = c.copy()
            cm[j] -= taken[j]
            points.append(np.clip(cm, lower, upper))
    return points, taken


def fd_jacobian(residual_fn, c, scale=None, h=5e-3, chi0=None, lower=None, upper=None,
                central=False, map_fn=map):
    """Finite-difference Jacobian of ``residual_fn`` at ``c`` in original coordinates.

    Column ``j`` uses the step ``h * scale[j]``; steps that would leave the box
    ``[lower, upper]`` are taken in the opposite direction.  ``map_fn`` may be
    a parallel map (e.g. ``executor.map``) since the columns are independent.

    Returns
    -------
    jac : ndarray, shape (m, n)
    flagged : list of int
        Columns whose perturbed evaluation failed; they are set to zero.
    nfev : int
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    scale = np.ones(n) if scale is None else np.asarray(scale, dtype=float)
    if np.any(scale == 0):
        raise ValueError("scale must be nonzero for every parameter")
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    nfev = 0
    if chi0 is None and not central:
        chi0 = np.asarray(residual_fn(c), dtype=float)
        nfev += 1
    points, taken = _fd_points(c, scale, h, lower, upper, central)
    values = [np.asarray(v, dtype=float) for v in map_fn(residual_fn, points)]
    nfev += len(values)
    m = values[0].size
    jac = np.zeros((m, n))
    flagged = []
    for j in range(n):
        plus = values[j]
        if central:
            minus = values[n + j]
            bad = _is_failed(plus) or _is_failed(minus)
            denom = points[j][j] - points[n + j][j]
            col = (plus - minus) / denom if denom != 0 else np.zeros(m)
        else:
            bad = _is_failed(plus)
            col = (plus - chi0) / taken[j]
        if bad:
            flagged.append(j)
        else:
            jac[:, j] = col
    if 2 * len(flagged) > n:
        raise LMAbort(f"forward solve failed for {len(flagged)} of {n} Jacobian columns: {flagged}")
    return jac, flagged, nfev


def lm_step(jac, chi, mu):
    """Solve ``(J^T J + mu I) delta = -J^T chi``; ``None`` if the system is singular."""
    a = jac.T @ jac + mu * np.eye(jac.shape[1])
    g = jac.T @ chi
    try:
        delta = np.linalg.solve(a, -g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(delta)):
        return None
    return delta


def lm_solve(residual_fn, c0, lower, upper, options: LMOptions = LMOptions(), scale=None,
             c_true=None, map_fn=map) -> LMResult:
    """Minimise ``0.5 |chi(c)|^2`` over the box ``[lower, upper]``.

    Parameters
    ----------
    residual_fn : callable
        ``c -> chi``.  Failed forward solves should return entries >= 1e9.
    c0 : array_like
        Initial guess, inside the box.
    scale : array_like, optional
        Reference magnitudes.  Required when ``options.scaling_reference`` is
        ``"provided_values"``; otherwise ``|c0|`` is used (1 where c0 is 0).
    c_true : array_like, optional
        If given, relative errors are attached to the result.
    map_fn : callable
        Map used for the Jacobian columns.
    """
    opts = options
    c = np.asarray(c0, dtype=float).copy()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = c.size
    if lower.shape != (n,) or upper.shape != (n,):
        raise ValueError("box bounds must match the parameter count")
    if np.any(lower > upper):
        raise ValueError("box has lower > upper")
    if np.any(c < lower) or np.any(c > upper):
        raise ValueError("initial guess lies outside the box")
    if opts.scaling_reference == "provided_values":
        if scale is None:
            raise ValueError("scaling_reference='provided_values' needs explicit scale values")
        scale = np.abs(np.asarray(scale, dtype=float))
    elif scale is None:
        scale = np.where(c != 0, np.abs(c), 1.0)
    else:
        scale = np.abs(np.asarray(scale, dtype=float))
    if np.any(scale == 0):
        raise ValueError("scale must be nonzero")

    chi = np.asarray(residual_fn(c), dtype=float)
    nfev = 1
    if _is_failed(chi):
        raise LMAbort("forward solve failed at the initial guess")
    m = chi.size
    if m < n:
        raise ValueError(f"{m} residuals cannot determine {n} parameters")
    value = 0.5 * float(chi @ chi)
    iterates = [Iterate(0, c.copy(), value, float("nan"), True, nfev, chi.copy())]
    n_jac = 0
    flagged_all: list = []

    def finish(term):
        rel = relative_error_report(c, c_true) if c_true is not None else None
        log.info("LM: %s after %d accepted steps, J=%.6e, nfev=%d", term,
                 sum(it.accepted for it in iterates[1:]), value, nfev)
        return LMResult(c.copy(), term, iterates, nfev, n_jac, chi.copy(), rel, flagged_all)

    def jacobian():
        nonlocal nfev, n_jac
        jac, flagged, k = fd_jacobian(residual_fn, c, scale, opts.fd_step, chi0=chi, lower=lower,
                                      upper=upper, central=opts.central_differences, map_fn=map_fn)
        nfev += k
        n_jac += 1
        flagged_all.extend(flagged)
        return jac * scale  # derivative with respect to u = c / scale

    if np.linalg.norm(chi) < opts.stop_error:
        return finish("small_error")
    jac = jacobian()
    grad = jac.T @ chi
    if np.max(np.abs(grad)) < opts.stop_gradient:
        return finish("small_gradient")
    mu = opts.damping_init_factor * float(np.max(np.diag(jac.T @ jac)))
    if mu <= 0:
        mu = opts.damping_init_factor

    u_lo, u_hi = lower / scale, upper / scale
    iteration = 0
    while iteration < opts.max_iterations:
        iteration += 1
        rejections = 0
        while True:
            delta = lm_step(jac, chi, mu)
            if delta is None:
                mu *= 2.0
                rejections += 1
                if rejections >= opts.max_rejections:
                    return finish("small_update")
                continue
            u = c / scale
            u_trial = np.clip(u + delta, u_lo, u_hi)
            step = u_trial - u
            if np.linalg.norm(step) < opts.stop_update:
                return finish("small_update")
            c_trial = np.clip(u_trial * scale, lower, upper)
            chi_trial = np.asarray(residual_fn(c_trial), dtype=float)
            nfev += 1
            trial_value = 0.5 * float(chi_trial @ chi_trial) if not _is_failed(chi_trial) else np.inf
            if trial_value < value:
                c, chi, value = c_trial, chi_trial, trial_value
                iterates.append(Iterate(iteration, c.copy(), value, mu, True, nfev, chi.copy()))
                mu /= 3.0
                break
            iterates.append(Iterate(iteration, c_trial.copy(), trial_value, mu, False, nfev,
                                    chi_trial.copy()))
            mu *= 2.0
            rejections += 1
            if rejections >= opts.max_rejections:
                return finish("small_update")
        if np.linalg.norm(chi) < opts.stop_error:
            return finish("small_error")
        jac = jacobian()
        grad = jac.T @ chi
        if np.max(np.abs(grad)) < opts.stop_gradient:
            return finish("small_gradient")
    return finish("max_iterations")


def relative_error_report(c, c_true) -> list:
    """Per-parameter ``|c - c_true| / |c_true| * 100``.

    Entries with a zero true value report the absolute error instead and set
    ``absolute`` to True.
    """
    c = np.asarray(c, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    if c.shape != c_true.shape:
        raise ValueError("estimate and truth differ in shape")
    out = []
    for est, true in zip(c, c_true):
        if true == 0:
            out.append({"estimate": float(est), "true": 0.0, "error": abs(float(est)), "absolute": True})
        else:
            out.append({"estimate": float(est), "true": float(true),
                        "error": abs((est - true) / true) * 100.0, "absolute": False})
    return out


def write_trace_csv(path, result: LMResult, names=None) -> None:
    """One row per evaluated LM trial (iteration 0 is the initial guess)."""
    n = result.c.size
    names = list(names) if names is not None else [f"c{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "accepted", "J", "J_position", "J_concentration", "mu", "nfev", *names])
        for it in result.iterates:
            k = it.chi.size // 2
            if np.isfinite(it.value):
                pos = 0.5 * float(it.chi[:k] @ it.chi[:k])
                conc = 0.5 * float(it.chi[k:] @ it.chi[k:])
            else:
                pos = conc = float("inf")
            wr.writerow([it.iteration, int(it.accepted), repr(it.value), repr(pos), repr(conc),
                         repr(it.mu), it.nfev, *(repr(float(x)) for x in it.c)])
