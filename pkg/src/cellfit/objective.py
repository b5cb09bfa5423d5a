"""Mismatch functionals between simulated trajectories and observations.

Both forms produce a residual vector ``chi`` of length ``2 n_s``: entries
``0..n_s-1`` measure position error per snapshot, entries ``n_s..2 n_s-1``
concentration error, and ``J = 0.5 * chi @ chi``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .geometry import Curve
from .models import ModelSpec, bind_parameters
from .solver import Snapshot, SolverConfig, SolverError, Trajectory, simulate

__all__ = [
    "BulkMesh",
    "ObservationSet",
    "ResidualFunction",
    "ResidualVector",
    "SENTINEL",
    "balanced_weights",
    "build_bulk_mesh",
    "l2_norm",
    "objective_value",
    "phase_field_fields",
    "phase_field_residuals",
    "residuals",
    "sharp_residuals",
    "unit_weights",
]

SENTINEL = 1e10
DEFAULT_EPSILON = 0.5
MESH_MARGIN = 2.5  # in units of epsilon; must exceed 2
MESH_REFINEMENT = 4.5  # h = epsilon / MESH_REFINEMENT, must exceed 4


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed snapshots at ``t0 < t1 < ... < t_ns``.

    Snapshot 0 only supplies initial data; residuals use snapshots 1..n_s.
    """

    snapshots: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        if len(snaps) < 2:
            raise ValueError("need the initial snapshot and at least one observation")
        times = np.array([s.t for s in snaps])
        if np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        n_species = {s.fields.shape[0] for s in snaps}
        if len(n_species) != 1:
            raise ValueError(f"inconsistent species counts across snapshots: {sorted(n_species)}")

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def n_s(self) -> int:
        return len(self.snapshots) - 1

    @property
    def n_species(self) -> int:
        return self.snapshots[0].fields.shape[0]

    @property
    def ordered(self) -> bool:
        return all(s.ordered for s in self.snapshots)

    def initial_data(self):
        s0 = self.snapshots[0]
        return Curve(s0.points), np.array(s0.fields)

    def equals(self, other: "ObservationSet") -> bool:
        return (
            len(self.snapshots) == len(other.snapshots)
            and all(a.equals(b) for a, b in zip(self.snapshots, other.snapshots))
            and self.metadata == other.metadata
        )

    @classmethod
    def from_trajectory(cls, traj: Trajectory, metadata=None) -> "ObservationSet":
        snaps = [Snapshot(s.t, s.points, s.fields, ordered=True) for s in traj.snapshots]
        return cls(tuple(snaps), dict(metadata or {}))


@dataclass(frozen=True, eq=False)
class ResidualVector:
    chi: np.ndarray
    n_s: int
    failed: bool = False

    @property
    def value(self) -> float:
        return 0.5 * float(self.chi @ self.chi)


def unit_weights(n_s: int, alpha: float = 1.0) -> np.ndarray:
    """Position weights 1, concentration weights ``alpha``."""
    if alpha <= 0:
        raise ValueError("weights must be positive")
    return np.concatenate([np.ones(n_s), np.full(n_s, float(alpha))])


def balanced_weights(chi_unit: np.ndarray) -> np.ndarray:
    """Weights equalising position and concentration error.

    ``chi_unit`` is the residual at a reference parameter vector computed with
    unit weights.  Position weights stay 1; concentration weights become
    ``sum(chi_pos**2) / sum(chi_conc**2)``.
    """
    chi_unit = np.asarray(chi_unit, dtype=float)
    n_s = chi_unit.size // 2
    pos = float(chi_unit[:n_s] @ chi_unit[:n_s])
    conc = float(chi_unit[n_s:] @ chi_unit[n_s:])
    alpha = pos / conc if conc > 0 and pos > 0 else 1.0
    return unit_weights(n_s, alpha)


def objective_value(chi) -> tuple:
    """``(J, J_position, J_concentration)`` with ``J = 0.5 chi.chi``."""
    chi = np.asarray(getattr(chi, "chi", chi), dtype=float)
    n_s = chi.size // 2
    pos = 0.5 * float(chi[:n_s] @ chi[:n_s])
    conc = 0.5 * float(chi[n_s:] @ chi[n_s:])
    return pos + conc, pos, conc


def _check_weights(w, n_s):
    w = np.asarray(w, dtype=float)
    if w.shape != (2 * n_s,):
        raise ValueError(f"weight vector must have length {2 * n_s}, got {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    return w


def _aligned_pairs(traj: Trajectory, obs: ObservationSet, time_tol: float):
    # times are compared relative to the first snapshot of each sequence
    if len(traj.snapshots) != len(obs.snapshots):
        raise ValueError(
            f"trajectory has {len(traj.snapshots)} snapshots, observations have {len(obs.snapshots)}"
        )
    t0_sim = traj.snapshots[0].t
    t0_obs = obs.snapshots[0].t
    for a, b in zip(traj.snapshots[1:], obs.snapshots[1:]):
        if abs((a.t - t0_sim) - (b.t - t0_obs)) > time_tol:
            raise ValueError(f"trajectory time {a.t} does not align with observation time {b.t}")
    return list(zip(traj.snapshots[1:], obs.snapshots[1:]))


def sharp_residuals(traj, obs: ObservationSet, w, time_tol: float = 1e-8) -> ResidualVector:
    """Vertex/point-cloud residuals.

    Position entry: mean distance from computed vertices to the nearest
    observed point plus mean distance from observed points to the nearest
    computed vertex.  Concentration entry: the same symmetric mean of the
    species 1-norm difference at the nearest-point pairing.
    """
    n_s = obs.n_s
    w = _check_weights(w, n_s)
    if traj is None:
        return ResidualVector(np.full(2 * n_s, SENTINEL), n_s, failed=True)
    chi = np.empty(2 * n_s)
    for i, (sim, ob) in enumerate(_aligned_pairs(traj, obs, time_tol)):
        d_sim, to_obs = geometry.closest_points(ob.points, sim.points)
        d_obs, to_sim = geometry.closest_points(sim.points, ob.points)
        chi[i] = d_sim.mean() + d_obs.mean()
        c_sim = np.abs(sim.fields - ob.fields[:, to_obs]).sum(axis=0).mean()
        c_obs = np.abs(ob.fields - sim.fields[:, to_sim]).sum(axis=0).mean()
        chi[n_s + i] = c_sim + c_obs
    return ResidualVector(np.sqrt(w) * chi, n_s)


@dataclass(frozen=True)
class BulkMesh:
    """Uniform node grid of a rectangle, two triangles per cell.

    Nodes are ``(origin[0] + i h, origin[1] + j h)`` for ``i < nx``, ``j < ny``;
    arrays over the mesh have shape ``(ny, nx)``.
    """

    origin: tuple
    h: float
    nx: int
    ny: int
    epsilon: float

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.h * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.h * np.arange(self.ny)

    @property
    def bounds(self) -> tuple:
        return (self.origin[0], self.origin[1],
                self.origin[0] + self.h * (self.nx - 1), self.origin[1] + self.h * (self.ny - 1))

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def nodes(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def build_bulk_mesh(curves: Sequence, epsilon: float) -> BulkMesh:
    """Rectangle around all curves with a margin of at least ``2.5 epsilon`` and ``h = epsilon / 4.5``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pts = np.vstack([geometry.as_vertices(c) for c in curves])
    if pts.size == 0:
        raise ValueError("no curve points")
    lo = pts.min(axis=0) - MESH_MARGIN * epsilon
    hi = pts.max(axis=0) + MESH_MARGIN * epsilon
    h = epsilon / MESH_REFINEMENT
    # nodes sit on the global lattice h*Z^2 so that moving a curve never moves
    # the nodes; otherwise J picks up O(h^2) jitter that spoils FD Jacobians
    i0 = np.floor(lo / h).astype(int)
    i1 = np.ceil(hi / h).astype(int)
    nx, ny = (i1 - i0 + 1).tolist()
    return BulkMesh((float(i0[0] * h), float(i0[1] * h)), h, nx, ny, float(epsilon))


def phase_field_fields(curve, fields, mesh: BulkMesh):
    """Nodal diffuse-interface representation of a curve and its species.

    Returns ``(phi, a)`` with shapes ``(ny, nx)`` and ``(n_species, ny, nx)``.
    ``phi = sin(pi d / 2 eps)`` in the band ``|d| < eps`` and ``-1``/``+1``
    inside/outside; ``a = cos(pi d / 2 eps) a(closest point)`` in the band and
    zero elsewhere.  The closest point is the projection onto the nearest edge
    with species interpolated linearly along it.
    """
    x = geometry.as_vertices(curve)
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    eps = mesh.epsilon
    dist, edge, t = geometry.grid_band_distance(x, mesh.origin, mesh.h, (mesh.ny, mesh.nx), eps)
    inside = geometry.grid_inside(x, mesh.xs, mesh.ys)
    band = dist < eps
    d = np.where(inside, -dist, dist)
    phi = np.where(inside, -1.0, 1.0)
    phi[band] = np.sin(0.5 * np.pi * d[band] / eps)
    a = np.zeros((fields.shape[0], mesh.ny, mesh.nx))
    e = edge[band]
    tb = t[band]
    ext = (1.0 - tb) * fields[:, e] + tb * fields[:, (e + 1) % x.shape[0]]
    a[:, band] = np.cos(0.5 * np.pi * d[band] / eps) * ext
    return phi, a


def l2_norm(mesh: BulkMesh, u) -> float:
    """Exact L2 norm of the piecewise-linear interpolant of nodal values.

    ``u`` has shape ``(ny, nx)`` or ``(k, ny, nx)``; components are summed.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[None]
    u00 = u[:, :-1, :-1]
    u10 = u[:, :-1, 1:]
    u11 = u[:, 1:, 1:]
    u01 = u[:, 1:, :-1]
    # triangles (00, 10, 11) and (00, 11, 01); int u^2 = |T|/6 (sum u_i^2 + sum_{i<j} u_i u_j)
    t1 = u00 * u00 + u10 * u10 + u11 * u11 + u00 * u10 + u10 * u11 + u00 * u11
    t2 = u00 * u00 + u11 * u11 + u01 * u01 + u00 * u11 + u11 * u01 + u00 * u01
    area = 0.5 * mesh.h * mesh.h
    total = area / 6.0 * float(np.sum(t1) + np.sum(t2))
    return math.sqrt(max(total, 0.0))


def phase_field_residuals(traj, obs: ObservationSet, w, epsilon: float = DEFAULT_EPSILON,
                          time_tol: float = 1e-8) -> ResidualVector:
    """L2 mismatch of phase fields and band-extended species on a shared mesh per snapshot."""
    n_s = obs.n_s
    w = _check_weights(w, n_s)
    if not obs.ordered:
        raise ValueError(
            "phase-field residuals need connectivity (ordered observations); "
            "use sharp_residuals for unordered point clouds"
        )
    if traj is None:
        return ResidualVector(np.full(2 * n_s, SENTINEL), n_s, failed=True)
    chi = np.empty(2 * n_s)
    for i, (sim, ob) in enumerate(_aligned_pairs(traj, obs, time_tol)):
        mesh = build_bulk_mesh([sim.points, ob.points], epsilon)
        phi, a = phase_field_fields(sim.points, sim.fields, mesh)
        phi_hat, a_hat = phase_field_fields(ob.points, ob.fields, mesh)
        chi[i] = l2_norm(mesh, phi_hat - phi)
        chi[n_s + i] = l2_norm(mesh, a_hat - a)
    return ResidualVector(np.sqrt(w) * chi, n_s)


def residuals(traj, obs, w, form: str = "sharp", epsilon: float = DEFAULT_EPSILON,
              time_tol: float = 1e-8) -> ResidualVector:
    if form == "sharp":
        return sharp_residuals(traj, obs, w, time_tol)
    if form == "phase_field":
        return phase_field_residuals(traj, obs, w, epsilon, time_tol)
    raise ValueError(f"unknown objective form {form!r}")


class ResidualFunction:
    """``c -> chi(c)``: forward solve from the observed initial data, then compare.

    Picklable, so FD columns or replications can run in worker processes.
    Solver failures yield the sentinel residual instead of raising.
    """

    def __init__(self, obs: ObservationSet, spec: ModelSpec, config: SolverConfig,
                 form: str = "sharp", weights=None, epsilon: float = DEFAULT_EPSILON):
        self.obs = obs
        self.spec = spec
        self.config = config
        self.form = form
        self.epsilon = float(epsilon)
        self.weights = unit_weights(obs.n_s) if weights is None else _check_weights(weights, obs.n_s)
        self.initial = obs.initial_data()
        self.n_s = obs.n_s

    def trajectory(self, c):
        model = bind_parameters(self.spec, c, check_box=False)
        try:
            times = self.obs.times
            return simulate(self.initial, self.config, model, times - times[0])
        except SolverError:
            return None

    def residual_vector(self, c) -> ResidualVector:
        traj = self.trajectory(c)
        return residuals(traj, self.obs, self.weights, self.form, self.epsilon,
                         time_tol=0.5 * self.config.dt)

    def __call__(self, c) -> np.ndarray:
        return self.residual_vector(c).chi

    def with_weights(self, weights) -> "ResidualFunction":
        return ResidualFunction(self.obs, self.spec, self.config, self.form, weights, self.epsilon)


def write_breakdown_csv(path, chi, times) -> None:
    """Per-snapshot position/concentration residual entries."""
    chi = np.asarray(chi, dtype=float)
    n_s = chi.size // 2
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["snapshot", "t", "chi_position", "chi_concentration"])
        for i in range(n_s):
            wr.writerow([i + 1, repr(float(times[i])), repr(float(chi[i])), repr(float(chi[n_s + i]))])


def dump_phase_fields(path, curve, fields, mesh: BulkMesh) -> None:
    """Nodal phase field and extended species as JSON for plotting."""
    phi, a = phase_field_fields(curve, fields, mesh)
    Path(path).write_text(json.dumps({
        "origin": list(mesh.origin), "h": mesh.h, "nx": mesh.nx, "ny": mesh.ny,
        "epsilon": mesh.epsilon, "phi": phi.tolist(), "fields": a.tolist(),
    }))
