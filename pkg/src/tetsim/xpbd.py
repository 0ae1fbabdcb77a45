"""Extended position-based dynamics solver.

A frame is split into substeps. Each substep places rigidly driven points on
the straight line between their frame-start and frame-end positions, predicts
free points with symplectic Euler, projects distance and AirMesh constraints
with Gauss-Seidel sweeps, and recovers velocities from the position change.
"""
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from ._validation import check_points, check_scalar, check_vector
from .errors import (
    InvalidInputError,
    SingularGradientError,
    SolverDivergenceError,
    UnresolvableInversionWarning,
)
from .geom import signed_volumes

COINCIDENT_EPS = 1e-9
DEFAULT_GRAVITY = (0.0, -9.81, 0.0)
AIRMESH_THRESHOLD = 0.1
_AIRMESH_MAX_INNER = 50
_AIRMESH_TOL = 1e-13


@dataclass(eq=False)
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray

    def __post_init__(self):
        self.positions = check_points(self.positions, name="positions")
        n = len(self.positions)
        if self.velocities is None:
            self.velocities = np.zeros((n, 3))
        self.velocities = check_points(self.velocities, name="velocities")
        self.inverse_masses = np.asarray(self.inverse_masses, dtype=np.float64).reshape(-1)
        if len(self.velocities) != n or len(self.inverse_masses) != n:
            raise InvalidInputError("positions, velocities and inverse_masses must have equal length")
        if not np.all(np.isfinite(self.inverse_masses)) or np.any(self.inverse_masses < 0):
            raise InvalidInputError("inverse masses must be finite and >= 0")

    @classmethod
    def at_rest(cls, positions, inverse_masses):
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions, np.zeros_like(positions), inverse_masses)

    def copy(self):
        return SimState(self.positions.copy(), self.velocities.copy(), self.inverse_masses.copy())

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class DistanceConstraint:
    endpoints: tuple
    rest_length: float
    compliance: float = 0.0

    def __post_init__(self):
        a, b = (int(i) for i in self.endpoints)
        if a == b:
            raise InvalidInputError("distance constraint endpoints must differ")
        check_scalar(self.rest_length, "rest_length", min_val=0, strict=True)
        check_scalar(self.compliance, "compliance", min_val=0)
        object.__setattr__(self, "endpoints", (a, b))


@dataclass(frozen=True, eq=False)
class AirMeshConstraint:
    tet: tuple
    rest_signed_volume: float

    def __post_init__(self):
        tet = tuple(int(i) for i in self.tet)
        if len(tet) != 4 or len(set(tet)) != 4:
            raise InvalidInputError("AirMesh tet needs 4 distinct indices")
        check_scalar(self.rest_signed_volume, "rest_signed_volume", min_val=0, strict=True)
        object.__setattr__(self, "tet", tet)


@dataclass(frozen=True, eq=False)
class SimConfig:
    frame_dt: float = 1.0 / 30.0
    substeps: int = 10
    solver_iterations: int = 20
    gravity: tuple = DEFAULT_GRAVITY
    airmesh_threshold: float = AIRMESH_THRESHOLD
    mode: str = "gauss-seidel"

    def __post_init__(self):
        check_scalar(self.frame_dt, "frame_dt", min_val=0, strict=True)
        check_scalar(self.substeps, "substeps", min_val=1, integer=True)
        check_scalar(self.solver_iterations, "solver_iterations", min_val=1, integer=True)
        object.__setattr__(self, "gravity", tuple(float(g) for g in check_vector(self.gravity, 3, name="gravity")))
        if self.mode not in ("gauss-seidel", "jacobi"):
            raise InvalidInputError(f"unknown solver mode {self.mode!r}")

    @property
    def dt(self):
        return self.frame_dt / self.substeps


@dataclass(frozen=True, eq=False)
class Partition:
    """Rigid (kinematically driven) and flex (simulated) point indices."""

    rigid_indices: np.ndarray
    flex_indices: np.ndarray

    def __post_init__(self):
        r = np.unique(np.asarray(self.rigid_indices, dtype=np.int64))
        f = np.unique(np.asarray(self.flex_indices, dtype=np.int64))
        if np.intersect1d(r, f).size:
            raise InvalidInputError("rigid and flex index sets overlap")
        object.__setattr__(self, "rigid_indices", r)
        object.__setattr__(self, "flex_indices", f)

    @classmethod
    def from_rigid(cls, rigid_indices, n):
        rigid = np.unique(np.asarray(rigid_indices, dtype=np.int64))
        return cls(rigid, np.setdiff1d(np.arange(n), rigid))

    @classmethod
    def from_labels(cls, labels, rigid_labels=("body", "smpl", "rigid")):
        labels = np.asarray(labels)
        rigid = np.isin(labels, rigid_labels)
        return cls(np.flatnonzero(rigid), np.flatnonzero(~rigid))

    @property
    def n_points(self):
        return len(self.rigid_indices) + len(self.flex_indices)

    def validate(self, n):
        both = np.concatenate([self.rigid_indices, self.flex_indices])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise InvalidInputError(f"partition does not cover exactly {n} points")


@dataclass(eq=False)
class Constraints:
    """Structure-of-arrays constraint set consumed by the solver."""

    edges: np.ndarray = field(default_factory=lambda: np.empty((0, 2), np.int64))
    rest_lengths: np.ndarray = field(default_factory=lambda: np.empty(0))
    compliance: np.ndarray = field(default_factory=lambda: np.empty(0))
    tets: np.ndarray = field(default_factory=lambda: np.empty((0, 4), np.int64))
    rest_volumes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.edges = np.ascontiguousarray(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        m = len(self.edges)
        self.rest_lengths = np.ascontiguousarray(np.asarray(self.rest_lengths, dtype=np.float64).reshape(-1))
        comp = np.asarray(self.compliance, dtype=np.float64)
        self.compliance = np.ascontiguousarray(np.broadcast_to(comp, (m,)).copy())
        self.tets = np.ascontiguousarray(np.asarray(self.tets, dtype=np.int64).reshape(-1, 4))
        self.rest_volumes = np.ascontiguousarray(np.asarray(self.rest_volumes, dtype=np.float64).reshape(-1))
        if len(self.rest_lengths) != m:
            raise InvalidInputError("rest_lengths must match edges")
        if len(self.rest_volumes) != len(self.tets):
            raise InvalidInputError("rest_volumes must match tets")
        if np.any(self.rest_lengths <= 0) or np.any(self.compliance < 0):
            raise InvalidInputError("rest lengths must be > 0 and compliance >= 0")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise InvalidInputError("distance constraint endpoints must differ")
        if np.any(self.rest_volumes <= 0):
            raise InvalidInputError("AirMesh rest volumes must be > 0 (orient tets positively)")

    @classmethod
    def from_edges(cls, positions, edges, compliance=0.0, tets=None):
        """Rest lengths and volumes measured from ``positions``."""
        positions = np.asarray(positions, dtype=np.float64)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        rest = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
        if tets is None:
            tets = np.empty((0, 4), np.int64)
        tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        return cls(edges, rest, compliance, tets, signed_volumes(positions, tets))

    @classmethod
    def from_mesh(cls, positions, mesh, compliance=1e-4, airmesh=True):
        return cls.from_edges(positions, mesh.edges, compliance, mesh.tets if airmesh else None)

    @classmethod
    def from_lists(cls, distance=(), airmesh=()):
        return cls(
            [c.endpoints for c in distance],
            [c.rest_length for c in distance],
            [c.compliance for c in distance],
            [c.tet for c in airmesh],
            [c.rest_signed_volume for c in airmesh],
        )

    def with_compliance(self, compliance):
        return replace(self, compliance=np.broadcast_to(np.asarray(compliance, float), (self.n_distance,)).copy())

    @property
    def n_distance(self):
        return len(self.edges)

    @property
    def n_airmesh(self):
        return len(self.tets)

    def max_index(self):
        hi = -1
        if self.n_distance:
            hi = max(hi, int(self.edges.max()))
        if self.n_airmesh:
            hi = max(hi, int(self.tets.max()))
        return hi


def predict_positions(state, dt, gravity=DEFAULT_GRAVITY):
    """Symplectic Euler predictor: ``v' = v + dt*g``, ``x = x + dt*v'``.

    Points with zero inverse mass are returned unchanged.
    """
    check_scalar(dt, "dt", min_val=0, strict=True)
    g = check_vector(gravity, 3, name="gravity")
    x = state.positions.copy()
    free = state.inverse_masses > 0
    x[free] += dt * (state.velocities[free] + dt * g)
    return x


def project_distance(positions, constraint, inverse_masses, accumulated_lambda, dt):
    """Single XPBD distance projection.

    Returns ``(delta_a, delta_b, new_lambda)``.
    """
    check_scalar(dt, "dt", min_val=0, strict=True)
    a, b = constraint.endpoints
    x = np.asarray(positions, dtype=np.float64)
    w = np.asarray(inverse_masses, dtype=np.float64)
    d = x[a] - x[b]
    length = float(np.linalg.norm(d))
    if length < COINCIDENT_EPS:
        raise SingularGradientError(f"endpoints {a} and {b} coincide (|d|={length:.3g})")
    n = d / length
    C = length - constraint.rest_length
    alpha_t = constraint.compliance / dt**2
    denom = w[a] + w[b] + alpha_t
    if denom == 0.0:
        return np.zeros(3), np.zeros(3), accumulated_lambda
    dl = (-C - alpha_t * accumulated_lambda) / denom
    return w[a] * dl * n, -w[b] * dl * n, accumulated_lambda + dl


def project_airmesh(positions, constraint, inverse_masses, threshold=AIRMESH_THRESHOLD):
    """Unilateral anti-inversion projection of one tetrahedron.

    Inactive (all-zero deltas) while the signed volume is at least
    ``threshold * rest_signed_volume``. Otherwise the volume constraint is
    projected to equality with zero compliance, iterating the linearized
    update on this single constraint until the target is met.
    Returns per-vertex deltas, shape (4, 3).
    """
    x = np.array(positions, dtype=np.float64)
    w = np.ascontiguousarray(inverse_masses, dtype=np.float64)
    tet = np.asarray(constraint.tet, dtype=np.int64)
    before = x[tet].copy()
    target = threshold * constraint.rest_signed_volume
    flag = _kernels.airmesh_project_one(x, w, tet, target, _AIRMESH_MAX_INNER, _AIRMESH_TOL)
    if flag:
        warnings.warn(f"cannot resolve inversion of tet {tuple(tet)}: all vertices pinned", UnresolvableInversionWarning)
    return x[tet] - before


def update_velocities(old_positions, new_positions, dt):
    check_scalar(dt, "dt", min_val=0, strict=True)
    return (np.asarray(new_positions, dtype=np.float64) - np.asarray(old_positions, dtype=np.float64)) / dt


def _driver_array(driver_targets, partition, n):
    targets = np.asarray(driver_targets, dtype=np.float64)
    n_rigid = len(partition.rigid_indices)
    if targets.shape == (n_rigid, 3):
        return targets
    if targets.shape == (n, 3):
        return targets[partition.rigid_indices]
    raise InvalidInputError(f"driver_targets must have shape ({n_rigid}, 3) or ({n}, 3), got {targets.shape}")


def step(state, constraints, partition, driver_targets, config, *, diagnostics=None):
    """Advance ``state`` by one frame.

    ``driver_targets`` holds frame-end positions of the rigid points, either
    aligned with ``partition.rigid_indices`` or as a full (n, 3) array.
    Lagrange multipliers are reset at the start of every substep. If
    ``diagnostics`` is a dict, skip/inversion counters are accumulated in it.
    Raises :class:`SolverDivergenceError` on the first non-finite substep.
    """
    n = len(state)
    partition.validate(n)
    if constraints.max_index() >= n:
        raise InvalidInputError("constraint index out of range")
    rigid = partition.rigid_indices
    end = _driver_array(driver_targets, partition, n)
    if not np.all(np.isfinite(end)):
        raise InvalidInputError("driver targets must be finite")

    x = state.positions.copy()
    v = state.velocities.copy()
    w = state.inverse_masses.copy()
    w[rigid] = 0.0
    start = x[rigid].copy()
    free = w > 0
    g = np.asarray(config.gravity)
    dt = config.dt
    alpha_t = constraints.compliance / dt**2
    targets = config.airmesh_threshold * constraints.rest_volumes
    lam = np.zeros(constraints.n_distance)
    sweep = _kernels.gauss_seidel if config.mode == "gauss-seidel" else _kernels.jacobi
    skipped = unresolved = 0

    for s in range(config.substeps):
        frac = (s + 1) / config.substeps
        x_old = x.copy()
        v[free] += dt * g
        x[free] += dt * v[free]
        x[rigid] = (1.0 - frac) * start + frac * end
        lam[:] = 0.0
        sk, un = sweep(
            x, w, constraints.edges, constraints.rest_lengths, alpha_t, lam,
            constraints.tets, targets, config.solver_iterations, COINCIDENT_EPS,
            _AIRMESH_MAX_INNER, _AIRMESH_TOL,
        )
        skipped += sk
        unresolved += un
        v = (x - x_old) / dt
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise SolverDivergenceError(s)

    if diagnostics is not None:
        diagnostics["skipped_coincident"] = diagnostics.get("skipped_coincident", 0) + skipped
        diagnostics["unresolved_inversions"] = diagnostics.get("unresolved_inversions", 0) + unresolved
    if unresolved:
        warnings.warn(f"{unresolved} AirMesh projections could not move a fully pinned tet", UnresolvableInversionWarning)
    return SimState(x, v, state.inverse_masses.copy())


def simulate(state, constraints, partition, driver_frames, config, *, diagnostics=None):
    """Run one :func:`step` per entry of ``driver_frames``; returns the list of
    frame-end states (the input state is not included)."""
    out = []
    for f, targets in enumerate(driver_frames):
        try:
            state = step(state, constraints, partition, targets, config, diagnostics=diagnostics)
        except SolverDivergenceError as exc:
            raise SolverDivergenceError(exc.substep, frame=f) from exc
        out.append(state)
    return out
