"""Recover per-point mass and per-edge compliance from reference trajectories.

The objective is the one-frame prediction error: starting from the reference
state at frame t (positions, finite-difference velocities) and the rig-driven
targets at t+1, simulate one frame and compare the flex points with the
reference at t+1. Parameters live in log space and may be shared by groups.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from .errors import InvalidInputError, SolverDivergenceError
from .skinning import lbs
from .xpbd import COINCIDENT_EPS, SimConfig, SimState, _AIRMESH_MAX_INNER, _AIRMESH_TOL, step

log = logging.getLogger(__name__)

DEFAULT_MASS = 0.01
DEFAULT_COMPLIANCE = 1e-4


@dataclass(eq=False)
class PhysParams:
    """Log-space physical parameters.

    ``mass_groups[i]`` selects the entry of ``log_mass`` used by point i and
    ``compliance_groups[c]`` the entry of ``log_compliance`` used by edge c.
    ``None`` means one parameter per element.
    """

    log_mass: np.ndarray
    log_compliance: np.ndarray
    mass_groups: np.ndarray = None
    compliance_groups: np.ndarray = None

    def __post_init__(self):
        self.log_mass = np.asarray(self.log_mass, dtype=np.float64).reshape(-1)
        self.log_compliance = np.asarray(self.log_compliance, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.log_mass)) and np.all(np.isfinite(self.log_compliance))):
            raise InvalidInputError("log parameters must be finite")
        for name, groups, vals in (
            ("mass_groups", self.mass_groups, self.log_mass),
            ("compliance_groups", self.compliance_groups, self.log_compliance),
        ):
            if groups is not None:
                groups = np.asarray(groups, dtype=np.int64).reshape(-1)
                if groups.size and (groups.min() < 0 or groups.max() >= len(vals)):
                    raise InvalidInputError(f"{name} references a missing parameter")
                setattr(self, name, groups)

    @classmethod
    def initial(cls, n_points, n_edges, *, mass=DEFAULT_MASS, compliance=DEFAULT_COMPLIANCE,
                mass_groups=None, compliance_groups=None):
        nm = n_points if mass_groups is None else int(np.max(mass_groups)) + 1
        nc = n_edges if compliance_groups is None else int(np.max(compliance_groups)) + 1
        return cls(np.full(nm, np.log(mass)), np.full(nc, np.log(compliance)), mass_groups, compliance_groups)

    def copy(self):
        return PhysParams(self.log_mass.copy(), self.log_compliance.copy(), self.mass_groups, self.compliance_groups)

    def masses(self, n_points):
        idx = self.mass_groups
        if idx is None:
            idx = np.arange(len(self.log_mass))
        if len(idx) != n_points:
            raise InvalidInputError(f"mass parameters cover {len(idx)} points, expected {n_points}")
        return np.exp(self.log_mass[idx])

    def compliances(self, n_edges):
        idx = self.compliance_groups
        if idx is None:
            idx = np.arange(len(self.log_compliance))
        if len(idx) != n_edges:
            raise InvalidInputError(f"compliance parameters cover {len(idx)} edges, expected {n_edges}")
        return np.exp(self.log_compliance[idx])

    def to_dict(self):
        d = {
            "masses": np.exp(self.log_mass).tolist(),
            "compliances": np.exp(self.log_compliance).tolist(),
        }
        if self.mass_groups is not None:
            d["mass_groups"] = self.mass_groups.tolist()
        if self.compliance_groups is not None:
            d["compliance_groups"] = self.compliance_groups.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.log(np.asarray(d["masses"], float)),
            np.log(np.asarray(d["compliances"], float)),
            d.get("mass_groups"),
            d.get("compliance_groups"),
        )


VELOCITY_SCHEMES = ("backward", "bdf2")


@dataclass(eq=False)
class ReferenceTrajectory:
    """Tracked positions of every simulated point, shape (T, n, 3).

    Start-of-sample velocities come from ``velocities`` (T, n, 3) when given,
    otherwise from finite differences of the positions: ``"backward"`` is
    (P(t) - P(t-1)) / dt, ``"bdf2"`` the second-order one-sided difference
    (3P(t) - 4P(t-1) + P(t-2)) / (2 dt), falling back to backward at t = 1.
    Both give zero at t = 0.
    """

    positions: np.ndarray
    frame_dt: float
    partition: object
    velocities: np.ndarray = None
    velocity_scheme: str = "backward"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise InvalidInputError("reference positions must have shape (T, n, 3)")
        if len(self.positions) < 2:
            raise InvalidInputError("reference trajectory needs at least 2 frames")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("reference positions must be finite")
        if not (np.isfinite(self.frame_dt) and self.frame_dt > 0):
            raise InvalidInputError("frame_dt must be > 0")
        if self.velocity_scheme not in VELOCITY_SCHEMES:
            raise InvalidInputError(f"velocity_scheme must be one of {VELOCITY_SCHEMES}")
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=np.float64)
            if self.velocities.shape != self.positions.shape or not np.all(np.isfinite(self.velocities)):
                raise InvalidInputError("reference velocities must be finite and match positions")
        self.partition.validate(self.positions.shape[1])

    @property
    def n_frames(self):
        return len(self.positions)

    def velocity(self, t):
        if self.velocities is not None:
            return self.velocities[t]
        P, dt = self.positions, self.frame_dt
        if t == 0:
            return np.zeros_like(P[0])
        if self.velocity_scheme == "bdf2" and t >= 2:
            return (3.0 * P[t] - 4.0 * P[t - 1] + P[t - 2]) / (2.0 * dt)
        return (P[t] - P[t - 1]) / dt


def group_by_kmeans(points, n_groups, seed=0):
    """Cluster labels for ``points`` (e.g. rest positions or edge midpoints)."""
    points = np.asarray(points, dtype=np.float64)
    k = min(n_groups, len(points))
    km = KMeans(n_clusters=k, n_init=4, random_state=seed).fit(points)
    # Relabel by first appearance so group ids are stable under permutation of k-means' label names.
    _, first = np.unique(km.labels_, return_index=True)
    remap = np.empty(k, dtype=np.int64)
    remap[km.labels_[np.sort(first)]] = np.arange(k)
    return remap[km.labels_]


def rigid_prediction(rig, pose, rigid_rest_positions, weights):
    """Rigid points at the next frame: skinning of their rest positions."""
    return lbs(rig, pose, rigid_rest_positions, weights)


def _materialize(params, constraints, partition, n_points):
    w = 1.0 / params.masses(n_points)
    w[partition.rigid_indices] = 0.0
    return w, constraints.with_compliance(params.compliances(constraints.n_distance))


def pbd_forward(state, rigid_targets, params, constraints, partition, config):
    """One frame forward from ``state`` with materialized parameters; returns
    the flex-point positions at the frame end."""
    n = len(state)
    w, cons = _materialize(params, constraints, partition, n)
    st = SimState(state.positions, state.velocities, w)
    return step(st, cons, partition, rigid_targets, config).positions[partition.flex_indices]


def loss_pbd(predicted, reference):
    """Sum of squared position errors over points."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise InvalidInputError(f"shape mismatch {predicted.shape} vs {reference.shape}")
    return float(np.sum((predicted - reference) ** 2))


@dataclass(eq=False)
class _Problem:
    """Everything needed to evaluate the loss for a parameter vector."""

    reference: ReferenceTrajectory
    constraints: object
    config: SimConfig
    base: PhysParams
    fit_mass: bool
    fit_compliance: bool
    rigid_targets: object = None  # callable t -> (n_rigid, 3) or None

    def __post_init__(self):
        self.partition = self.reference.partition
        self.n_points = self.reference.positions.shape[1]

    @property
    def n_mass(self):
        return len(self.base.log_mass) if self.fit_mass else 0

    def vector(self, params):
        parts = []
        if self.fit_mass:
            parts.append(params.log_mass)
        if self.fit_compliance:
            parts.append(params.log_compliance)
        return np.concatenate(parts) if parts else np.empty(0)

    def params(self, theta):
        p = self.base.copy()
        k = 0
        if self.fit_mass:
            p.log_mass = theta[: len(p.log_mass)].copy()
            k = len(p.log_mass)
        if self.fit_compliance:
            p.log_compliance = theta[k: k + len(p.log_compliance)].copy()
        return p

    def targets(self, t):
        """Rigid-point targets for the frame ``t+1``."""
        if self.rigid_targets is not None:
            return self.rigid_targets(t + 1)
        return self.reference.positions[t + 1][self.partition.rigid_indices]

    def start_state(self, t, w):
        ref = self.reference
        return SimState(ref.positions[t], ref.velocity(t), w)

    def sample_loss(self, theta, t):
        p = self.params(theta)
        state = self.start_state(t, 1.0 / p.masses(self.n_points))
        pred = pbd_forward(state, self.targets(t), p, self.constraints, self.partition, self.config)
        return loss_pbd(pred, self.reference.positions[t + 1][self.partition.flex_indices])

    def sample_loss_and_grad_forward(self, theta, t):
        """Loss and its exact gradient by forward-mode differentiation through
        every substep and solver sweep."""
        cfg = self.config
        if cfg.mode != "gauss-seidel":
            raise InvalidInputError("forward-mode gradients require the Gauss-Seidel solver")
        p = self.params(theta)
        part = self.partition
        n = self.n_points
        P = len(theta)
        cons = self.constraints
        w = 1.0 / p.masses(n)
        w[part.rigid_indices] = 0.0
        mass_param = np.full(n, -1, dtype=np.int64)
        comp_param = np.full(cons.n_distance, -1, dtype=np.int64)
        if self.fit_mass:
            mg = np.arange(n) if p.mass_groups is None else p.mass_groups
            mass_param[:] = mg
            mass_param[part.rigid_indices] = -1
        if self.fit_compliance:
            cg = np.arange(cons.n_distance) if p.compliance_groups is None else p.compliance_groups
            comp_param[:] = cg + self.n_mass
        dt = cfg.dt
        alpha_t = np.ascontiguousarray(p.compliances(cons.n_distance) / dt**2)
        targets_vol = cfg.airmesh_threshold * cons.rest_volumes
        rigid = part.rigid_indices
        free = w > 0
        g = np.asarray(cfg.gravity)

        x = self.reference.positions[t].copy()
        v = self.reference.velocity(t).copy()
        start = x[rigid].copy()
        end = np.asarray(self.targets(t), dtype=np.float64)
        dx = np.zeros((n, 3, P))
        dv = np.zeros((n, 3, P))
        lam = np.zeros(cons.n_distance)
        dlam = np.zeros((cons.n_distance, P))
        for s in range(cfg.substeps):
            frac = (s + 1) / cfg.substeps
            x_old = x.copy()
            dx_old = dx.copy()
            v[free] += dt * g
            x[free] += dt * v[free]
            dx[free] += dt * dv[free]
            x[rigid] = (1.0 - frac) * start + frac * end
            dx[rigid] = 0.0
            lam[:] = 0.0
            dlam[:] = 0.0
            _kernels.gauss_seidel_tangent(
                x, dx, w, mass_param, cons.edges, cons.rest_lengths, alpha_t, comp_param,
                lam, dlam, cons.tets, targets_vol, cfg.solver_iterations, COINCIDENT_EPS,
                _AIRMESH_MAX_INNER, _AIRMESH_TOL,
            )
            v = (x - x_old) / dt
            dv = (dx - dx_old) / dt
            if not np.all(np.isfinite(x)):
                raise SolverDivergenceError(s)
        flex = part.flex_indices
        r = x[flex] - self.reference.positions[t + 1][flex]
        loss = float(np.sum(r**2))
        grad = 2.0 * np.einsum("nk,nkp->p", r, dx[flex])
        return loss, grad


@dataclass
class OptimizerConfig:
    """Settings for :func:`optimize`.

    ``gradient`` is ``"fd"`` (central differences in log space, step ``fd_step``)
    or ``"forward"`` (forward-mode through the solver). ``scheme`` is
    ``"rprop"`` (sign-based per-parameter adaptive steps, no momentum) or
    ``"sgd"``.
    """

    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    gradient: str = "fd"
    fd_step: float = 1e-4
    scheme: str = "rprop"
    step_init: float = 0.3
    step_min: float = 1e-6
    step_max: float = 1.0
    learning_rate: float = 0.1
    fit_mass: bool = False
    fit_compliance: bool = True
    divergence_penalty: float = 1e6

    def __post_init__(self):
        if self.gradient not in ("fd", "forward"):
            raise InvalidInputError(f"unknown gradient mode {self.gradient!r}")
        if self.scheme not in ("rprop", "sgd"):
            raise InvalidInputError(f"unknown update scheme {self.scheme!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")


@dataclass(eq=False)
class FitResult:
    params: PhysParams
    loss_history: list
    eval_history: list
    initial_loss: float
    best_loss: float
    diverged_samples: list = field(default_factory=list)


def _sample_eval(problem, theta, t, cfg, want_grad):
    """Loss (and gradient) for one transition; divergence yields the capped penalty."""
    P = len(theta)
    try:
        if not want_grad:
            return problem.sample_loss(theta, t), None
        if cfg.gradient == "forward":
            return problem.sample_loss_and_grad_forward(theta, t)
        loss = problem.sample_loss(theta, t)
        grad = np.empty(P)
        for p in range(P):
            e = np.zeros(P)
            e[p] = cfg.fd_step
            grad[p] = (problem.sample_loss(theta + e, t) - problem.sample_loss(theta - e, t)) / (2 * cfg.fd_step)
        return loss, grad
    except SolverDivergenceError as exc:
        log.warning("forward simulation diverged at t=%d (%s); applying capped penalty", t, exc)
        return None, None


def evaluate(problem, theta, cfg):
    """Mean loss over every transition of the reference."""
    total = 0.0
    T = problem.reference.n_frames
    for t in range(T - 1):
        loss, _ = _sample_eval(problem, theta, t, cfg, False)
        total += cfg.divergence_penalty if loss is None else loss
    return total / (T - 1)


def optimize(reference, constraints, initial_params, config=None, opt=None, *,
             rig=None, poses=None, rigid_rest_positions=None, rigid_weights=None, pose_index="next"):
    """Fit log-parameters to ``reference`` by minimizing the one-frame loss.

    Each epoch visits every transition t -> t+1 once, in an order drawn
    uniformly at random from the seeded generator, and applies one update per
    mini-batch. Rigid targets come from ``rig``/``poses`` skinning when given
    (``poses[t]`` is the pose of frame t), otherwise from the reference. With
    ``pose_index="next"`` the targets for t+1 use ``poses[t+1]``; ``"current"``
    uses ``poses[t]``.
    Returns the best parameters seen (by full-trajectory mean loss).
    """
    config = config or SimConfig(frame_dt=reference.frame_dt)
    opt = opt or OptimizerConfig()
    rigid_targets = None
    if rig is not None:
        if poses is None or rigid_rest_positions is None or rigid_weights is None:
            raise InvalidInputError("rig-driven targets need poses, rigid rest positions and weights")
        if pose_index not in ("next", "current"):
            raise InvalidInputError(f"pose_index must be 'next' or 'current', got {pose_index!r}")
        if len(poses) < reference.n_frames:
            raise InvalidInputError("need one pose per reference frame")
        lag = 0 if pose_index == "next" else 1

        def rigid_targets(t1):
            return rigid_prediction(rig, poses[t1 - lag], rigid_rest_positions, rigid_weights)

    problem = _Problem(reference, constraints, config, initial_params.copy(), opt.fit_mass,
                       opt.fit_compliance, rigid_targets)
    theta = problem.vector(initial_params)
    P = len(theta)
    rng = np.random.Generator(np.random.Philox(opt.seed))
    T = reference.n_frames

    initial_loss = evaluate(problem, theta, opt)
    best_theta, best_loss = theta.copy(), initial_loss
    history, eval_history, diverged = [], [initial_loss], []
    steps = np.full(P, opt.step_init)
    prev_grad = np.zeros(P)

    for epoch in range(opt.epochs):
        order = rng.permutation(T - 1)
        epoch_losses = []
        for b0 in range(0, len(order), opt.batch_size):
            batch = order[b0: b0 + opt.batch_size]
            grad = np.zeros(P)
            n_ok = 0
            for t in batch:
                loss, g = _sample_eval(problem, theta, int(t), opt, True)
                if loss is None:
                    diverged.append((epoch, int(t)))
                    epoch_losses.append(opt.divergence_penalty)
                    continue
                epoch_losses.append(loss)
                grad += g
                n_ok += 1
            if n_ok == 0 or P == 0:
                continue
            grad /= n_ok
            if opt.scheme == "rprop":
                agree = grad * prev_grad
                steps = np.where(agree > 0, np.minimum(steps * 1.2, opt.step_max), steps)
                steps = np.where(agree < 0, np.maximum(steps * 0.5, opt.step_min), steps)
                grad = np.where(agree < 0, 0.0, grad)
                theta = theta - np.sign(grad) * steps
                prev_grad = grad
            else:
                theta = theta - opt.learning_rate * grad
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        full = evaluate(problem, theta, opt)
        eval_history.append(full)
        if full < best_loss:
            best_theta, best_loss = theta.copy(), full
        log.info("epoch %d: mean sample loss %.6g, full loss %.6g", epoch, history[-1], full)

    return FitResult(problem.params(best_theta), history, eval_history, initial_loss, best_loss, diverged)


def loss_gradient(reference, constraints, params, config, t, *, mode="forward", fit_mass=True,
                  fit_compliance=True, fd_step=1e-4):
    """Loss of transition ``t`` and its gradient w.r.t. the log-parameters
    (masses first, then compliances)."""
    problem = _Problem(reference, constraints, config, params.copy(), fit_mass, fit_compliance)
    theta = problem.vector(params)
    opt = OptimizerConfig(gradient=mode, fd_step=fd_step)
    loss, grad = _sample_eval(problem, theta, t, opt, True)
    if loss is None:
        raise SolverDivergenceError(-1, message=f"forward simulation diverged at t={t}")
    return loss, grad


class PhysParamEstimator(BaseEstimator):
    """Estimator wrapper around :func:`optimize`.

    ``fit(X)`` takes reference positions of shape (T, n, 3); the constraint
    set, partition and solver settings are supplied as fit arguments.
    ``n_groups`` controls k-means grouping when explicit group maps are not
    given (``None`` keeps one parameter per element).
    """

    def __init__(self, n_groups=8, epochs=60, batch_size=8, gradient="fd", scheme="rprop",
                 fit_mass=False, init_mass=DEFAULT_MASS, init_compliance=DEFAULT_COMPLIANCE,
                 velocity_scheme="backward", seed=0):
        self.n_groups = n_groups
        self.epochs = epochs
        self.batch_size = batch_size
        self.gradient = gradient
        self.scheme = scheme
        self.fit_mass = fit_mass
        self.init_mass = init_mass
        self.init_compliance = init_compliance
        self.velocity_scheme = velocity_scheme
        self.seed = seed

    def fit(self, X, y=None, *, constraints, partition, frame_dt, config=None,
            mass_groups=None, compliance_groups=None, init_params=None, velocities=None, **rig_kwargs):
        ref = ReferenceTrajectory(X, frame_dt, partition, velocities, self.velocity_scheme)
        n = ref.positions.shape[1]
        rest = ref.positions[0]
        if init_params is None:
            if compliance_groups is None and self.n_groups is not None:
                mid = 0.5 * (rest[constraints.edges[:, 0]] + rest[constraints.edges[:, 1]])
                compliance_groups = group_by_kmeans(mid, self.n_groups, self.seed)
            if mass_groups is None and self.n_groups is not None:
                mass_groups = group_by_kmeans(rest, self.n_groups, self.seed)
            init_params = PhysParams.initial(
                n, constraints.n_distance, mass=self.init_mass, compliance=self.init_compliance,
                mass_groups=mass_groups, compliance_groups=compliance_groups,
            )
        config = config or SimConfig(frame_dt=frame_dt)
        if config.frame_dt != frame_dt:
            config = replace(config, frame_dt=frame_dt)
        opt = OptimizerConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                              gradient=self.gradient, scheme=self.scheme, fit_mass=self.fit_mass)
        self.result_ = optimize(ref, constraints, init_params, config, opt, **rig_kwargs)
        self.params_ = self.result_.params
        self.loss_history_ = self.result_.loss_history
        self.constraints_ = constraints
        self.partition_ = partition
        self.config_ = config
        return self

    def predict(self, X, velocities=None, rigid_targets=None):
        """One-frame flex prediction from positions ``X`` (n, 3)."""
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float64)
        state = SimState(X, velocities, np.ones(len(X)))
        if rigid_targets is None:
            rigid_targets = X[self.partition_.rigid_indices]
        return pbd_forward(state, rigid_targets, self.params_, self.constraints_, self.partition_, self.config_)
