"""Small procedural scenes used by the CLI demos and the acceptance tests."""
from dataclasses import dataclass

import numpy as np

from .xpbd import Constraints, Partition, SimConfig, SimState, simulate


@dataclass(eq=False)
class Scene:
    rest_positions: np.ndarray
    constraints: Constraints
    partition: Partition
    masses: np.ndarray
    config: SimConfig
    edge_material: np.ndarray = None

    def initial_state(self):
        w = 1.0 / self.masses
        return SimState.at_rest(self.rest_positions, w)


def grid_points(nx, ny, spacing):
    """Vertical grid in the x-y plane; row 0 is the top (y = 0), rows go down."""
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    pts = np.zeros((nx * ny, 3))
    pts[:, 0] = ii.ravel() * spacing
    pts[:, 1] = -jj.ravel() * spacing
    return pts


def grid_edges(nx, ny, shear=True):
    """Structural (and optionally both diagonal) edges of an nx-by-ny grid."""
    idx = np.arange(nx * ny).reshape(ny, nx)
    edges = [
        np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1),
        np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1),
    ]
    if shear:
        edges.append(np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], 1))
        edges.append(np.stack([idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()], 1))
    return np.concatenate(edges).astype(np.int64)


def hanging_grid(nx=10, ny=10, spacing=0.1, mass=0.01, compliance=1e-3, config=None):
    """Grid pinned along its top row, hanging under gravity."""
    pts = grid_points(nx, ny, spacing)
    edges = grid_edges(nx, ny)
    cons = Constraints.from_edges(pts, edges, compliance)
    part = Partition.from_rigid(np.arange(nx), len(pts))
    return Scene(pts, cons, part, np.full(len(pts), float(mass)), config or SimConfig())


def two_material_cloth(nx=10, ny=20, spacing=0.05, mass=0.01, stiff=1e-6, soft=1e-2, config=None):
    """Grid whose upper half uses compliance ``stiff`` and lower half ``soft``.

    An edge belongs to the lower material when both endpoints lie in the lower
    half of the rows. ``edge_material`` holds 0 (stiff) or 1 (soft).
    """
    pts = grid_points(nx, ny, spacing)
    edges = grid_edges(nx, ny)
    rows = np.arange(len(pts)) // nx
    lower = (rows[edges[:, 0]] >= ny // 2) & (rows[edges[:, 1]] >= ny // 2)
    material = lower.astype(np.int64)
    compliance = np.where(lower, soft, stiff)
    cons = Constraints.from_edges(pts, edges, compliance)
    part = Partition.from_rigid(np.arange(nx), len(pts))
    return Scene(pts, cons, part, np.full(len(pts), float(mass)), config or SimConfig(), material)


def swing_driver(base, n_frames, frame_dt, amplitude=0.1, period=1.0, axis=(1.0, 0.0, 0.5)):
    """Targets for frames 1..n_frames: ``base`` (rigid rest positions) swaying
    sinusoidally along ``axis``. Shape (n_frames, len(base), 3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    base = np.asarray(base, dtype=np.float64)
    t = np.arange(1, n_frames + 1) * frame_dt
    disp = amplitude * np.sin(2 * np.pi * t / period)
    return base[None] + disp[:, None, None] * axis


def scene_swing(scene, n_frames, **kwargs):
    return swing_driver(scene.rest_positions[scene.partition.rigid_indices], n_frames, scene.config.frame_dt, **kwargs)


def run(scene, driver_frames, state=None):
    """Simulate and return positions of shape (F+1, n, 3) including frame 0."""
    state = state or scene.initial_state()
    states = simulate(state, scene.constraints, scene.partition, driver_frames, scene.config)
    return np.stack([state.positions] + [s.positions for s in states])


def tube_rig(n_joints=4, segment=0.25, radius=0.08, rings_per_segment=4, ring_size=12, n_shape=2,
             n_markers=6):
    """A chain of joints along -y wrapped in a tube of vertices.

    Skin weights blend the two nearest joints along the chain; the shape
    basis scales the radius (component 0) and the length (component 1).
    """
    from .skinning import Rig

    parents = np.arange(-1, n_joints - 1)
    joints = np.zeros((n_joints, 3))
    joints[:, 1] = -segment * np.arange(n_joints)
    n_rings = rings_per_segment * n_joints + 1
    ys = -np.linspace(0.0, segment * n_joints, n_rings)
    ang = 2 * np.pi * np.arange(ring_size) / ring_size
    Y, A = np.meshgrid(ys, ang, indexing="ij")
    verts = np.stack([radius * np.cos(A).ravel(), Y.ravel(), radius * np.sin(A).ravel()], axis=1)

    # Linear falloff between consecutive joints along the chain.
    s = np.clip(-verts[:, 1] / segment, 0.0, n_joints - 1)
    lo = np.minimum(np.floor(s).astype(np.int64), n_joints - 1)
    hi = np.minimum(lo + 1, n_joints - 1)
    frac = s - lo
    W = np.zeros((len(verts), n_joints))
    np.add.at(W, (np.arange(len(verts)), lo), 1.0 - frac)
    np.add.at(W, (np.arange(len(verts)), hi), frac)

    basis = np.zeros((n_shape, len(verts), 3))
    if n_shape > 0:
        basis[0, :, 0] = 0.2 * verts[:, 0]
        basis[0, :, 2] = 0.2 * verts[:, 2]
    if n_shape > 1:
        basis[1, :, 1] = 0.1 * verts[:, 1]
    step = max(1, len(verts) // max(n_markers, 1))
    markers = np.arange(0, len(verts), step)[:n_markers]
    return Rig.from_joint_positions(parents, joints, verts, W, shape_basis=basis if n_shape else None,
                                    marker_vertices=markers,
                                    joint_names=tuple(f"j{k}" for k in range(n_joints)))


def ring_cameras(n=3, distance=2.0, size=96, focal=80.0, center=(0.0, -0.5, 0.0)):
    """Cameras on a horizontal ring looking at ``center``."""
    from .posefit import Camera

    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = center + distance * np.array([np.sin(a), 0.0, np.cos(a)])
        fwd = center - eye
        fwd /= np.linalg.norm(fwd)
        down = np.array([0.0, -1.0, 0.0])
        right = np.cross(down, fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cams.append(Camera(focal, focal, size / 2, size / 2, R, -R @ eye, size, size))
    return cams
