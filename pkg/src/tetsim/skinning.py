"""Linear blend skinning over a generic joint tree."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ._validation import check_points, check_vector
from .errors import InvalidInputError, InvalidRigError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class Rig:
    """Skinned template.

    ``rest_transforms[j]`` is joint j's world transform (4x4) in the rest
    pose; ``skin_weights`` is a dense (V, J) matrix. ``shape_basis`` has shape
    (K, V, 3) and is blended by the shape coefficients before posing.
    """

    parents: np.ndarray
    rest_transforms: np.ndarray
    rest_vertices: np.ndarray
    skin_weights: np.ndarray
    shape_basis: np.ndarray = None
    marker_vertices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    joint_names: tuple = ()

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        J = len(parents)
        rest = np.asarray(self.rest_transforms, dtype=np.float64)
        if J == 0:
            raise InvalidRigError("rig has no joints")
        if rest.shape != (J, 4, 4):
            raise InvalidRigError(f"rest_transforms must have shape ({J}, 4, 4), got {rest.shape}")
        verts = check_points(self.rest_vertices, name="rest_vertices") if len(self.rest_vertices) else np.empty((0, 3))
        W = np.asarray(self.skin_weights, dtype=np.float64).reshape(len(verts), -1) if len(verts) else np.empty((0, J))
        if W.shape[1] != J:
            raise InvalidRigError(f"skin weights reference {W.shape[1]} joints, rig has {J}")
        _check_weights(W)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_transforms", rest)
        object.__setattr__(self, "rest_vertices", verts)
        object.__setattr__(self, "skin_weights", W)
        object.__setattr__(self, "_order", _topological_order(parents))
        if self.shape_basis is not None:
            basis = np.asarray(self.shape_basis, dtype=np.float64)
            if basis.ndim != 3 or basis.shape[1:] != (len(verts), 3):
                raise InvalidRigError(f"shape_basis must have shape (K, {len(verts)}, 3)")
            object.__setattr__(self, "shape_basis", basis)
        markers = np.asarray(self.marker_vertices, dtype=np.int64).reshape(-1)
        if markers.size and (markers.min() < 0 or markers.max() >= len(verts)):
            raise InvalidRigError("marker index out of range")
        object.__setattr__(self, "marker_vertices", markers)

    @classmethod
    def from_joint_positions(cls, parents, joint_positions, rest_vertices, skin_weights, **kwargs):
        """Rig whose rest joint frames are pure translations."""
        jp = np.asarray(joint_positions, dtype=np.float64).reshape(-1, 3)
        rest = np.tile(np.eye(4), (len(jp), 1, 1))
        rest[:, :3, 3] = jp
        return cls(parents, rest, rest_vertices, skin_weights, **kwargs)

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_vertices(self):
        return len(self.rest_vertices)

    @property
    def n_shape(self):
        return 0 if self.shape_basis is None else len(self.shape_basis)

    @property
    def joint_positions(self):
        return self.rest_transforms[:, :3, 3]

    def shaped_vertices(self, shape=None):
        if shape is None or self.shape_basis is None:
            return self.rest_vertices.copy()
        shape = check_vector(shape, self.n_shape, name="shape")
        return self.rest_vertices + np.tensordot(shape, self.shape_basis, axes=1)

    def posed_vertices(self, pose, shape=None):
        return lbs(self, pose, self.shaped_vertices(shape), self.skin_weights)


def _check_weights(W):
    if np.any(~np.isfinite(W)) or np.any(W < 0):
        raise InvalidRigError("skin weights must be finite and nonnegative")
    if len(W) and np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-6:
        raise InvalidRigError("per-vertex skin weights must sum to 1")


def _topological_order(parents):
    J = len(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise InvalidRigError(f"joint tree must have exactly one root, found {len(roots)}")
    if np.any(parents >= J):
        raise InvalidRigError("parent index out of range")
    children = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    order, stack = [], [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != J:
        raise InvalidRigError("joint tree contains a cycle or disconnected joints")
    return np.array(order)


def sparse_to_dense_weights(entries, n_joints):
    """Convert per-vertex ``[(joint, weight), ...]`` lists to a (V, J) matrix."""
    W = np.zeros((len(entries), n_joints))
    for v, pairs in enumerate(entries):
        for j, wt in pairs:
            if not 0 <= int(j) < n_joints:
                raise InvalidRigError(f"vertex {v} references missing joint {j}")
            W[v, int(j)] += wt
    return W


@dataclass(frozen=True, eq=False)
class Pose:
    """Per-joint axis-angle rotations (radians) and a root translation (m)."""

    rotations: np.ndarray
    translation: np.ndarray = None

    def __post_init__(self):
        rot = np.array(self.rotations, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(rot)):
            raise InvalidInputError("pose rotations must be finite")
        angle = np.linalg.norm(rot, axis=1)
        wrap = angle >= TWO_PI
        if np.any(wrap):
            rot[wrap] *= (np.mod(angle[wrap], TWO_PI) / angle[wrap])[:, None]
        t = np.zeros(3) if self.translation is None else check_vector(self.translation, 3, name="translation")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, n_joints):
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @property
    def n_joints(self):
        return len(self.rotations)

    def to_vector(self):
        return np.concatenate([self.rotations.ravel(), self.translation])

    @classmethod
    def from_vector(cls, vec, n_joints):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: 3 * n_joints].reshape(n_joints, 3), vec[3 * n_joints: 3 * n_joints + 3])


def joint_world_transforms(rig, pose):
    """World transform of every joint under ``pose``, shape (J, 4, 4)."""
    if pose.n_joints != rig.n_joints:
        raise InvalidRigError(f"pose has {pose.n_joints} joints, rig has {rig.n_joints}")
    rest = rig.rest_transforms
    local_rot = np.tile(np.eye(4), (rig.n_joints, 1, 1))
    local_rot[:, :3, :3] = Rotation.from_rotvec(pose.rotations).as_matrix()
    G = np.empty_like(rest)
    for j in rig._order:
        p = rig.parents[j]
        if p < 0:
            G[j] = rest[j] @ local_rot[j]
            G[j, :3, 3] += pose.translation
        else:
            G[j] = G[p] @ np.linalg.solve(rest[p], rest[j]) @ local_rot[j]
    return G


def skinning_transforms(rig, pose):
    """Per-joint transforms mapping rest-space points to posed space."""
    G = joint_world_transforms(rig, pose)
    return G @ np.linalg.inv(rig.rest_transforms)


def _blended(rig, pose, weights):
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != rig.n_joints:
        raise InvalidRigError(f"weights must have shape (n, {rig.n_joints}), got {W.shape}")
    A = skinning_transforms(rig, pose)
    return np.einsum("nj,jab->nab", W, A)


def lbs(rig, pose, points, weights, shape_offsets=None):
    """Pose rest-space ``points`` with per-point joint ``weights`` (n, J).

    ``shape_offsets`` (n, 3), if given, is added in rest space before posing.
    """
    points = check_points(points, name="points")
    if shape_offsets is not None:
        points = points + np.asarray(shape_offsets, dtype=np.float64)
    M = _blended(rig, pose, weights)
    return np.einsum("nab,nb->na", M[:, :3, :3], points) + M[:, :3, 3]


def unpose(rig, pose, points, weights):
    """Inverse of :func:`lbs` for fixed weights: posed points back to rest space."""
    points = check_points(points, name="points")
    M = _blended(rig, pose, weights)
    return np.linalg.solve(M[:, :3, :3], (points - M[:, :3, 3])[..., None])[..., 0]


def bind_gaussians(rig, points, pose=None, shape=None):
    """Copy each point's skin weights from its nearest rig vertex.

    Distances are measured against the rig posed at ``pose`` (rest pose if
    omitted). Equidistant vertices resolve to the lowest index.
    """
    if rig.n_vertices == 0:
        raise InvalidRigError("rig has no vertices to bind to")
    points = check_points(points, name="points")
    verts = rig.shaped_vertices(shape) if pose is None else rig.posed_vertices(pose, shape)
    return rig.skin_weights[nearest_vertex(verts, points)].copy()


def nearest_vertex(vertices, points):
    """Index of the nearest vertex per point; ties go to the lowest index."""
    tree = cKDTree(vertices)
    kq = min(2, len(vertices))
    d, idx = tree.query(points, k=kq)
    if kq == 1:
        return np.asarray(idx, dtype=np.int64)
    d, idx = np.atleast_2d(d), np.atleast_2d(idx)
    out = idx[:, 0].astype(np.int64)
    for i in np.flatnonzero(d[:, 1] == d[:, 0]):
        dd = np.linalg.norm(vertices - points[i], axis=1)
        out[i] = np.flatnonzero(dd == dd.min())[0]
    return out


def interpolate_driver(start, end, s):
    """Per-point ``(1-s)*start + s*end``."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    if start.shape != end.shape:
        raise InvalidInputError("start and end must have equal shapes")
    return (1.0 - s) * start + s * end
