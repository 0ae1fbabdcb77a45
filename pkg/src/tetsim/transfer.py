"""Carry the simulated subset's deformation over to the dense Gaussian cloud.

Unsampled points are embedded either inside a tetrahedron (barycentric
coordinates) or, when they fall outside every tetrahedron, relative to the
closest face: barycentric coordinates of the point's projection onto the face
plane plus an offset along the face normal. Gaussian orientations follow the
local rotation estimated from each point's three nearest neighbours.
"""
import itertools
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._bvh import BVH, TET_FACES
from ._validation import check_index_array, check_points
from .errors import DegenerateGeometryError, InvalidInputError
from .geom import build_knn

INTERIOR = 0
EXTERIOR = 1
LABELS = ("body", "cloth")


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Dense anisotropic point set. Quaternions are (w, x, y, z)."""

    positions: np.ndarray
    rotations: np.ndarray = None
    scales: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        pos = check_points(self.positions, name="positions")
        n = len(pos)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)) if self.rotations is None else np.asarray(self.rotations, float)
        scl = np.full((n, 3), 0.01) if self.scales is None else np.asarray(self.scales, float)
        lab = np.full(n, "cloth") if self.labels is None else np.asarray(self.labels).astype(str)
        if rot.shape != (n, 4) or scl.shape != (n, 3) or lab.shape != (n,):
            raise InvalidInputError("rotations (n,4), scales (n,3) and labels (n,) must match positions")
        if np.any(np.abs(np.linalg.norm(rot, axis=1) - 1.0) > 1e-6):
            raise InvalidInputError("rotations must be unit quaternions (within 1e-6)")
        if not np.all(np.isfinite(scl)) or np.any(scl <= 0):
            raise InvalidInputError("scales must be finite and > 0")
        bad = ~np.isin(lab, LABELS)
        if np.any(bad):
            raise InvalidInputError(f"labels must be one of {LABELS}, got {lab[bad][0]!r}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "scales", scl)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class Embedding:
    """Per embedded point: kind, tet, and either 4 tet barycentrics (interior)
    or face vertex triple, 3 face barycentrics, normal offset and the sign
    that orients the face normal toward the point (exterior)."""

    point_indices: np.ndarray
    kind: np.ndarray
    tet: np.ndarray
    bary: np.ndarray
    face: np.ndarray
    offset: np.ndarray
    normal_sign: np.ndarray

    def __len__(self):
        return len(self.kind)

    @property
    def interior(self):
        return self.kind == INTERIOR

    @property
    def exterior(self):
        return self.kind == EXTERIOR


def _face_plane_coords(p, a, b, c):
    """Unclamped barycentrics of p's projection onto plane abc, and signed
    distance along the unit normal (b-a)x(c-a)."""
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / nn
    d = np.einsum("ij,ij->i", p - a, n)
    q = p - d[:, None] * n
    v0, v1, v2 = b - a, c - a, q - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    bv = (d11 * d20 - d01 * d21) / den
    bw = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - bv - bw, bv, bw], axis=1), d


def embed_points(queries, sampled_positions, mesh, *, tol=1e-9, bvh=None):
    """Embed arbitrary ``queries`` in ``mesh`` (indices into ``sampled_positions``)."""
    queries = check_points(queries, name="queries")
    sampled = check_points(sampled_positions, name="sampled_positions")
    tets = np.asarray(mesh.tets, dtype=np.int64)
    if len(tets) == 0:
        raise InvalidInputError("cannot embed into an empty mesh")
    if bvh is None:
        bvh = BVH(sampled, tets)
    nq = len(queries)
    tet, bary = bvh.locate(queries, tol)
    kind = np.where(tet >= 0, INTERIOR, EXTERIOR).astype(np.int8)
    face = np.full((nq, 3), -1, dtype=np.int64)
    offset = np.zeros(nq)
    sign = np.ones(nq)
    ext = np.flatnonzero(kind == EXTERIOR)
    if len(ext):
        ct, cf, _ = bvh.closest_face(queries[ext])
        verts = tets[ct[:, None], TET_FACES[cf]]
        b, d = _face_plane_coords(queries[ext], sampled[verts[:, 0]], sampled[verts[:, 1]], sampled[verts[:, 2]])
        tet[ext] = ct
        face[ext] = verts
        bary[ext] = 0.0
        bary[ext, :3] = b
        offset[ext] = np.abs(d)
        sign[ext] = np.where(d < 0, -1.0, 1.0)
    return Embedding(np.arange(nq), kind, tet, bary, face, offset, sign)


def embed(cloud, sampled_indices, mesh, *, tol=1e-9):
    """Embed every point of ``cloud`` that is not in ``sampled_indices``."""
    positions = cloud.positions if isinstance(cloud, GaussianCloud) else check_points(cloud, name="cloud")
    sampled_indices = check_index_array(sampled_indices, len(positions), name="sampled_indices")
    rest = np.setdiff1d(np.arange(len(positions)), sampled_indices)
    emb = embed_points(positions[rest], positions[sampled_indices], mesh, tol=tol)
    return Embedding(rest, emb.kind, emb.tet, emb.bary, emb.face, emb.offset, emb.normal_sign)


def apply_embedding(embedding, deformed_sampled, mesh):
    """Positions of the embedded points for deformed sampled positions."""
    x = check_points(deformed_sampled, name="deformed_sampled")
    tets = np.asarray(mesh.tets, dtype=np.int64)
    out = np.empty((len(embedding), 3))
    inner = embedding.interior
    if inner.any():
        corners = x[tets[embedding.tet[inner]]]
        out[inner] = np.einsum("nk,nkj->nj", embedding.bary[inner], corners)
    outer = embedding.exterior
    if outer.any():
        f = embedding.face[outer]
        a, b, c = x[f[:, 0]], x[f[:, 1]], x[f[:, 2]]
        n = np.cross(b - a, c - a)
        area2 = np.linalg.norm(n, axis=1)
        scale = np.maximum(np.linalg.norm(b - a, axis=1), np.linalg.norm(c - a, axis=1)) ** 2
        bad = ~(area2 > 1e-14 * scale)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DegenerateGeometryError(f"deformed face {tuple(f[i])} has zero area")
        n /= area2[:, None]
        bw = embedding.bary[outer, :3]
        out[outer] = (
            bw[:, 0:1] * a + bw[:, 1:2] * b + bw[:, 2:3] * c
            + (embedding.offset[outer] * embedding.normal_sign[outer])[:, None] * n
        )
    return out


def deform_cloud(embedding, sampled_indices, deformed_sampled, mesh, n_points):
    """Full dense positions: sampled points copied, the rest interpolated."""
    out = np.empty((n_points, 3))
    out[np.asarray(sampled_indices)] = deformed_sampled
    out[embedding.point_indices] = apply_embedding(embedding, deformed_sampled, mesh)
    return out


# ---------------------------------------------------------------------------
# Rotation frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RotationFrames:
    """Per point: neighbour triple, inverse of the rest relative-vector matrix,
    and whether the point's rotation is frozen (no usable triple found)."""

    neighbors: np.ndarray
    rest_inverse: np.ndarray
    frozen: np.ndarray
    fallback: np.ndarray
    cond_cap: float

    def __len__(self):
        return len(self.neighbors)

    @property
    def diagnostics(self):
        return {"fallback": int(self.fallback.sum()), "frozen": int(self.frozen.sum())}


def relative_matrix(positions, center_idx, neighbors):
    """Columns ``p_i - p_ij`` for each of the three neighbours."""
    p = np.asarray(positions, dtype=np.float64)
    return np.stack([p[center_idx] - p[neighbors[:, j]] for j in range(3)], axis=2)


def build_frames(positions, *, cond_cap=1e4, max_candidates=8):
    """Nearest-neighbour triples and rest matrices for the rotation update.

    When the nearest triple's matrix has condition number above ``cond_cap``,
    triples from the ``max_candidates`` nearest points are tried in
    lexicographic rank order (replace the farthest first). Points with no
    acceptable triple are frozen.
    """
    positions = check_points(positions, name="positions", min_points=4)
    n = len(positions)
    knn = build_knn(positions, max_candidates)
    cand = knn.indices
    idx = np.arange(n)
    nbrs = cand[:, :3].copy()
    R = relative_matrix(positions, idx, nbrs)
    cond = np.linalg.cond(R)
    frozen = np.zeros(n, dtype=bool)
    fallback = ~(cond <= cond_cap)
    combos = list(itertools.combinations(range(cand.shape[1]), 3))[1:]
    for i in np.flatnonzero(fallback):
        for combo in combos:
            trial = cand[i, list(combo)]
            Ri = relative_matrix(positions, np.array([i]), trial[None, :])[0]
            if np.linalg.cond(Ri) <= cond_cap:
                nbrs[i] = trial
                R[i] = Ri
                break
        else:
            frozen[i] = True
    inv = np.zeros_like(R)
    ok = ~frozen
    inv[ok] = np.linalg.inv(R[ok])
    return RotationFrames(nbrs, inv, frozen, fallback, cond_cap)


def quat_multiply(q, r):
    """Hamilton product of (w, x, y, z) quaternions, broadcasting over rows."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q, float), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(r, float), -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def nearest_rotation_quat(M):
    """Quaternion of the rotation maximizing trace(R^T M), per 3x3 matrix.

    For det(M) > 0 this is the orthogonal polar factor of M. Solved as the
    top eigenvector of the symmetric 4x4 trace form (no SVD).
    """
    M = np.asarray(M, float)
    m = lambda i, j: M[..., i, j]  # noqa: E731
    K = np.stack([
        np.stack([m(0, 0) + m(1, 1) + m(2, 2), m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)], -1),
        np.stack([m(2, 1) - m(1, 2), m(0, 0) - m(1, 1) - m(2, 2), m(0, 1) + m(1, 0), m(0, 2) + m(2, 0)], -1),
        np.stack([m(0, 2) - m(2, 0), m(0, 1) + m(1, 0), m(1, 1) - m(0, 0) - m(2, 2), m(1, 2) + m(2, 1)], -1),
        np.stack([m(1, 0) - m(0, 1), m(0, 2) + m(2, 0), m(1, 2) + m(2, 1), m(2, 2) - m(0, 0) - m(1, 1)], -1),
    ], -2)
    _, vecs = np.linalg.eigh(K)
    q = vecs[..., :, -1]
    return q * np.where(q[..., :1] < 0, -1.0, 1.0)


def update_rotations(frames, positions, initial_rotations):
    """Compose each initial orientation with the local rotation that carries
    the rest neighbour vectors onto the current ones."""
    positions = check_points(positions, name="positions")
    q0 = np.asarray(initial_rotations, dtype=np.float64)
    if len(positions) != len(frames) or q0.shape != (len(frames), 4):
        raise InvalidInputError("positions and rotations must match the frames")
    out = q0.copy()
    live = ~frames.frozen
    if live.any():
        idx = np.flatnonzero(live)
        Rt = relative_matrix(positions, idx, frames.neighbors[idx])
        X = Rt @ frames.rest_inverse[idx]
        out[idx] = quat_multiply(nearest_rotation_quat(X), q0[idx])
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


class DeformationTransfer(TransformerMixin, BaseEstimator):
    """Fit on the rest-state dense cloud; transform deformed subset positions
    into deformed dense positions.

    Parameters
    ----------
    interior_tol : float, default=1e-9
        Barycentric coordinates down to ``-interior_tol`` count as inside.
    cond_cap : float, default=1e4
        Condition-number cap for the neighbour matrices of the rotation update.
    max_candidates : int, default=8
        Neighbours considered when the nearest triple is ill-conditioned.
    """

    def __init__(self, interior_tol=1e-9, cond_cap=1e4, max_candidates=8):
        self.interior_tol = interior_tol
        self.cond_cap = cond_cap
        self.max_candidates = max_candidates

    def fit(self, X, y=None, *, sampled_indices, mesh, rotations=None):
        X = check_points(X, name="X", min_points=4)
        self.sampled_indices_ = check_index_array(sampled_indices, len(X), name="sampled_indices")
        self.mesh_ = mesh
        self.embedding_ = embed(X, self.sampled_indices_, mesh, tol=self.interior_tol)
        self.frames_ = build_frames(X, cond_cap=self.cond_cap, max_candidates=self.max_candidates)
        self.rest_rotations_ = (
            np.tile([1.0, 0.0, 0.0, 0.0], (len(X), 1)) if rotations is None else np.asarray(rotations, float)
        )
        self.n_points_ = len(X)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        """Dense positions for deformed sampled positions ``X``."""
        check_is_fitted(self, "embedding_")
        X = check_points(X, name="X")
        if len(X) != len(self.sampled_indices_):
            raise InvalidInputError(f"expected {len(self.sampled_indices_)} sampled positions, got {len(X)}")
        return deform_cloud(self.embedding_, self.sampled_indices_, X, self.mesh_, self.n_points_)

    def transform_rotations(self, dense_positions):
        check_is_fitted(self, "frames_")
        return update_rotations(self.frames_, dense_positions, self.rest_rotations_)
