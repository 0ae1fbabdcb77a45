"""Simulation connectivity from an unstructured point cloud.

Pipeline: draw a seeded subset, tetrahedralize it (Delaunay), drop tetrahedra
whose vertices are not mutual near neighbours, and extract the edge set that
becomes the distance-constraint graph.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_scalar
from .errors import DegenerateGeometryError, InvalidInputError

# Relative volume below which a Qhull simplex is treated as a sliver from a
# cospherical tie and dropped.
_FLAT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedra (positively oriented) and their deduplicated edge list.

    Indices refer to the point array the mesh was built over.
    """

    tets: np.ndarray
    edges: np.ndarray

    @classmethod
    def from_tets(cls, tets):
        tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        return cls(tets=tets, edges=extract_edges(tets))

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_edges(self):
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """Exact k-nearest-neighbour lists, self excluded, nearest first."""

    k: int
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


def signed_volumes(points, tets):
    """Signed volume of each tet; positive when (b-a, c-a, d-a) is right-handed."""
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    a = p[t[:, 0]]
    e1, e2, e3 = p[t[:, 1]] - a, p[t[:, 2]] - a, p[t[:, 3]] - a
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def extract_edges(tets):
    """Sorted, deduplicated (i, j) pairs with i < j over all tet edges."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    if len(tets) == 0:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate([tets[:, [i, j]] for i in range(4) for j in range(i + 1, 4)])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def sample_subset(points, target_count, seed=0):
    """Uniformly draw ``min(target_count, n)`` distinct indices without replacement.

    Uses the counter-based Philox generator so the draw is stable across
    platforms and numpy versions that keep the Philox stream. Returned
    indices are sorted ascending.
    """
    points = check_points(points, name="cloud")
    check_scalar(target_count, "target_count", min_val=4, integer=True)
    n = len(points)
    if n < 4:
        raise InvalidInputError(f"cloud has {n} points; at least 4 are required")
    if target_count >= n:
        return np.arange(n, dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(seed))
    return np.sort(rng.choice(n, size=target_count, replace=False)).astype(np.int64)


def delaunay_tetrahedralize(points):
    """Delaunay tetrahedralization of ``points`` (Qhull, triangulated output).

    Simplices are reoriented to positive signed volume. Zero-volume slivers
    produced when Qhull splits a cospherical cell are dropped.
    """
    points = check_points(points, name="points")
    if len(points) < 4:
        raise DegenerateGeometryError(f"need at least 4 points, got {len(points)}")
    try:
        tri = Delaunay(points, qhull_options="Qbb Qc Qz Q12 Qt")
    except QhullError as exc:
        raise DegenerateGeometryError(f"Delaunay failed (coplanar or degenerate input): {exc}") from exc
    tets = np.asarray(tri.simplices, dtype=np.int64)
    vol = signed_volumes(points, tets)
    scale = np.ptp(points, axis=0).max() ** 3
    keep = np.abs(vol) > _FLAT_TOL * scale
    tets, vol = tets[keep], vol[keep]
    if len(tets) == 0:
        raise DegenerateGeometryError("all tetrahedra are degenerate")
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    # Canonical order: lowest index first (an even permutation preserves orientation).
    tets = _canonical_rotation(tets)
    order = np.lexsort(tets.T[::-1])
    tets = tets[order]
    return TetMesh(tets=tets, edges=extract_edges(tets))


def _canonical_rotation(tets):
    """Permute each tet so its smallest index comes first, keeping orientation."""
    # Even permutations of (0,1,2,3) that bring position j to the front.
    perms = np.array([[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1], [3, 2, 1, 0]])
    first = np.argmin(tets, axis=1)
    return np.take_along_axis(tets, perms[first], axis=1)


def build_knn(points, k):
    """Exact k nearest neighbours of every point under Euclidean distance.

    Each list holds ``min(k, n-1)`` entries, excludes the query point itself,
    and is ordered by (distance, index). Rows whose k-th distance is tied with
    the next candidate are resolved by an exhaustive scan so that membership is
    independent of kd-tree traversal order.
    """
    points = check_points(points, name="points")
    check_scalar(k, "k", min_val=1, integer=True)
    n = len(points)
    kk = min(k, n - 1)
    if kk <= 0:
        return NeighborIndex(k=k, indices=np.empty((n, 0), np.int64), distances=np.empty((n, 0)))
    q = min(kk + 2, n)
    dist, idx = cKDTree(points).query(points, k=q)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx).astype(np.int64)
    out_idx = np.empty((n, kk), dtype=np.int64)
    out_dist = np.empty((n, kk))
    self_col = idx == np.arange(n)[:, None]
    for i in range(n):
        keep = ~self_col[i]
        ci, cd = idx[i][keep], dist[i][keep]
        order = np.lexsort((ci, cd))
        ci, cd = ci[order], cd[order]
        tied = len(cd) > kk and cd[kk] == cd[kk - 1]
        if tied or len(ci) < kk or not self_col[i].any():
            ci, cd = _knn_row_exhaustive(points, i, kk)
        out_idx[i], out_dist[i] = ci[:kk], cd[:kk]
    return NeighborIndex(k=k, indices=out_idx, distances=out_dist)


def _knn_row_exhaustive(points, i, kk):
    d = np.linalg.norm(points - points[i], axis=1)
    d[i] = np.inf
    order = np.lexsort((np.arange(len(points)), d))[:kk]
    return order.astype(np.int64), d[order]


def filter_tets(mesh, index):
    """Keep a tet iff its other three vertices lie in the k-NN set of its
    lowest-index vertex. Edges are re-extracted from the survivors."""
    tets = np.asarray(mesh.tets, dtype=np.int64)
    if len(tets) == 0:
        return TetMesh.from_tets(tets)
    if tets.max() >= len(index):
        raise InvalidInputError("neighbour index does not cover the mesh vertices")
    ref_col = np.argmin(tets, axis=1)
    ref = tets[np.arange(len(tets)), ref_col]
    others = np.stack([tets[np.arange(len(tets)), (ref_col + j) % 4] for j in (1, 2, 3)], axis=1)
    nbrs = index.indices[ref]
    member = (nbrs[:, :, None] == others[:, None, :]).any(axis=1).all(axis=1)
    kept = tets[member]
    return TetMesh(tets=kept, edges=extract_edges(kept))


class TetMeshBuilder(BaseEstimator):
    """Sample, tetrahedralize and locality-filter a point cloud.

    Parameters
    ----------
    target_count : int, default=10000
        Size of the simulated subset.
    k : int, default=30
        Neighbourhood size for the tetrahedron filter.
    seed : int, default=0
        Seed for the subset draw.
    """

    def __init__(self, target_count=10000, k=30, seed=0):
        self.target_count = target_count
        self.k = k
        self.seed = seed

    def fit(self, X, y=None):
        X = check_points(X, name="X", min_points=4)
        self.sample_indices_ = sample_subset(X, self.target_count, self.seed)
        sub = X[self.sample_indices_]
        self.raw_mesh_ = delaunay_tetrahedralize(sub)
        self.knn_ = build_knn(sub, self.k)
        self.mesh_ = filter_tets(self.raw_mesh_, self.knn_)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        """Return the sampled subset of ``X``."""
        check_is_fitted(self, "sample_indices_")
        X = check_points(X, name="X")
        return X[self.sample_indices_]
