"""Axis-aligned bounding volume hierarchy over tetrahedra.

Built in numpy (median split on centroids along the widest axis), queried in
numba with an explicit stack.
"""
import numpy as np
from numba import njit

# Face k of a tet is the triangle opposite local vertex k.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)


class BVH:
    def __init__(self, points, tets, leaf_size=8):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        corners = self.points[self.tets]
        lo_p, hi_p = corners.min(axis=1), corners.max(axis=1)
        cent = 0.5 * (lo_p + hi_p)
        # Pad so points accepted by a barycentric tolerance up to ~1e-8 are
        # never culled by their tet's box.
        pad = 1e-8 * np.linalg.norm(hi_p - lo_p, axis=1)[:, None] + 1e-15
        lo_p, hi_p = lo_p - pad, hi_p + pad
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(self.tets))
        prims = []
        n_placed = [0]

        def build(ids):
            node = len(lo)
            lo.append(lo_p[ids].min(axis=0))
            hi.append(hi_p[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(-1)
            count.append(0)
            if len(ids) <= leaf_size:
                start[node] = n_placed[0]
                count[node] = len(ids)
                prims.append(ids)
                n_placed[0] += len(ids)
                return node
            axis = int(np.argmax(np.ptp(cent[ids], axis=0)))
            srt = ids[np.argsort(cent[ids, axis], kind="stable")]
            mid = len(srt) // 2
            left[node] = build(srt[:mid])
            right[node] = build(srt[mid:])
            return node

        if len(order):
            build(order)
        self.lo = np.array(lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.array(hi, dtype=np.float64).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.prims = np.concatenate(prims).astype(np.int64) if prims else np.empty(0, np.int64)
        self.inv_edges = _tet_inverse_edges(self.points, self.tets)

    def locate(self, queries, tol):
        """Lowest-index containing tet and its barycentrics, or -1."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        return _locate(q, self.points, self.tets, self.inv_edges, self.lo, self.hi,
                       self.left, self.right, self.start, self.count, self.prims, tol)

    def closest_face(self, queries):
        """Closest (tet, face) pair per query, ties to lowest (tet, face)."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        return _closest(q, self.points, self.tets, TET_FACES, self.lo, self.hi,
                        self.left, self.right, self.start, self.count, self.prims)


def _tet_inverse_edges(points, tets):
    if len(tets) == 0:
        return np.empty((0, 3, 3))
    a = points[tets[:, 0]]
    E = np.stack([points[tets[:, 1]] - a, points[tets[:, 2]] - a, points[tets[:, 3]] - a], axis=2)
    return np.linalg.inv(E)


@njit(cache=True)
def _tet_barycentric(p, points, tet, inv):
    a = points[tet[0]]
    r0 = p[0] - a[0]
    r1 = p[1] - a[1]
    r2 = p[2] - a[2]
    out = np.empty(4)
    for k in range(3):
        out[k + 1] = inv[k, 0] * r0 + inv[k, 1] * r1 + inv[k, 2] * r2
    out[0] = 1.0 - out[1] - out[2] - out[3]
    return out


@njit(cache=True)
def _locate(queries, points, tets, inv_edges, lo, hi, left, right, start, count, prims, tol):
    nq = queries.shape[0]
    found = np.full(nq, -1, dtype=np.int64)
    bary = np.zeros((nq, 4))
    stack = np.empty(128, dtype=np.int64)
    if lo.shape[0] == 0:
        return found, bary
    for i in range(nq):
        p = queries[i]
        sp = 0
        stack[sp] = 0
        sp += 1
        best = -1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            outside = False
            for k in range(3):
                if p[k] < lo[node, k] or p[k] > hi[node, k]:
                    outside = True
            if outside:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    t = prims[j]
                    if best >= 0 and t > best:
                        continue
                    b = _tet_barycentric(p, points, tets[t], inv_edges[t])
                    if b[0] >= -tol and b[1] >= -tol and b[2] >= -tol and b[3] >= -tol:
                        best = t
                        bary[i] = b
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        found[i] = best
    return found, bary


@njit(cache=True)
def point_triangle_distance_sq(p, a, b, c):
    """Squared distance from p to triangle abc (closest-feature classification)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return ap @ ap
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return bp @ bp
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        r = ap - v * ab
        return r @ r
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return cp @ cp
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        r = ap - w * ac
        return r @ r
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        r = bp - w * (c - b)
        return r @ r
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    r = ap - ab * v - ac * w
    return r @ r


@njit(cache=True)
def _box_dist_sq(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@njit(cache=True)
def _closest(queries, points, tets, faces, lo, hi, left, right, start, count, prims):
    nq = queries.shape[0]
    best_tet = np.full(nq, -1, dtype=np.int64)
    best_face = np.full(nq, -1, dtype=np.int64)
    best_d = np.full(nq, np.inf)
    stack = np.empty(128, dtype=np.int64)
    if lo.shape[0] == 0:
        return best_tet, best_face, best_d
    for i in range(nq):
        p = queries[i]
        sp = 0
        stack[sp] = 0
        sp += 1
        bd = np.inf
        bt = -1
        bf = -1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist_sq(p, lo[node], hi[node]) > bd:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    t = prims[j]
                    for f in range(4):
                        a = points[tets[t, faces[f, 0]]]
                        b = points[tets[t, faces[f, 1]]]
                        c = points[tets[t, faces[f, 2]]]
                        d = point_triangle_distance_sq(p, a, b, c)
                        if d < bd or (d == bd and (t < bt or (t == bt and f < bf))):
                            bd = d
                            bt = t
                            bf = f
            else:
                dl = _box_dist_sq(p, lo[left[node]], hi[left[node]])
                dr = _box_dist_sq(p, lo[right[node]], hi[right[node]])
                # Push the farther child first so the nearer one is visited first.
                if dl <= dr:
                    stack[sp] = right[node]
                    stack[sp + 1] = left[node]
                else:
                    stack[sp] = left[node]
                    stack[sp + 1] = right[node]
                sp += 2
        best_tet[i] = bt
        best_face[i] = bf
        best_d[i] = np.sqrt(bd)
    return best_tet, best_face, best_d
