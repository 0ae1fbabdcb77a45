"""Numba kernels for the XPBD constraint sweeps.

The ``*_tangent`` variants propagate forward-mode derivatives with respect to
a parameter vector alongside the primal update. Tangent layouts:
``dx[i, :, p]`` = d x_i / d theta_p, ``dlam[c, p]`` = d lambda_c / d theta_p.
``mass_param[i]`` / ``comp_param[c]`` name the log-parameter a point's mass or
an edge's compliance depends on (-1 = constant).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _tet_volume(x, a, b, c, d):
    e1x, e1y, e1z = x[b, 0] - x[a, 0], x[b, 1] - x[a, 1], x[b, 2] - x[a, 2]
    e2x, e2y, e2z = x[c, 0] - x[a, 0], x[c, 1] - x[a, 1], x[c, 2] - x[a, 2]
    e3x, e3y, e3z = x[d, 0] - x[a, 0], x[d, 1] - x[a, 1], x[d, 2] - x[a, 2]
    return (e1x * (e2y * e3z - e2z * e3y) - e1y * (e2x * e3z - e2z * e3x) + e1z * (e2x * e3y - e2y * e3x)) / 6.0


@njit(cache=True)
def _cross(u, v):
    out = np.empty(3)
    out[0] = u[1] * v[2] - u[2] * v[1]
    out[1] = u[2] * v[0] - u[0] * v[2]
    out[2] = u[0] * v[1] - u[1] * v[0]
    return out


@njit(cache=True)
def _volume_gradients(x, tet):
    """Rows are dV/dx_i for the four tet vertices."""
    p0 = x[tet[0]]
    e1 = x[tet[1]] - p0
    e2 = x[tet[2]] - p0
    e3 = x[tet[3]] - p0
    g = np.empty((4, 3))
    g[1] = _cross(e2, e3) / 6.0
    g[2] = _cross(e3, e1) / 6.0
    g[3] = _cross(e1, e2) / 6.0
    g[0] = -(g[1] + g[2] + g[3])
    return g


@njit(cache=True)
def distance_sweep(x, w, edges, rest, alpha_t, lam, eps):
    """One Gauss-Seidel pass over distance constraints. Returns skipped count."""
    skipped = 0
    for c in range(edges.shape[0]):
        a = edges[c, 0]
        b = edges[c, 1]
        denom = w[a] + w[b] + alpha_t[c]
        if denom == 0.0:
            continue
        dx0 = x[a, 0] - x[b, 0]
        dx1 = x[a, 1] - x[b, 1]
        dx2 = x[a, 2] - x[b, 2]
        length = np.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
        if length < eps:
            skipped += 1
            continue
        C = length - rest[c]
        dl = (-C - alpha_t[c] * lam[c]) / denom
        lam[c] += dl
        s = dl / length
        x[a, 0] += w[a] * s * dx0
        x[a, 1] += w[a] * s * dx1
        x[a, 2] += w[a] * s * dx2
        x[b, 0] -= w[b] * s * dx0
        x[b, 1] -= w[b] * s * dx1
        x[b, 2] -= w[b] * s * dx2
    return skipped


@njit(cache=True)
def airmesh_project_one(x, w, tet, target, max_inner, tol):
    """Project one tet up to ``target`` signed volume (no-op if already there).

    Returns 0 if inactive or resolved, 1 if unresolvable (all vertices pinned
    or vanishing gradient).
    """
    V = _tet_volume(x, tet[0], tet[1], tet[2], tet[3])
    if V >= target:
        return 0
    for _ in range(max_inner):
        g = _volume_gradients(x, tet)
        denom = 0.0
        for i in range(4):
            denom += w[tet[i]] * (g[i, 0] ** 2 + g[i, 1] ** 2 + g[i, 2] ** 2)
        if denom <= 1e-300:
            return 1
        dl = -(V - target) / denom
        for i in range(4):
            vi = tet[i]
            for k in range(3):
                x[vi, k] += w[vi] * dl * g[i, k]
        V = _tet_volume(x, tet[0], tet[1], tet[2], tet[3])
        if V >= target - tol:
            return 0
    return 0


@njit(cache=True)
def airmesh_sweep(x, w, tets, targets, max_inner, tol):
    unresolved = 0
    for t in range(tets.shape[0]):
        unresolved += airmesh_project_one(x, w, tets[t], targets[t], max_inner, tol)
    return unresolved


@njit(cache=True)
def gauss_seidel(x, w, edges, rest, alpha_t, lam, tets, targets, iterations, eps, max_inner, tol):
    skipped = 0
    unresolved = 0
    for _ in range(iterations):
        skipped += distance_sweep(x, w, edges, rest, alpha_t, lam, eps)
        unresolved += airmesh_sweep(x, w, tets, targets, max_inner, tol)
    return skipped, unresolved


@njit(cache=True)
def jacobi(x, w, edges, rest, alpha_t, lam, tets, targets, iterations, eps, max_inner, tol):
    """Gather-then-apply sweeps; each point's summed delta is divided by the
    number of constraints that touched it."""
    n = x.shape[0]
    skipped = 0
    unresolved = 0
    for _ in range(iterations):
        acc = np.zeros((n, 3))
        cnt = np.zeros(n)
        for c in range(edges.shape[0]):
            a = edges[c, 0]
            b = edges[c, 1]
            denom = w[a] + w[b] + alpha_t[c]
            if denom == 0.0:
                continue
            d = x[a] - x[b]
            length = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            if length < eps:
                skipped += 1
                continue
            dl = (-(length - rest[c]) - alpha_t[c] * lam[c]) / denom
            lam[c] += dl
            acc[a] += w[a] * dl * d / length
            acc[b] -= w[b] * dl * d / length
            cnt[a] += 1.0
            cnt[b] += 1.0
        for t in range(tets.shape[0]):
            tet = tets[t]
            local = np.empty((4, 3))
            for i in range(4):
                local[i] = x[tet[i]]
            V = _tet_volume(x, tet[0], tet[1], tet[2], tet[3])
            if V >= targets[t]:
                continue
            xt = x.copy()
            unresolved += airmesh_project_one(xt, w, tet, targets[t], max_inner, tol)
            for i in range(4):
                acc[tet[i]] += xt[tet[i]] - local[i]
                cnt[tet[i]] += 1.0
        for i in range(n):
            if cnt[i] > 0:
                x[i] += acc[i] / cnt[i]
    return skipped, unresolved


# ---------------------------------------------------------------------------
# Forward-mode tangents
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dw(w, mass_param, i, P):
    """d w_i / d theta; w = exp(-log m) so the derivative is -w."""
    out = np.zeros(P)
    p = mass_param[i]
    if p >= 0:
        out[p] = -w[i]
    return out


@njit(cache=True)
def distance_sweep_tangent(x, dx, w, mass_param, edges, rest, alpha_t, comp_param, lam, dlam, eps):
    P = dx.shape[2]
    for c in range(edges.shape[0]):
        a = edges[c, 0]
        b = edges[c, 1]
        denom = w[a] + w[b] + alpha_t[c]
        if denom == 0.0:
            continue
        d = x[a] - x[b]
        length = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
        if length < eps:
            continue
        n = d / length
        ddiff = dx[a] - dx[b]  # (3, P)
        dC = n @ ddiff  # (P,)
        # dn = (I - n n^T) ddiff / length
        dn = (ddiff - np.outer(n, dC)) / length
        dwa = _dw(w, mass_param, a, P)
        dwb = _dw(w, mass_param, b, P)
        dat = np.zeros(P)
        if comp_param[c] >= 0:
            dat[comp_param[c]] = alpha_t[c]
        C = length - rest[c]
        num = -C - alpha_t[c] * lam[c]
        dnum = -dC - dat * lam[c] - alpha_t[c] * dlam[c]
        dden = dwa + dwb + dat
        dl = num / denom
        ddl = (dnum * denom - num * dden) / (denom * denom)
        lam[c] += dl
        dlam[c] += ddl
        for k in range(3):
            dx[a, k] += dwa * dl * n[k] + w[a] * ddl * n[k] + w[a] * dl * dn[k]
            dx[b, k] -= dwb * dl * n[k] + w[b] * ddl * n[k] + w[b] * dl * dn[k]
            x[a, k] += w[a] * dl * n[k]
            x[b, k] -= w[b] * dl * n[k]


@njit(cache=True)
def _volume_gradient_tangents(x, dx, tet):
    """d(dV/dx_i)/d theta for each vertex i: array (4, 3, P)."""
    P = dx.shape[2]
    p0 = x[tet[0]]
    e1 = x[tet[1]] - p0
    e2 = x[tet[2]] - p0
    e3 = x[tet[3]] - p0
    de1 = dx[tet[1]] - dx[tet[0]]
    de2 = dx[tet[2]] - dx[tet[0]]
    de3 = dx[tet[3]] - dx[tet[0]]
    out = np.zeros((4, 3, P))
    for p in range(P):
        out[1, :, p] = (_cross(de2[:, p], e3) + _cross(e2, de3[:, p])) / 6.0
        out[2, :, p] = (_cross(de3[:, p], e1) + _cross(e3, de1[:, p])) / 6.0
        out[3, :, p] = (_cross(de1[:, p], e2) + _cross(e1, de2[:, p])) / 6.0
        out[0, :, p] = -(out[1, :, p] + out[2, :, p] + out[3, :, p])
    return out


@njit(cache=True)
def airmesh_sweep_tangent(x, dx, w, mass_param, tets, targets, max_inner, tol):
    P = dx.shape[2]
    for t in range(tets.shape[0]):
        tet = tets[t]
        target = targets[t]
        V = _tet_volume(x, tet[0], tet[1], tet[2], tet[3])
        if V >= target:
            continue
        for _ in range(max_inner):
            g = _volume_gradients(x, tet)
            dg = _volume_gradient_tangents(x, dx, tet)
            denom = 0.0
            dden = np.zeros(P)
            dV = np.zeros(P)
            for i in range(4):
                vi = tet[i]
                gg = g[i, 0] ** 2 + g[i, 1] ** 2 + g[i, 2] ** 2
                denom += w[vi] * gg
                dden += _dw(w, mass_param, vi, P) * gg + 2.0 * w[vi] * (g[i] @ dg[i])
                dV += g[i] @ dx[vi]
            if denom <= 1e-300:
                break
            C = V - target
            dl = -C / denom
            ddl = (-dV * denom + C * dden) / (denom * denom)
            for i in range(4):
                vi = tet[i]
                dwi = _dw(w, mass_param, vi, P)
                for k in range(3):
                    dx[vi, k] += dwi * dl * g[i, k] + w[vi] * ddl * g[i, k] + w[vi] * dl * dg[i, k]
                    x[vi, k] += w[vi] * dl * g[i, k]
            V = _tet_volume(x, tet[0], tet[1], tet[2], tet[3])
            if V >= target - tol:
                break


@njit(cache=True)
def gauss_seidel_tangent(
    x, dx, w, mass_param, edges, rest, alpha_t, comp_param, lam, dlam, tets, targets, iterations, eps, max_inner, tol
):
    for _ in range(iterations):
        distance_sweep_tangent(x, dx, w, mass_param, edges, rest, alpha_t, comp_param, lam, dlam, eps)
        airmesh_sweep_tangent(x, dx, w, mass_param, tets, targets, max_inner, tol)
