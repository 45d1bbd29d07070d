"""Pure numpy/scipy versions of the loop kernels in ``_numba``."""

from itertools import combinations
from math import comb

import numpy as np
from scipy.optimize import linprog

EPS = np.finfo(np.float64).eps
MAX_BASES = 5000


def neighborhood_extreme(Z, ptr, idx, use_max):
    n = Z.shape[0]
    width = int(np.diff(ptr).max())
    # pad short neighborhoods by repeating their first entry
    pad = np.empty((n, width), dtype=np.int64)
    for i in range(n):
        nb = idx[ptr[i]:ptr[i + 1]]
        pad[i, :nb.size] = nb
        pad[i, nb.size:] = nb[0]
    stacked = Z[pad]  # n x width x d
    return stacked.max(axis=1) if use_max else stacked.min(axis=1)


def nnls(A, b, max_iter=None):
    """Lawson-Hanson active set, numpy edition.

    scipy's ``nnls`` is not used: the 1.15 series returns non-KKT points on
    some underdetermined inputs, which are exactly the wide systems here.
    """
    n, m = A.shape
    max_iter = 3 * m if max_iter is None else max_iter
    x = np.zeros(m)
    passive = np.zeros(m, dtype=bool)
    tol = 10.0 * EPS * max(n, m) * np.abs(A).sum(axis=0).max()
    w = A.T @ b
    it = 0
    while it < max_iter:
        cand = np.where(passive, -np.inf, w)
        j = int(np.argmax(cand))
        if not cand[j] > tol:
            break
        passive[j] = True
        while True:
            it += 1
            s = np.zeros(m)
            s[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            neg = passive & (s <= 0.0)
            if not neg.any() or it >= max_iter:
                x = s
                break
            alpha = np.min(x[neg] / (x[neg] - s[neg]))
            x += alpha * (s - x)
            drop = passive & (x <= tol)
            passive[drop] = False
            x[drop] = 0.0
            if not passive.any():
                break
        w = A.T @ (b - A @ x)
    return np.maximum(x, 0.0)


def ray_min_sum(Ar, u, nu0):
    r, m = Ar.shape
    if r == 0 or r > m:
        return nu0.copy(), True
    if comb(m, r) > MAX_BASES:
        res = linprog(np.ones(m), A_eq=Ar, b_eq=u, bounds=(0, None), method="highs")
        if res.status == 0 and res.x.sum() < nu0.sum():
            return np.maximum(res.x, 0.0), True
        return nu0.copy(), True
    best, best_sum = nu0.copy(), nu0.sum()
    scale = np.linalg.norm(u)
    for cols in combinations(range(m), r):
        B = Ar[:, cols]
        sv = np.linalg.svd(B, compute_uv=False)
        if not sv[-1] > 1e-12 * sv[0]:
            continue
        sol = np.linalg.solve(B, u)
        if sol.min() < -1e-9 * np.abs(sol).sum():
            continue
        if np.linalg.norm(B @ sol - u) > 1e-9 * scale + 1e-300:
            continue
        sol = np.maximum(sol, 0.0)
        if sol.sum() < best_sum * (1.0 - 1e-13):
            best_sum = sol.sum()
            best = np.zeros(m)
            best[list(cols)] = sol
    return best, True


def hull_node(P, z, g, delta):
    m, d = P.shape
    c = P.mean(axis=0)
    gn = np.linalg.norm(g)
    if not np.isfinite(gn) or gn == 0.0:
        return c, True, True
    V = c + delta * (P - c)
    A = (V - z).T
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] <= 1e-300:
        return c, True, True
    scale = max(np.abs(P).max(), np.abs(z).max())
    tol = max(1e-10 * s[0], 1e4 * EPS * scale)
    r = int((s > tol).sum())
    if r == 0:
        return c, True, True
    Ar = s[:r, None] * Vt[:r]
    gr = U[:, :r].T @ g
    grn = np.linalg.norm(gr)
    col_norm = np.linalg.norm(Ar, axis=0)
    positive = False
    if grn > 1e-12 * gn:
        lam = nnls(Ar, gr, 20 * m + 20)
        u = Ar @ lam
        un = np.linalg.norm(u)
        if un > 1e-12 * grn and gr @ u > 1e-14 * un * grn and lam.sum() > 0:
            positive, nu0 = True, lam
    if not positive:
        cos = np.where(col_norm > tol, (gr @ Ar) / np.maximum(col_norm, 1e-300) / max(grn, 1e-300), -np.inf)
        if grn <= 1e-12 * gn:
            cos = np.where(col_norm > tol, 0.0, -np.inf)
        if not np.isfinite(cos.max()):
            return c, True, True
        # longest column among near-ties
        ties = np.flatnonzero(cos >= cos.max() - 1e-9)
        j = ties[np.argmax(col_norm[ties])]
        u = Ar[:, j].copy()
        nu0 = np.zeros(m)
        nu0[j] = 1.0
    nu, resolved = ray_min_sum(Ar, u, nu0)
    x = (nu / nu.sum()) @ V
    if np.linalg.norm(x - z) < 1e-12:
        return c, True, resolved
    return x, False, resolved


def _phi(g, a, b, s):
    lo, hi = s * a, s * b
    return float((np.maximum(g - hi, 0.0) ** 2 + np.maximum(lo - g, 0.0) ** 2).sum())


def best_scale(g, a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.concatenate([g / a, g / b])
    r = r[np.isfinite(r) & (r > 0)]
    bp = np.sort(np.concatenate([[0.0], r]))
    right = np.append(bp[1:], np.inf)
    mid = np.where(np.isfinite(right), 0.5 * (bp + right), 2.0 * bp + 1.0)
    up = g[None, :] > mid[:, None] * b[None, :]
    low = ~up & (g[None, :] < mid[:, None] * a[None, :])
    num = (up * (g * b)).sum(axis=1) + (low * (g * a)).sum(axis=1)
    den = (up * (b * b)).sum(axis=1) + (low * (a * a)).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = np.where(den == 0.0, bp, np.minimum(np.maximum(num / den, bp), right))
    best_s, best_v = 0.0, _phi(g, a, b, 0.0)
    for s in cand:
        v = _phi(g, a, b, s)
        if v < best_v:
            best_s, best_v = s, v
    return best_s


def _corner_search(g, a, b, v):
    v = v.copy()
    dot, nsq = g @ v, v @ v
    cur = dot / np.sqrt(nsq) if nsq > 0 else -np.inf
    for _ in range(200):
        improved = False
        for l in range(g.size):
            if a[l] == b[l]:
                continue
            alt = a[l] if v[l] == b[l] else b[l]
            ndot = dot + g[l] * (alt - v[l])
            nn = nsq + alt * alt - v[l] * v[l]
            if nn <= 0.0:
                continue
            val = ndot / np.sqrt(nn)
            if val > cur + 1e-15:
                v[l], dot, nsq, cur = alt, ndot, nn, val
                improved = True
        if not improved:
            break
    return v, cur


def cube_node(P, z, g, delta):
    lo, hi = P.min(axis=0), P.max(axis=0)
    ctr, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    slo, shi = ctr - delta * half, ctr + delta * half
    gn = np.linalg.norm(g)
    if not np.isfinite(gn) or gn == 0.0:
        return ctr, True
    a, b = slo - z, shi - z
    s = best_scale(g, a, b)
    u = np.minimum(np.maximum(g, s * a), s * b)
    un = np.linalg.norm(u)
    if not (s > 0.0 and un > 1e-12 * gn and g @ u > 1e-14 * un * gn):
        v1, c1 = _corner_search(g, a, b, np.where(g > 0, b, a))
        v2, c2 = _corner_search(g, a, b, np.where(np.abs(a) > np.abs(b), a, b))
        u = v1 if c1 >= c2 else v2
        if not np.any(u):
            return ctr, True
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(u > 0, b / u, np.where(u < 0, a / u, np.inf))
    x = np.clip(z + lim.min() * u, slo, shi)
    if np.linalg.norm(x - z) < 1e-12:
        return ctr, True
    return x, False


def grad_hull(Z, ptr, idx, G, delta):
    n = Z.shape[0]
    X = np.empty_like(Z)
    fallback = np.zeros(n, dtype=bool)
    resolved = np.ones(n, dtype=bool)
    for i in range(n):
        X[i], fallback[i], resolved[i] = hull_node(Z[idx[ptr[i]:ptr[i + 1]]], Z[i], G[i], delta)
    return X, fallback, resolved


def grad_cube(Z, ptr, idx, G, delta):
    n = Z.shape[0]
    X = np.empty_like(Z)
    fallback = np.zeros(n, dtype=bool)
    for i in range(n):
        X[i], fallback[i] = cube_node(Z[idx[ptr[i]:ptr[i + 1]]], Z[i], G[i], delta)
    return X, fallback
