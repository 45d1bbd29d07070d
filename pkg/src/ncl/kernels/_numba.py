"""Loop kernels compiled with numba.

Every function here has a twin with the same signature in ``_numpy``; the
two are cross-checked in the test-suite and raced in ``benchmarks/``.
"""

import numpy as np
from numba import njit

EPS = np.finfo(np.float64).eps
MAX_BASES = 5000


@njit(cache=True)
def neighborhood_extreme(Z, ptr, idx, use_max):
    n, d = Z.shape
    X = np.empty_like(Z)
    for i in range(n):
        for l in range(d):
            best = Z[idx[ptr[i]], l]
            for k in range(ptr[i] + 1, ptr[i + 1]):
                v = Z[idx[k], l]
                if use_max:
                    if v > best:
                        best = v
                elif v < best:
                    best = v
            X[i, l] = best
    return X


@njit(cache=True)
def _norm(v):
    s = 0.0
    for k in range(v.shape[0]):
        s += v[k] * v[k]
    return np.sqrt(s)


@njit(cache=True)
def nnls(A, b, max_iter):
    """Lawson-Hanson active set: argmin_{x >= 0} ||Ax - b||."""
    m = A.shape[1]
    x = np.zeros(m)
    passive = np.zeros(m, dtype=np.bool_)
    w = A.T @ b
    tol = 10.0 * EPS * max(A.shape[0], m) * np.abs(A).sum(axis=0).max()
    it = 0
    while it < max_iter:
        j = -1
        wmax = tol
        for k in range(m):
            if not passive[k] and w[k] > wmax:
                wmax = w[k]
                j = k
        if j < 0:
            break
        passive[j] = True
        while True:
            it += 1
            cols = np.flatnonzero(passive)
            sol = np.linalg.lstsq(np.ascontiguousarray(A[:, cols]), b)[0]
            s = np.zeros(m)
            for q in range(cols.shape[0]):
                s[cols[q]] = sol[q]
            ok = True
            for q in range(cols.shape[0]):
                if s[cols[q]] <= 0.0:
                    ok = False
            if ok or it >= max_iter:
                x = s
                break
            alpha = np.inf
            for q in range(cols.shape[0]):
                k = cols[q]
                if s[k] <= 0.0:
                    r = x[k] / (x[k] - s[k])
                    if r < alpha:
                        alpha = r
            for k in range(m):
                x[k] += alpha * (s[k] - x[k])
                if passive[k] and x[k] <= tol:
                    passive[k] = False
                    x[k] = 0.0
            if not passive.any():
                break
        w = A.T @ (b - A @ x)
    for k in range(m):
        if x[k] < 0.0:
            x[k] = 0.0
    return x


@njit(cache=True)
def _n_choose(m, r):
    out = 1
    for k in range(r):
        out = out * (m - k) // (k + 1)
    return out


@njit(cache=True)
def ray_min_sum(Ar, u, nu0):
    """min 1ᵀν s.t. Ar ν = u, ν >= 0 by enumerating column bases.

    ``nu0`` is a known feasible point used when no basis does better.
    Returns (nu, resolved); resolved is False when the basis count is too
    large to enumerate.
    """
    r, m = Ar.shape
    best = nu0.copy()
    best_sum = nu0.sum()
    if r == 0 or r > m:
        return best, True
    if _n_choose(m, r) > MAX_BASES:
        return best, False
    scale = _norm(u)
    comb = np.arange(r)
    while True:
        B = np.empty((r, r))
        for q in range(r):
            B[:, q] = Ar[:, comb[q]]
        # skip near-singular bases
        sv = np.linalg.svd(B)[1]
        if sv[-1] > 1e-12 * sv[0]:
            sol = np.linalg.solve(B, u)
            tot = 0.0
            neg = 0.0
            for q in range(r):
                tot += abs(sol[q])
                if sol[q] < neg:
                    neg = sol[q]
            res = _norm(B @ sol - u)
            if neg >= -1e-9 * tot and res <= 1e-9 * scale + 1e-300:
                ssum = 0.0
                for q in range(r):
                    ssum += max(sol[q], 0.0)
                if ssum < best_sum * (1.0 - 1e-13):
                    best_sum = ssum
                    best = np.zeros(m)
                    for q in range(r):
                        best[comb[q]] = max(sol[q], 0.0)
        # next combination in lexicographic order
        q = r - 1
        while q >= 0 and comb[q] == m - r + q:
            q -= 1
        if q < 0:
            break
        comb[q] += 1
        for k in range(q + 1, r):
            comb[k] = comb[k - 1] + 1
    return best, True


@njit(cache=True)
def hull_node(P, z, g, delta):
    """Point of δ∘co(P) maximising cos(g, x - z); farthest such point on ties.

    Returns (x, fallback, resolved).
    """
    m, d = P.shape
    c = np.zeros(d)
    for j in range(m):
        c += P[j]
    c /= m
    gn = _norm(g)
    if not np.isfinite(gn) or gn == 0.0:
        return c, True, True
    V = np.empty((m, d))
    A = np.empty((d, m))
    scale = 0.0
    for j in range(m):
        for l in range(d):
            V[j, l] = c[l] + delta * (P[j, l] - c[l])
            A[l, j] = V[j, l] - z[l]
            scale = max(scale, abs(P[j, l]), abs(z[l]))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] <= 1e-300:
        return c, True, True
    tol = max(1e-10 * s[0], 1e4 * EPS * scale)
    r = 0
    for k in range(s.shape[0]):
        if s[k] > tol:
            r += 1
    if r == 0:
        return c, True, True
    Ar = np.empty((r, m))
    for k in range(r):
        for j in range(m):
            Ar[k, j] = s[k] * Vt[k, j]
    gr = np.ascontiguousarray(U[:, :r].T) @ g
    grn = _norm(gr)
    u = np.zeros(r)
    nu0 = np.zeros(m)
    col_norm = np.empty(m)
    ArT = np.ascontiguousarray(Ar.T)
    for j in range(m):
        col_norm[j] = _norm(ArT[j])
    positive = False
    if grn > 1e-12 * gn:
        lam = nnls(Ar, gr, 20 * m + 20)
        u = Ar @ lam
        un = _norm(u)
        if un > 1e-12 * grn and (gr @ u) > 1e-14 * un * grn and lam.sum() > 0.0:
            positive = True
            nu0 = lam
    if not positive:
        # cosine never positive: best extreme ray, longer one on ties
        jbest = -1
        cbest = -np.inf
        for j in range(m):
            if col_norm[j] <= tol:
                continue
            cj = (gr @ ArT[j]) / col_norm[j] / max(grn, 1e-300)
            if grn <= 1e-12 * gn:
                cj = 0.0
            if jbest < 0 or cj > cbest + 1e-9 or (abs(cj - cbest) <= 1e-9 and col_norm[j] > col_norm[jbest]):
                jbest = j
                cbest = cj
        if jbest < 0:
            return c, True, True
        u = ArT[jbest].copy()
        nu0 = np.zeros(m)
        nu0[jbest] = 1.0
    nu, resolved = ray_min_sum(Ar, u, nu0)
    tot = nu.sum()
    x = np.zeros(d)
    for j in range(m):
        x += (nu[j] / tot) * V[j]
    dx = 0.0
    for l in range(d):
        dx += (x[l] - z[l]) ** 2
    if np.sqrt(dx) < 1e-12:
        return c, True, resolved
    return x, False, resolved


@njit(cache=True)
def _phi(g, a, b, s):
    tot = 0.0
    for l in range(g.shape[0]):
        lo = s * a[l]
        hi = s * b[l]
        if g[l] > hi:
            tot += (g[l] - hi) ** 2
        elif g[l] < lo:
            tot += (lo - g[l]) ** 2
    return tot


@njit(cache=True)
def best_scale(g, a, b):
    """argmin_{s >= 0} dist(g, [s a, s b])², a convex piecewise quadratic."""
    d = g.shape[0]
    bp = np.empty(2 * d + 1)
    nb = 1
    bp[0] = 0.0
    for l in range(d):
        if a[l] != 0.0:
            r = g[l] / a[l]
            if r > 0.0:
                bp[nb] = r
                nb += 1
        if b[l] != 0.0:
            r = g[l] / b[l]
            if r > 0.0:
                bp[nb] = r
                nb += 1
    bp = np.sort(bp[:nb])
    best_s = 0.0
    best_v = _phi(g, a, b, 0.0)
    for k in range(nb):
        left = bp[k]
        right = bp[k + 1] if k + 1 < nb else np.inf
        mid = 0.5 * (left + right) if k + 1 < nb else 2.0 * left + 1.0
        num = 0.0
        den = 0.0
        for l in range(d):
            if g[l] > mid * b[l]:
                num += g[l] * b[l]
                den += b[l] * b[l]
            elif g[l] < mid * a[l]:
                num += g[l] * a[l]
                den += a[l] * a[l]
        cand = left if den == 0.0 else min(max(num / den, left), right)
        v = _phi(g, a, b, cand)
        if v < best_v:
            best_v = v
            best_s = cand
    return best_s


@njit(cache=True)
def _corner_search(g, a, b, start):
    v = start.copy()
    dot = g @ v
    nsq = v @ v
    cur = dot / np.sqrt(nsq) if nsq > 0 else -np.inf
    for _ in range(200):
        improved = False
        for l in range(g.shape[0]):
            if a[l] == b[l]:
                continue
            alt = a[l] if v[l] == b[l] else b[l]
            ndot = dot + g[l] * (alt - v[l])
            nn = nsq + alt * alt - v[l] * v[l]
            if nn <= 0.0:
                continue
            val = ndot / np.sqrt(nn)
            if val > cur + 1e-15:
                v[l] = alt
                dot = ndot
                nsq = nn
                cur = val
                improved = True
        if not improved:
            break
    return v, cur


@njit(cache=True)
def cube_node(P, z, g, delta):
    """Point of the δ-shrunk cube hull of P maximising cos(g, x - z)."""
    m, d = P.shape
    lo = np.empty(d)
    hi = np.empty(d)
    for l in range(d):
        lo[l] = P[0, l]
        hi[l] = P[0, l]
        for j in range(1, m):
            lo[l] = min(lo[l], P[j, l])
            hi[l] = max(hi[l], P[j, l])
    ctr = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    slo = ctr - delta * half
    shi = ctr + delta * half
    gn = _norm(g)
    if not np.isfinite(gn) or gn == 0.0:
        return ctr, True
    a = slo - z
    b = shi - z
    s = best_scale(g, a, b)
    u = np.empty(d)
    for l in range(d):
        u[l] = min(max(g[l], s * a[l]), s * b[l])
    un = _norm(u)
    if not (s > 0.0 and un > 1e-12 * gn and (g @ u) > 1e-14 * un * gn):
        s1 = np.empty(d)
        s2 = np.empty(d)
        for l in range(d):
            s1[l] = b[l] if g[l] > 0 else a[l]
            s2[l] = a[l] if abs(a[l]) > abs(b[l]) else b[l]
        v1, c1 = _corner_search(g, a, b, s1)
        v2, c2 = _corner_search(g, a, b, s2)
        u = v1 if c1 >= c2 else v2
        if _norm(u) == 0.0:
            return ctr, True
    tmax = np.inf
    for l in range(d):
        if u[l] > 0.0:
            tmax = min(tmax, b[l] / u[l])
        elif u[l] < 0.0:
            tmax = min(tmax, a[l] / u[l])
    x = np.empty(d)
    dx = 0.0
    for l in range(d):
        x[l] = min(max(z[l] + tmax * u[l], slo[l]), shi[l])
        dx += (x[l] - z[l]) ** 2
    if np.sqrt(dx) < 1e-12:
        return ctr, True
    return x, False


@njit(cache=True)
def grad_hull(Z, ptr, idx, G, delta):
    n, d = Z.shape
    X = np.empty_like(Z)
    fallback = np.zeros(n, dtype=np.bool_)
    resolved = np.ones(n, dtype=np.bool_)
    for i in range(n):
        nb = idx[ptr[i]:ptr[i + 1]]
        P = np.empty((nb.shape[0], d))
        for q in range(nb.shape[0]):
            P[q] = Z[nb[q]]
        x, fb, ok = hull_node(P, Z[i], G[i], delta)
        X[i] = x
        fallback[i] = fb
        resolved[i] = ok
    return X, fallback, resolved


@njit(cache=True)
def grad_cube(Z, ptr, idx, G, delta):
    n, d = Z.shape
    X = np.empty_like(Z)
    fallback = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        nb = idx[ptr[i]:ptr[i + 1]]
        P = np.empty((nb.shape[0], d))
        for q in range(nb.shape[0]):
            P[q] = Z[nb[q]]
        x, fb = cube_node(P, Z[i], G[i], delta)
        X[i] = x
        fallback[i] = fb
    return X, fallback
