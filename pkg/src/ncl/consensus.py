"""Consensus operators: maps that drive an ensemble onto the consensus plane.

An ensemble is an ``n x d`` array whose row ``i`` is node ``i``'s copy of
the decision vector. Operators act row-wise on closed neighborhoods and
never move the ensemble when all rows already agree.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graph import Graph, WeightMatrix
from .transforms import (IDENTITY, DomainError, Transform, TransformSchedule, make_transform,
                         transform_from_config)

log = logging.getLogger(__name__)

OPERATOR_KINDS = ("linear", "transform", "pw_mean", "max", "min", "hull", "cube_hull",
                  "grad_hull", "grad_cube")


class UnsupportedScheme(ValueError):
    pass


def _as2d(X) -> np.ndarray:
    X = np.asarray(X)
    if X.dtype != object:  # object arrays (e.g. Fractions) pass through for exact arithmetic
        X = X.astype(float, copy=False)
    return X[:, None] if X.ndim == 1 else X


def _wmat(W) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        return W.W
    W = np.asarray(W)
    return W if W.dtype == object else W.astype(float, copy=False)


@dataclass
class EnsembleState:
    X: np.ndarray
    Y: np.ndarray | None = None
    Pi: np.ndarray | None = None

    def __post_init__(self):
        self.X = _as2d(self.X)
        if not np.all(np.isfinite(self.X)):
            raise ValueError("ensemble contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def dim(self, l: int) -> np.ndarray:
        return self.X[:, l]

    def on_consensus_plane(self) -> bool:
        return span(self.X) == 0.0


def span(X) -> float:
    """d · max over dimensions of (max_i x_il - min_i x_il)."""
    X = X.X if isinstance(X, EnsembleState) else _as2d(X)
    if X.size == 0:
        raise ValueError("empty ensemble")
    return float(X.shape[1] * np.ptp(X, axis=0).max())


# ---------------------------------------------------------------- steps

def linear_step(W, Z) -> np.ndarray:
    return _wmat(W) @ _as2d(Z)


def transform_step(W, Z, schedule: TransformSchedule | Transform, t: int = 0,
                   clamp: bool = True) -> np.ndarray:
    """Average in the transformed domain, map back: φ⁻¹(Σ_j W_ij φ(z_j))."""
    Wm = _wmat(W)
    Z = _as2d(Z)
    if isinstance(schedule, Transform):
        schedule = TransformSchedule(schedule)
    if schedule.uniform:
        phi = schedule.default
        try:
            return phi.inverse(Wm @ phi.forward(Z, clamp=clamp))
        except DomainError as e:
            i, l = divmod(e.index or 0, Z.shape[1])
            raise DomainError(str(e), e.index, {"node": i, "t": t, "dim": l}) from None
    out = np.empty_like(Z)
    for i in range(Z.shape[0]):
        phi = schedule.at(i, t)
        try:
            out[i] = phi.inverse(Wm[i] @ phi.forward(Z, clamp=clamp))
        except DomainError as e:
            j, l = divmod(e.index or 0, Z.shape[1])
            raise DomainError(str(e), e.index, {"node": i, "source": j, "t": t, "dim": l}) from None
    return out


def pw_mean_step(W, Z, p: float) -> np.ndarray:
    """Weighted power mean (Σ_j W_ij z_j^p)^(1/p), geometric mean at p = 0.

    Evaluated directly rather than through :class:`Transform`, so the two
    paths can check each other.
    """
    Wm = _wmat(W)
    Z = _as2d(Z)
    bad = np.flatnonzero(~(Z > 0))
    if bad.size:
        i, l = divmod(int(bad[0]), Z.shape[1])
        raise DomainError(f"power mean needs positive input, got {Z[i, l]!r}", int(bad[0]),
                          {"node": i, "dim": l})
    if abs(p) < 1e-100:
        # closer to the geometric mean than double precision can resolve
        return np.exp(Wm @ np.log(Z))
    if p == 1:
        return Wm @ Z
    if abs(p) < 1:
        # log M_p = log(Σ w e^{p log z}) / p, kept accurate as p -> 0
        return np.exp(np.log1p(Wm @ np.expm1(p * np.log(Z))) / p)
    return (Wm @ Z ** p) ** (1.0 / p)


def extreme_step(Z, g: Graph, mode: str = "max") -> np.ndarray:
    if mode not in ("max", "min"):
        raise ValueError(f"mode must be max or min, not {mode!r}")
    ptr, idx = g.neighborhood_csr()
    return kernels.neighborhood_extreme(np.ascontiguousarray(_as2d(Z)), ptr, idx, mode == "max")


# ------------------------------------------------------------ hull pickers

def _check_delta(delta: float):
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"shrink factor must lie in [0, 1), got {delta}")


def floor_weights(q: np.ndarray, delta: float) -> np.ndarray:
    """Effective weights (1-δ)/m + δ q for free-portion weights q on the simplex."""
    m = q.size
    return (1.0 - delta) / m + delta * q


def shrunk_hull_select(points, delta: float, selector: str = "uniform", rng=None,
                       weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Pick a point of δ∘co(points) (shrunk about the vertex centroid).

    selector:
      ``uniform``   the centroid itself;
      ``dirichlet`` free portion ~ Dirichlet(1, ..., 1) from ``rng``;
      ``weights``   caller's free-portion weights (on the simplex);
      ``rows``      caller's effective weights, checked against the floor.
    Returns (x, w) with x = Σ w_j p_j and every w_j >= (1-δ)/m.
    """
    _check_delta(delta)
    P = _as2d(points)
    m = P.shape[0]
    if m == 0:
        raise ValueError("no points")
    if selector == "uniform":
        w = np.full(m, 1.0 / m)
    elif selector == "dirichlet":
        if rng is None:
            raise ValueError("dirichlet selector needs an rng")
        w = floor_weights(rng.dirichlet(np.ones(m)), delta)
    elif selector == "weights":
        q = np.asarray(weights, dtype=float)
        if q.shape != (m,) or q.min() < 0 or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("free-portion weights must be a distribution over the points")
        w = floor_weights(q, delta)
    elif selector == "rows":
        w = np.asarray(weights, dtype=float)
        check_floor(w, delta)
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return w @ P, w


def check_floor(w: np.ndarray, delta: float, tol: float = 1e-12):
    m = w.size
    if abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    if w.min() < (1.0 - delta) / m - tol:
        raise ValueError(f"weight {w.min():.6g} below the shrink floor {(1 - delta) / m:.6g}")


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValueError("box with lo > hi")

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def shrink(self, delta: float) -> "Box":
        c, h = self.center, 0.5 * (self.hi - self.lo)
        return Box(c - delta * h, c + delta * h)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))


def cube_hull(points) -> Box:
    """Smallest axis-aligned box holding the points."""
    P = _as2d(points)
    if P.shape[0] == 0:
        raise ValueError("cube hull of an empty set")
    return Box(P.min(axis=0), P.max(axis=0))


def shrunk_cube_select(points, delta: float, selector: str = "uniform", rng=None,
                       point=None) -> np.ndarray:
    """A point of the δ-shrunk cube hull: ``uniform`` random, ``center`` or a clamped ``point``."""
    _check_delta(delta)
    box = cube_hull(points).shrink(delta)
    if selector == "center":
        return box.center
    if selector == "uniform":
        if rng is None:
            raise ValueError("uniform selector needs an rng")
        return box.lo + rng.random(box.lo.size) * (box.hi - box.lo)
    if selector == "point":
        return np.clip(np.asarray(point, dtype=float), box.lo, box.hi)
    raise ValueError(f"unknown selector {selector!r}")


def gradient_oriented_select(points, delta: float, hull_kind: str, z_i, direction
                             ) -> tuple[np.ndarray, bool]:
    """Point x of the shrunk hull maximising cos(direction, x - z_i).

    Among equally aligned points the one farthest from z_i is returned. If
    no point gives a nonzero step the shrunk centroid comes back with the
    fallback flag set.
    """
    _check_delta(delta)
    P = np.ascontiguousarray(_as2d(points))
    z = np.ascontiguousarray(np.asarray(z_i, dtype=float).ravel())
    g = np.ascontiguousarray(np.asarray(direction, dtype=float).ravel())
    if not np.all(np.isfinite(g)):
        raise ValueError("direction must be finite")
    if hull_kind == "convex":
        return kernels.hull_node(P, z, g, delta)
    if hull_kind == "cube":
        return kernels.cube_node(P, z, g, delta)
    raise ValueError(f"hull_kind must be convex or cube, not {hull_kind!r}")


# --------------------------------------------------------------- operators

@dataclass
class ConsensusOperator:
    kind: str
    graph: Graph
    W: WeightMatrix | None = None
    schedule: TransformSchedule = field(default_factory=TransformSchedule)
    p: float | None = None
    delta: float = 0.9
    selector: str = "dirichlet"
    rows: np.ndarray | None = None  # effective weights for the ``rows`` selector
    grad_sign: str = "negative"
    label: str = ""

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown consensus kind {self.kind!r}")
        if self.kind in ("hull", "cube_hull", "grad_hull", "grad_cube"):
            _check_delta(self.delta)
        if self.kind in ("linear", "transform", "pw_mean") and self.W is None:
            raise ValueError(f"{self.kind} consensus needs a weight matrix")
        if self.kind == "pw_mean":
            self.schedule = TransformSchedule(make_transform("power", self.p))
        if self.grad_sign not in ("negative", "positive"):
            raise ValueError("grad_sign must be negative or positive")
        if self.kind == "hull" and self.selector == "rows":
            if self.rows is None:
                if self.W is None:
                    raise ValueError("rows selector needs weights")
                self.rows = self.W.W
            for i in range(self.graph.n):
                nb = list(self.graph.closed_neighborhood(i))
                check_floor(self.rows[i, nb], self.delta)
                if np.any(np.delete(self.rows[i], nb)):
                    raise ValueError(f"row {i + 1} puts weight outside Nb({i + 1})")
        self._ptr, self._idx = self.graph.neighborhood_csr()
        if not self.label:
            self.label = self.kind if self.p is None else f"p={self.p:g}"

    @property
    def needs_direction(self) -> bool:
        return self.kind in ("grad_hull", "grad_cube")

    @property
    def theory_covered(self) -> bool:
        """Unshrunk max/min fall outside the convergence theory (only shrunk versions are)."""
        return self.kind not in ("max", "min")

    def hull_matrix(self, rng) -> np.ndarray:
        """Row-stochastic Wx[t] realising one hull selection per node."""
        if self.selector == "rows":
            return self.rows
        n = self.graph.n
        Wx = np.zeros((n, n))
        for i in range(n):
            nb = self._idx[self._ptr[i]:self._ptr[i + 1]]
            m = nb.size
            if self.selector == "uniform":
                Wx[i, nb] = 1.0 / m
            elif self.selector == "dirichlet":
                Wx[i, nb] = floor_weights(rng.dirichlet(np.ones(m)), self.delta)
            else:
                raise ValueError(f"selector {self.selector!r} not usable inside an operator")
        return Wx

    def apply(self, Z, t: int = 0, rng=None, direction=None) -> tuple[np.ndarray, dict]:
        Z = np.ascontiguousarray(_as2d(Z))
        info = {"fallbacks": 0, "clamped": 0}
        k = self.kind
        if self.schedule.default.positive_domain or self.kind == "pw_mean":
            info["clamped"] = int(np.count_nonzero(Z < 1e-12))
        if k == "linear":
            return self.W.W @ Z, info
        if k in ("transform", "pw_mean"):
            return transform_step(self.W, Z, self.schedule, t), info
        if k in ("max", "min"):
            return kernels.neighborhood_extreme(Z, self._ptr, self._idx, k == "max"), info
        if k == "hull":
            Wx = self.hull_matrix(rng)
            if self.schedule.uniform and self.schedule.default.kind == "identity":
                return Wx @ Z, info
            return transform_step(Wx, Z, self.schedule, t), info
        if k == "cube_hull":
            n, d = Z.shape
            X = np.empty_like(Z)
            for i in range(n):
                P = Z[self._idx[self._ptr[i]:self._ptr[i + 1]]]
                sel = "center" if self.selector == "center" else "uniform"
                X[i] = shrunk_cube_select(P, self.delta, sel, rng)
            return X, info
        if direction is None:
            raise ValueError(f"{k} consensus needs a direction per node")
        G = np.ascontiguousarray(_as2d(direction))
        if self.grad_sign == "negative":
            G = -G
        if k == "grad_hull":
            X, fb = kernels.grad_hull(Z, self._ptr, self._idx, G, self.delta)
        else:
            X, fb = kernels.grad_cube(Z, self._ptr, self._idx, G, self.delta)
        info["fallbacks"] = int(fb.sum())
        return X, info


def operator_from_config(cfg: dict, graph: Graph, W: WeightMatrix | None) -> ConsensusOperator:
    """``{"consensus": "pw_mean", "p": 5}``, ``{"consensus": "grad_cube", "delta": 0.9, ...}``."""
    cfg = dict(cfg)
    kind = cfg.pop("consensus")
    label = cfg.pop("label", "")
    if kind == "pw_mean":
        p = float(cfg["p"])
        if p == 1.0:
            label = label or "p=1"
        return ConsensusOperator("pw_mean", graph, W, p=p, label=label)
    if kind == "transform":
        return ConsensusOperator("transform", graph, W,
                                 schedule=TransformSchedule(transform_from_config(cfg.get("transform"))),
                                 label=label)
    if kind in ("linear", "max", "min"):
        return ConsensusOperator(kind, graph, W, label=label)
    sched = TransformSchedule(transform_from_config(cfg.get("transform")))
    return ConsensusOperator(kind, graph, W, schedule=sched, delta=float(cfg.get("delta", 0.9)),
                             selector=cfg.get("selector", "dirichlet" if kind == "hull" else "uniform"),
                             grad_sign=cfg.get("grad_sign", "negative"), label=label)


# ---------------------------------------------------------- pure consensus

def consensus_limit(X0, scheme: ConsensusOperator) -> np.ndarray:
    """Closed-form limit of repeated application, one value per dimension."""
    X0 = _as2d(X0)
    k = scheme.kind
    if k == "max":
        return X0.max(axis=0)
    if k == "min":
        return X0.min(axis=0)
    if k not in ("linear", "transform", "pw_mean"):
        raise UnsupportedScheme(f"no closed-form limit for {k} (depends on the selection path)")
    if not scheme.W.column_stochastic:
        raise UnsupportedScheme("closed-form limit needs a doubly stochastic matrix")
    if k == "linear":
        return X0.mean(axis=0)
    if not scheme.schedule.uniform:
        raise UnsupportedScheme("closed-form limit needs one transform for all nodes and times")
    phi = scheme.schedule.default
    return phi.inverse(phi.forward(X0).mean(axis=0))


def empirical_limit(X0, scheme: ConsensusOperator, rng=None, max_iters: int = 100_000,
                    span_tol: float = 1e-12) -> np.ndarray:
    """Limit of a path-dependent scheme found by running it to agreement.

    ``rng`` is deep-copied, so a later run with the same generator follows
    the same selection path and converges to the value returned here.
    """
    X = _as2d(X0).copy()
    rng = copy.deepcopy(rng)
    for t in range(max_iters):
        if span(X) <= span_tol:
            break
        X, _ = scheme.apply(X, t, rng)
    else:
        log.warning("empirical limit: span %.3g after %d iterations", span(X), max_iters)
    return X.mean(axis=0)


@dataclass
class ConsensusTrace:
    t: np.ndarray
    span: np.ndarray
    v_ratio: np.ndarray
    limit: np.ndarray
    X_final: np.ndarray
    max_iters: int


def run_pure_consensus(X0, operator: ConsensusOperator, max_iters: int = 1000, eps: float = 0.0,
                       limit=None, rng=None, span_tol: float = 0.0) -> ConsensusTrace:
    """Iterate ``operator`` alone, recording span and V[t]/V[0] about the limit.

    V[t] = Σ_i ‖x_i[t] - x*‖². Stops early once the ratio drops to ``eps``
    (when eps > 0) and the span to ``span_tol``. Hull schemes have no closed
    form, so their limit is the agreement point of the same seeded path.
    """
    X = _as2d(X0).copy()
    if limit is not None:
        xstar = np.asarray(limit, dtype=float)
    elif operator.kind in ("hull", "cube_hull"):
        xstar = empirical_limit(X, operator, rng)
    else:
        xstar = consensus_limit(X, operator)
    v0 = float(((X - xstar) ** 2).sum())
    ts, sps, rs = [0], [span(X)], [0.0 if v0 == 0 else 1.0]
    for t in range(max_iters):
        if eps > 0 and rs[-1] <= eps and sps[-1] <= span_tol:
            break
        if v0 == 0 and sps[-1] == 0:
            break
        X, _ = operator.apply(X, t, rng)
        v = float(((X - xstar) ** 2).sum())
        ts.append(t + 1)
        sps.append(span(X))
        rs.append(0.0 if v0 == 0 else v / v0)
    return ConsensusTrace(np.array(ts), np.array(sps), np.array(rs), xstar, X, max_iters)


def t_epsilon(trace: ConsensusTrace, eps: float) -> float:
    """First t with V[t]/V[0] <= eps; ``math.inf`` when the run was censored."""
    hit = np.flatnonzero(trace.v_ratio <= eps)
    return int(trace.t[hit[0]]) if hit.size else math.inf


# ------------------------------------------------------ contraction bounds

def contraction_factors(theta: float, L_plus: float, L_minus: float, D: int) -> tuple[float, float]:
    """(ρ̂, ρ) with ρ̂ = θ/(L₊L₋) and ρ = 1 - 2ρ̂^D, the D-step span contraction."""
    rho_hat = theta / (L_plus * L_minus)
    return rho_hat, 1.0 - 2.0 * rho_hat ** D


def span_envelope(t, span0: float, theta: float, L_plus: float, L_minus: float, D: int,
                  alpha: float, B: float) -> np.ndarray:
    """ρ^⌊t/D⌋ sp(X[0]) + 2αBL₊L₋/(1-ρ̂) for constant step α."""
    rho_hat, rho = contraction_factors(theta, L_plus, L_minus, D)
    t = np.asarray(t)
    return rho ** (t // D) * span0 + 2.0 * alpha * B * L_plus * L_minus / (1.0 - rho_hat)


# ---------------------------------------------------- cube-hull coverage

def transformed_hull_coverage(T, delta_cube: float, delta_hull: float, p_grid, n_samples: int,
                              seed: int = 0, tol: float = 1e-6) -> float:
    """Fraction of uniform samples of δ'∘cb(T) lying in some φ⁻¹(δ∘co(φ(T))).

    φ = (x₁^p₁, ..., x_d^p_d) over p_i on ``p_grid`` (p = 0 is the log map).
    A sample counts when its image is inside the shrunk transformed hull up
    to ``tol`` in facet distance.
    """
    from itertools import product

    from scipy.spatial import ConvexHull

    T = _as2d(T)
    if np.any(T <= 0):
        raise DomainError("coverage check needs a positive point set")
    d = T.shape[1]
    rng = np.random.default_rng(seed)
    box = cube_hull(T).shrink(delta_cube)
    Q = box.lo + rng.random((n_samples, d)) * (box.hi - box.lo)
    covered = np.zeros(n_samples, dtype=bool)
    tfs = [make_transform("power", float(p)) for p in p_grid]
    for combo in product(tfs, repeat=d):
        fT = np.column_stack([combo[l].forward(T[:, l]) for l in range(d)])
        c = fT.mean(axis=0)
        S = c + delta_hull * (fT - c)
        eq = ConvexHull(S).equations  # a·y + b <= 0 inside, |a| = 1
        todo = ~covered
        fQ = np.column_stack([combo[l].forward(Q[todo, l]) for l in range(d)])
        # facet distance in transformed space, rescaled by the local slope so tol is in x units
        slope = np.column_stack([np.abs(combo[l].derivative(Q[todo, l])) for l in range(d)]).max(axis=1)
        dist = (fQ @ eq[:, :-1].T + eq[:, -1]).max(axis=1)
        covered[np.flatnonzero(todo)[dist <= tol * slope]] = True
        if covered.all():
            break
    return float(covered.mean())


# --------------------------------------------------- span-contraction fuzz

def random_theta_matrix(n: int, theta, rng, exact: bool = False):
    """Row-stochastic n x n matrix with every entry in [θ, 1-θ] (needs nθ <= 1).

    Each row is θ + (1 - nθ)·q with q on the simplex. With ``exact`` the
    entries are Fractions (θ must then be a Fraction or decimal string) and
    rows sum to exactly 1.
    """
    from fractions import Fraction

    if exact:
        th = Fraction(theta)
        if n * th > 1:
            raise ValueError("n·θ must not exceed 1")
        rows = []
        for _ in range(n):
            k = rng.integers(1, 10**6, n)
            tot = int(k.sum())
            rows.append([th + (1 - n * th) * Fraction(int(v), tot) for v in k])
        return rows
    if n * theta > 1:
        raise ValueError("n·θ must not exceed 1")
    return theta + (1.0 - n * theta) * rng.dirichlet(np.ones(n), size=n)


def span_contraction_fuzz(trials: int, theta, seed: int = 0, n_max: int | None = None,
                          exact: bool = True) -> int:
    """Count violations of sp(Wv) <= (1-2θ) sp(v) over random (W, v).

    ``exact`` runs the comparison in rational arithmetic so no round-off
    slack is needed.
    """
    from fractions import Fraction

    rng = np.random.default_rng(seed)
    th = Fraction(str(theta)) if exact else float(theta)
    cap = int(1 / th)
    if n_max is not None:
        cap = min(cap, n_max)
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(2, cap + 1))
        W = random_theta_matrix(n, th, rng, exact=exact)
        if exact:
            v = [Fraction(int(k), 1000) for k in rng.integers(-10**6, 10**6, n)]
            w = [sum(a * b for a, b in zip(row, v)) for row in W]
            lhs, rhs = max(w) - min(w), (1 - 2 * th) * (max(v) - min(v))
        else:
            v = rng.uniform(-1e3, 1e3, n)
            w = W @ v
            lhs, rhs = np.ptp(w), (1 - 2 * th) * np.ptp(v)
        bad += lhs > rhs
    return int(bad)


def trace_rows(trace: ConsensusTrace) -> list[tuple]:
    """(t, span, V_ratio) rows for CSV export."""
    return [(int(t), float(s), float(r)) for t, s, r in zip(trace.t, trace.span, trace.v_ratio)]
