"""Per-node quadratic objectives f_i(x) = ½ xᵀH_i x + l_iᵀx and their sum F.

The network experiment family lets node i see only the blocks of its
closed neighborhood: f_i(x) = ½‖M_i x^{Nb(i)}‖² + b_iᵀx^{Nb(i)}.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import lsq_linear

from .graph import Graph, build_topology

log = logging.getLogger(__name__)

SC_GATE = 1e-8
MAX_RESAMPLES = 32
MAX_COND = 1e12
CONSTRAINTS = ("all", "nonneg")


class ObjectiveError(ValueError):
    pass


def project(X, K: str) -> np.ndarray:
    if K == "all":
        return X
    if K == "nonneg":
        return np.maximum(X, 0.0)
    raise ObjectiveError(f"unknown constraint set {K!r}")


@dataclass
class QuadraticObjective:
    """Dense per-node Hessians ``H`` (n x d x d) and linear terms ``lin`` (n x d)."""

    H: np.ndarray
    lin: np.ndarray
    K: str = "all"
    _opt: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float)
        if self.H.ndim != 3 or self.H.shape[1:] != (self.d, self.d) or self.lin.shape[0] != self.n:
            raise ObjectiveError("H must be n x d x d and lin n x d")
        if self.K not in CONSTRAINTS:
            raise ObjectiveError(f"unknown constraint set {self.K!r}")
        self.A = self.H.sum(axis=0)
        self.c = self.lin.sum(axis=0)

    @property
    def n(self) -> int:
        return self.lin.shape[0]

    @property
    def d(self) -> int:
        return self.lin.shape[1]

    def value(self, i: int, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H[i] @ x + self.lin[i] @ x)

    def gradient(self, i: int, x) -> np.ndarray:
        return self.H[i] @ np.asarray(x, dtype=float) + self.lin[i]

    def gradients(self, X) -> np.ndarray:
        """Row i is ∇f_i(x_i)."""
        return np.einsum("nij,nj->ni", self.H, X) + self.lin

    def total(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.A @ x + self.c @ x)

    def total_gradient(self, x) -> np.ndarray:
        return self.A @ x + self.c

    def project(self, X):
        return project(X, self.K)

    @property
    def optimum(self) -> tuple[np.ndarray, float]:
        if self._opt is None:
            self._opt = solve_optimum(self)
        return self._opt

    # own-block bookkeeping; the generic objective has none
    def own_blocks(self, X) -> np.ndarray | None:
        return None


@dataclass
class QuadraticEnsemble(QuadraticObjective):
    graph: Graph | None = None
    dprime: int = 1
    M: list = field(default_factory=list)
    b: list = field(default_factory=list)
    seed: int | None = None
    shared_Mb: bool = False

    def block_index(self, i: int) -> np.ndarray:
        """Coordinates of x^{Nb(i)}: ascending neighbor order, self included."""
        dp = self.dprime
        return np.concatenate([np.arange(j * dp, (j + 1) * dp) for j in self.graph.closed_neighborhood(i)])

    def local_value(self, i: int, x) -> float:
        """Evaluates through M_i on the local blocks; independent of the dense H path."""
        xs = np.asarray(x, dtype=float)[self.block_index(i)]
        r = self.M[i] @ xs
        return float(0.5 * r @ r + self.b[i] @ xs)

    def local_gradient(self, i: int, x) -> np.ndarray:
        idx = self.block_index(i)
        xs = np.asarray(x, dtype=float)[idx]
        out = np.zeros(self.d)
        out[idx] = self.M[i].T @ (self.M[i] @ xs) + self.b[i]
        return out

    def own_blocks(self, X) -> np.ndarray:
        """x_a: node i contributes its own block of its own copy."""
        X = np.asarray(X)
        dp = self.dprime
        return np.concatenate([X[i, i * dp:(i + 1) * dp] for i in range(self.n)])

    def to_dict(self) -> dict:
        xs, Fs = self.optimum
        g = self.graph
        return {"graph": {"name": g.name, "n": g.n, "edges": sorted([list(e) for e in g.edges])},
                "dprime": self.dprime, "seed": self.seed, "shared_Mb": self.shared_Mb, "K": self.K,
                "M": [m.tolist() for m in self.M], "b": [v.tolist() for v in self.b],
                "x_star": xs.tolist(), "F_star": Fs}


def _assemble(g: Graph, dprime: int, M: list, b: list, K: str, **kw) -> QuadraticEnsemble:
    n, d = g.n, g.n * dprime
    H = np.zeros((n, d, d))
    lin = np.zeros((n, d))
    for i in range(n):
        idx = np.concatenate([np.arange(j * dprime, (j + 1) * dprime) for j in g.closed_neighborhood(i)])
        if M[i].shape != (idx.size, idx.size) or b[i].shape != (idx.size,):
            raise ObjectiveError(f"node {i + 1}: local data must be {idx.size}-dimensional")
        H[i][np.ix_(idx, idx)] = M[i].T @ M[i]
        lin[i, idx] = b[i]
    return QuadraticEnsemble(H, lin, K, graph=g, dprime=dprime, M=list(M), b=list(b), **kw)


def quadratic_from_local(g: Graph, dprime: int, M: list, b: list, K: str = "nonneg") -> QuadraticEnsemble:
    """Fixture constructor from caller-supplied (M_i, b_i)."""
    return _assemble(g, dprime, [np.asarray(m, float) for m in M], [np.asarray(v, float) for v in b], K)


def generate_partial_quadratic(g: Graph, dprime: int = 2, seed: int = 0, shared_Mb: bool = False,
                               K: str = "nonneg", m_range=(-1.0, 1.0), b_range=(-150.0, -50.0)
                               ) -> QuadraticEnsemble:
    """Random M_i ~ U[m_range], b_i ~ U[b_range] per node (one shared pair with ``shared_Mb``).

    Redraws with seed+1, seed+2, ... while λ_min(A) <= 1e-8.
    """
    if dprime < 1:
        raise ObjectiveError("dprime must be >= 1")
    sizes = [len(g.closed_neighborhood(i)) * dprime for i in range(g.n)]
    if shared_Mb and len(set(sizes)) > 1:
        raise ObjectiveError("a shared (M, b) needs a regular graph")
    for attempt in range(MAX_RESAMPLES):
        s = seed + attempt
        rng = np.random.default_rng(s)
        if shared_Mb:
            M0 = rng.uniform(*m_range, (sizes[0], sizes[0]))
            b0 = rng.uniform(*b_range, sizes[0])
            M, b = [M0] * g.n, [b0] * g.n
        else:
            M, b = [], []
            for m in sizes:
                M.append(rng.uniform(*m_range, (m, m)))
                b.append(rng.uniform(*b_range, m))
        q = _assemble(g, dprime, M, b, K, seed=s, shared_Mb=shared_Mb)
        lmin = np.linalg.eigvalsh(q.A)[0]
        if lmin > SC_GATE:
            return q
        log.warning("seed %d: lambda_min(A) = %.3g, not strongly convex; resampling", s, lmin)
    raise ObjectiveError(f"no strongly convex draw in {MAX_RESAMPLES} attempts from seed {seed}")


def generate_strongly_convex(n: int, d: int, seed: int = 0, spread: float = 5.0, center: float = 10.0,
                             K: str = "all", x_target=None) -> QuadraticObjective:
    """H_i = center·I + E_i with ΣE_i = 0 and spectra inside center ± spread.

    The linear terms are chosen so the minimiser of F is ``x_target``
    (default: a positive point drawn from the seed). Good conditioning makes
    constant-step rate measurements clean.
    """
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n, d, d))
    E = 0.5 * (E + E.transpose(0, 2, 1))
    E -= E.mean(axis=0)
    E *= spread / max(np.abs(np.linalg.eigvalsh(E)).max(), 1e-300)
    H = center * np.eye(d) + E
    if x_target is None:
        x_target = rng.uniform(3.0, 7.0, d)
    lin = rng.standard_normal((n, d)) * center
    A = H.sum(axis=0)
    lin += (-(A @ x_target) - lin.sum(axis=0)) / n
    return QuadraticObjective(H, lin, K)


def exact_optimum(q: QuadraticObjective) -> tuple[np.ndarray, float]:
    """Unconstrained minimiser of F by a Cholesky solve of A x = -c."""
    cond = np.linalg.cond(q.A)
    if not cond <= MAX_COND:
        raise ObjectiveError(f"aggregate Hessian condition number {cond:.3g} exceeds {MAX_COND:g}")
    x = linalg.cho_solve(linalg.cho_factor(q.A), -q.c)
    res = np.linalg.norm(q.A @ x + q.c)
    if res > 1e-8 * max(np.linalg.norm(q.c), 1e-300):
        raise ObjectiveError(f"optimum residual {res:.3g} too large")
    return x, q.total(x)


def solve_optimum(q: QuadraticObjective) -> tuple[np.ndarray, float]:
    """Minimiser of F over K.

    On the orthant, when the free minimiser is infeasible, F is rewritten as
    ½‖Lᵀx + L⁻¹c‖² + const (A = LLᵀ) and solved as a bounded least-squares
    problem; the KKT conditions are checked on the way out.
    """
    x, F = exact_optimum(q)
    if q.K == "all" or x.min() >= 0:
        return x, F
    log.info("free optimum leaves the nonnegative orthant (min %.3g); solving the constrained QP", x.min())
    L = np.linalg.cholesky(q.A)
    rhs = -linalg.solve_triangular(L, q.c, lower=True)
    x = np.maximum(lsq_linear(L.T, rhs, bounds=(0.0, np.inf), method="bvls", tol=1e-15).x, 0.0)
    g = q.total_gradient(x)
    scale = np.abs(q.A).max() * max(np.abs(x).max(), 1.0) + np.abs(q.c).max()
    if g.min() < -1e-9 * scale or np.abs(g[x > 0]).max(initial=0.0) > 1e-9 * scale:
        raise ObjectiveError("constrained optimum failed its KKT check")
    return x, q.total(x)


def optimum_interior(q: QuadraticObjective) -> bool:
    """True when the free minimiser already lies in K (typical for the network family)."""
    return q.K == "all" or bool(exact_optimum(q)[0].min() >= 0)


@dataclass(frozen=True)
class Constants:
    B: float
    L_f: float
    nu: float


def padded_box(X, pad: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = X.min(axis=0), X.max(axis=0)
    w = np.maximum(hi - lo, np.maximum(np.abs(hi), 1.0) * 1e-12)
    return lo - pad * w, hi + pad * w


def constants(q: QuadraticObjective, region=None) -> Constants:
    """Gradient bound B over a box, L_f = max λ_max(H_i), ν = λ_min(A)/n.

    B bounds ‖H_i x + l_i‖ on the box row by row with interval arithmetic.
    """
    eig = np.linalg.eigvalsh(q.H)
    L_f = float(eig[:, -1].max())
    nu = float(np.linalg.eigvalsh(q.A)[0] / q.n)
    if region is None:
        if np.any(q.H):
            raise ObjectiveError("gradient bound needs a bounded region")
        return Constants(float(np.linalg.norm(q.lin, axis=1).max()), L_f, nu)
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (q.d,)) for v in region)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) and np.any(q.H):
        raise ObjectiveError("gradient bound needs a bounded region")
    Hp, Hm = np.maximum(q.H, 0), np.minimum(q.H, 0)
    up = Hp @ hi + Hm @ lo + q.lin
    dn = Hp @ lo + Hm @ hi + q.lin
    B = float(np.sqrt(np.maximum(up ** 2, dn ** 2).sum(axis=1)).max())
    return Constants(B, L_f, nu)


def surrogate_argmin(grad_i, x_i, pi, tau: float, K: str = "all") -> np.ndarray:
    """Minimiser over K of the linearised model plus (τ/2)‖x - x_i‖² and πᵀx.

    Works row-wise on stacked inputs too.
    """
    if not tau > 0:
        raise ObjectiveError("tau must be positive")
    x_i = np.asarray(x_i, dtype=float)
    return project(x_i - (np.asarray(grad_i) + np.asarray(pi)) / tau, K)


def surrogate_gradient(grad_anchor, anchor, x, tau: float) -> np.ndarray:
    """∇ of the linearised surrogate at x, anchored at ``anchor``."""
    return np.asarray(grad_anchor) + tau * (np.asarray(x) - np.asarray(anchor))


# -------------------------------------------------------------- serialisation

def ensemble_from_dict(dct: dict) -> QuadraticEnsemble:
    gd = dct["graph"]
    g = build_topology("custom", n=gd["n"], edges=[tuple(e) for e in gd["edges"]])
    q = quadratic_from_local(g, dct["dprime"], dct["M"], dct["b"], dct.get("K", "nonneg"))
    q.seed, q.shared_Mb = dct.get("seed"), dct.get("shared_Mb", False)
    return q


def save_ensemble(q: QuadraticEnsemble, path) -> None:
    with open(path, "w") as fh:
        json.dump(q.to_dict(), fh, sort_keys=True)


def load_ensemble(path) -> QuadraticEnsemble:
    with open(path) as fh:
        return ensemble_from_dict(json.load(fh))
