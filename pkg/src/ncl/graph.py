"""Communication topologies and averaging matrices.

Node indices are 0-based everywhere inside the package. Config files and
edge lists read from disk use 1-based indices; :func:`load_graph_config`
is the only place where the shift happens.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

# 19-cell hexagonal wrap-around: cell i touches i±1, i±7, i±8 (mod 19).
# Each cell sees its 6 ring-1 cells at one hop and the 12 ring-2 cells at two.
WRAP19_TABLE = (
    (1, 7, 8, 11, 12, 18),
    (0, 2, 8, 9, 12, 13),
    (1, 3, 9, 10, 13, 14),
    (2, 4, 10, 11, 14, 15),
    (3, 5, 11, 12, 15, 16),
    (4, 6, 12, 13, 16, 17),
    (5, 7, 13, 14, 17, 18),
    (0, 6, 8, 14, 15, 18),
    (0, 1, 7, 9, 15, 16),
    (1, 2, 8, 10, 16, 17),
    (2, 3, 9, 11, 17, 18),
    (0, 3, 4, 10, 12, 18),
    (0, 1, 4, 5, 11, 13),
    (1, 2, 5, 6, 12, 14),
    (2, 3, 6, 7, 13, 15),
    (3, 4, 7, 8, 14, 16),
    (4, 5, 8, 9, 15, 17),
    (5, 6, 9, 10, 16, 18),
    (0, 6, 7, 10, 11, 17),
)


class GraphError(ValueError):
    """Invalid topology or weight matrix."""


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset  # of (i, j) with i < j
    name: str = "custom"
    _nbrs: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nbrs = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(self, "_nbrs", tuple(tuple(sorted(x)) for x in nbrs))

    def neighbors(self, i: int) -> tuple:
        """N(i), ascending."""
        return self._nbrs[i]

    def closed_neighborhood(self, i: int) -> tuple:
        """Nb(i) = N(i) ∪ {i}, ascending."""
        return tuple(sorted(self._nbrs[i] + (i,)))

    def degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self._nbrs], dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=np.int64)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        return a

    def neighborhood_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Closed neighborhoods as (indptr, indices) for the kernels."""
        ptr = [0]
        idx = []
        for i in range(self.n):
            nb = self.closed_neighborhood(i)
            idx.extend(nb)
            ptr.append(len(idx))
        return np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64)

    def is_connected(self) -> bool:
        return len(_bfs(self, 0)) == self.n


def _bfs(g: Graph, src: int) -> dict:
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in g.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _make(n: int, pairs, name: str) -> Graph:
    edges = set()
    for a, b in pairs:
        a, b = int(a), int(b)
        if not (0 <= a < n and 0 <= b < n):
            raise GraphError(f"edge ({a + 1},{b + 1}) references a node outside 1..{n}")
        if a == b:
            raise GraphError(f"self-loop at node {a + 1}")
        edges.add((min(a, b), max(a, b)))
    g = Graph(n=n, edges=frozenset(edges), name=name)
    if not g.is_connected():
        reached = sorted(_bfs(g, 0))
        missing = [k + 1 for k in range(n) if k not in set(reached)]
        raise GraphError(f"graph is disconnected; unreachable from node 1: {missing}")
    return g


def build_topology(kind: str, n: int | None = None, edges=None) -> Graph:
    """Build one of the shipped topologies.

    ``kind`` is ``wrap19``, ``ring``, ``complete`` or ``custom``. Custom
    edge lists are 0-based pairs here; use :func:`load_graph_config` for
    1-based input.
    """
    if kind == "wrap19":
        pairs = [(i, j) for i, row in enumerate(WRAP19_TABLE) for j in row if i < j]
        return _make(19, pairs, "wrap19")
    if kind in ("ring", "complete"):
        if n is None or n < 2:
            raise GraphError(f"{kind} topology needs n >= 2")
        if kind == "ring":
            pairs = [(i, (i + 1) % n) for i in range(n)]
        else:
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        return _make(n, pairs, f"{kind}{n}")
    if kind == "custom":
        if edges is None:
            raise GraphError("custom topology needs an edge list")
        if n is None:
            n = 1 + max(max(e) for e in edges)
        return _make(n, edges, "custom")
    raise GraphError(f"unknown topology {kind!r}")


def diameter(g: Graph) -> int:
    """Largest shortest-path hop count over all node pairs (BFS from each node)."""
    best = 0
    for s in range(g.n):
        dist = _bfs(g, s)
        if len(dist) < g.n:
            raise GraphError(f"graph is disconnected (node {s + 1} cannot reach all nodes)")
        best = max(best, max(dist.values()))
    return best


@dataclass(frozen=True)
class WeightMatrix:
    W: np.ndarray

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def support(self) -> np.ndarray:
        return self.W > 0

    @property
    def theta(self) -> float:
        """Smallest nonzero entry."""
        return float(self.W[self.W > 0].min())

    @property
    def row_stochastic(self) -> bool:
        return bool(np.all(np.abs(self.W.sum(axis=1) - 1.0) <= 1e-12))

    @property
    def column_stochastic(self) -> bool:
        return bool(np.all(np.abs(self.W.sum(axis=0) - 1.0) <= 1e-12))

    @property
    def symmetric(self) -> bool:
        return bool(np.array_equal(self.W, self.W.T))


def metropolis_weights(g: Graph) -> WeightMatrix:
    """W_ij = [1{i=j}(dbar - d_i) + 1{i≠j}] / dbar on Nb(i), with dbar = max degree + 1."""
    deg = g.degrees()
    dbar = float(deg.max() + 1)
    W = np.zeros((g.n, g.n))
    off = 1.0 / dbar
    for i, j in g.edges:
        W[i, j] = off
        W[j, i] = off
    for i in range(g.n):
        W[i, i] = (dbar - deg[i]) / dbar
    return WeightMatrix(W)


def custom_weights(g: Graph, self_weight: float, edge_weight: float) -> WeightMatrix:
    """Constant self/edge weights, e.g. 3/5 and 1/5 on the five-node ring."""
    W = np.zeros((g.n, g.n))
    for i, j in g.edges:
        W[i, j] = W[j, i] = edge_weight
    np.fill_diagonal(W, self_weight)
    return WeightMatrix(W)


@dataclass
class StochasticityReport:
    row_sums: np.ndarray
    col_sums: np.ndarray
    row_stochastic: bool
    column_stochastic: bool
    support_ok: bool
    support_violations: list
    theta: float
    symmetric: bool
    spectral_deviation: float

    @property
    def fatal(self) -> bool:
        return not self.support_ok

    @property
    def valid(self) -> bool:
        """Usable as a consensus matrix for y: doubly stochastic and ‖W - J‖₂ < 1."""
        return (self.support_ok and self.row_stochastic and self.column_stochastic
                and self.spectral_deviation < 1.0 - 1e-12)


def spectral_deviation(W: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000,
                       seed: int = 0) -> float:
    """‖W - (1/n)𝟙𝟙ᵀ‖₂ by power iteration on MᵀM."""
    n = W.shape[0]
    M = W - np.full((n, n), 1.0 / n)
    MtM = M.T @ M
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = MtM @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(nw - lam) <= tol * nw:
            lam = nw
            break
        lam = nw
    # Rayleigh quotient sharpens the converged estimate
    return float(np.sqrt(max(v @ MtM @ v, 0.0)))


def validate_weights(w: WeightMatrix, g: Graph) -> StochasticityReport:
    if w.W.shape != (g.n, g.n):
        raise GraphError(f"weight matrix shape {w.W.shape} does not match n={g.n}")
    viol = []
    adj = g.adjacency().astype(bool) | np.eye(g.n, dtype=bool)
    for i, j in zip(*np.nonzero((w.W > 0) & ~adj)):
        viol.append((int(i), int(j)))
    return StochasticityReport(
        row_sums=w.W.sum(axis=1),
        col_sums=w.W.sum(axis=0),
        row_stochastic=w.row_stochastic,
        column_stochastic=w.column_stochastic,
        support_ok=not viol,
        support_violations=viol,
        theta=w.theta,
        symmetric=w.symmetric,
        spectral_deviation=spectral_deviation(w.W),
    )


def load_graph_config(cfg: dict) -> tuple[Graph, WeightMatrix]:
    """Graph + weights from the JSON config form (1-based edges).

    ``{"topology": "ring", "n": 5, "weights": {"self": 0.6, "edge": 0.2}}``
    ``{"topology": "custom", "edges": [[1, 2], [2, 3]]}``
    """
    kind = cfg.get("topology", "wrap19")
    if kind == "custom":
        edges = [(int(a) - 1, int(b) - 1) for a, b in cfg["edges"]]
        g = build_topology("custom", n=cfg.get("n"), edges=edges)
    else:
        g = build_topology(kind, n=cfg.get("n"))
    wcfg = cfg.get("weights", "metropolis")
    if wcfg == "metropolis":
        wm = metropolis_weights(g)
    elif isinstance(wcfg, dict) and "self" in wcfg:
        wm = custom_weights(g, float(wcfg["self"]), float(wcfg["edge"]))
    elif isinstance(wcfg, dict) and "matrix" in wcfg:
        wm = WeightMatrix(np.asarray(wcfg["matrix"], dtype=float))
    else:
        raise GraphError(f"unrecognised weights spec {wcfg!r}")
    if validate_weights(wm, g).fatal:
        raise GraphError("weights put mass outside closed neighborhoods")
    return g, wm
