"""DGD and NEXT engines with pluggable consensus.

Every run is a pure function of (config, objective, weights, X0, seed) and
returns a :class:`RunRecord` holding per-iteration metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .consensus import ConsensusOperator, span, transform_step
from .graph import WeightMatrix
from .objectives import QuadraticObjective, surrogate_argmin
from .transforms import POSITIVE_FLOOR, Transform, TransformSchedule

DIVERGENCE_LIMIT = 1e12
ALGORITHMS = ("dgd", "dgd_transform", "dgd_track", "next")


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "power_decay"  # constant | power_decay
    a: float = 0.8
    b: float = 0.53

    def __post_init__(self):
        if self.kind not in ("constant", "power_decay"):
            raise ConfigError(f"unknown step schedule {self.kind!r}")
        if not self.a > 0:
            raise ConfigError("step size must be positive")

    @classmethod
    def constant(cls, alpha: float) -> "StepSchedule":
        return cls("constant", alpha, 0.0)

    @property
    def diminishing_nonsummable(self) -> bool:
        return self.kind == "power_decay" and 0.5 < self.b <= 1.0

    def __call__(self, t: int) -> float:
        return step_schedule_eval(self, t)


def step_schedule_eval(s: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if s.kind == "constant":
        return s.a
    return s.a * (t + 1) ** (-s.b)


@dataclass
class OptimizerConfig:
    algorithm: str = "next"
    consensus: dict = field(default_factory=lambda: {"consensus": "linear"})
    schedule: StepSchedule = field(default_factory=StepSchedule)
    tau: float = 100.0
    iters: int = 2000
    seed: int = 0
    cadence: int = 1
    consensus_rounds: int = 1
    metric_point: str = "auto"  # auto | x_a | mean

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = StepSchedule(**self.schedule)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.iters < 0 or self.cadence < 1 or self.consensus_rounds < 1:
            raise ConfigError("iters >= 0, cadence >= 1 and consensus_rounds >= 1 required")
        if self.metric_point not in ("auto", "x_a", "mean"):
            raise ConfigError(f"unknown metric point {self.metric_point!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config: dict
    seed: int
    iters: int
    series: dict  # column name -> np.ndarray
    X_final: np.ndarray
    x_a: np.ndarray
    F_final: float
    counters: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def metrics(self) -> list[dict]:
        cols = ("t", "gap_rel", "dev_total", "span", "y_residual", "alpha")
        out = []
        for k in range(len(self.series["t"])):
            row = {}
            for c in cols:
                v = self.series[c][k]
                row[c] = int(v) if c == "t" else (None if math.isnan(v) else float(v))
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed, "iters": self.iters,
                "metrics": self.metrics(),
                "final": {"x_a": [float(v) for v in self.x_a], "F": float(self.F_final)},
                "counters": self.counters, "flags": self.flags,
                "stamp": {"version": __version__, "config_hash": config_hash(self.config)}}


class _Recorder:
    def __init__(self, obj: QuadraticObjective, cfg: OptimizerConfig):
        self.obj = obj
        self.cadence = cfg.cadence
        self.xstar, self.Fstar = obj.optimum
        use_xa = cfg.metric_point == "x_a" or (cfg.metric_point == "auto" and cfg.algorithm == "next")
        self.use_xa = use_xa and obj.own_blocks(self.xstar[None].repeat(obj.n, 0)) is not None
        self.rows = {k: [] for k in ("t", "gap_rel", "gap", "xbar_dist2", "dev_total", "span", "y_residual",
                                     "alpha")}

    def point(self, X):
        return self.obj.own_blocks(X) if self.use_xa else X.mean(axis=0)

    def __call__(self, t, X, alpha, Y=None, G=None, force=False):
        if t % self.cadence and not force:
            return
        obj, r = self.obj, self.rows
        x = self.point(X)
        gap = obj.total(x) - self.Fstar
        xbar = X.mean(axis=0)
        r["t"].append(t)
        r["gap"].append(obj.total(xbar) - self.Fstar)
        r["xbar_dist2"].append(float(((xbar - self.xstar) ** 2).sum()))
        r["gap_rel"].append(abs(gap) / abs(self.Fstar) if self.Fstar != 0 else abs(gap))
        own = obj.own_blocks(X)
        if own is not None:
            r["dev_total"].append(float(((own - self.xstar) ** 2).sum()))
        else:
            r["dev_total"].append(float(((X - self.xstar) ** 2).sum()))
        r["span"].append(span(X))
        if Y is None:
            r["y_residual"].append(math.nan)
        else:
            r["y_residual"].append(float(np.abs(Y.mean(axis=0) - G.mean(axis=0)).max()))
        r["alpha"].append(alpha)

    def finish(self, cfg: OptimizerConfig, X, **kw) -> RunRecord:
        series = {k: np.asarray(v, dtype=float) for k, v in self.rows.items()}
        series["t"] = series["t"].astype(int)
        x = self.point(X)
        return RunRecord(cfg.to_dict(), cfg.seed, cfg.iters, series, X, x, self.obj.total(x), **kw)


def _guard(X, t):
    bad = ~np.isfinite(X) | (np.abs(X) > DIVERGENCE_LIMIT)
    if bad.any():
        i, l = np.argwhere(bad)[0]
        raise DivergenceError(f"iterate blew up at t={t}: node {i + 1}, dim {l + 1}, value {X[i, l]!r}")


def _wm(W) -> np.ndarray:
    return W.W if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)


def _require_doubly(W, what):
    if isinstance(W, WeightMatrix):
        ok = W.row_stochastic and W.column_stochastic
    else:
        Wm = np.asarray(W, dtype=float)
        ok = np.allclose(Wm.sum(0), 1, atol=1e-12, rtol=0) and np.allclose(Wm.sum(1), 1, atol=1e-12, rtol=0)
    if not ok:
        raise ConfigError(f"{what} must be doubly stochastic")


def dgd_run(cfg: OptimizerConfig, obj: QuadraticObjective, W, X0, order: str = "mix_then_step"
            ) -> RunRecord:
    """x_i ← Σ_j W_ij x_j - α ∇f_i(x_i).

    ``order="step_then_mix"`` runs x_i ← Σ_j W_ij (x_j - α ∇f_j(x_j)) instead,
    the form the transformed variant reduces to under the identity map.
    """
    _require_doubly(W, "DGD weights")
    if order not in ("mix_then_step", "step_then_mix"):
        raise ConfigError(f"unknown DGD order {order!r}")
    Wm = _wm(W)
    X = np.array(X0, dtype=float)
    rec = _Recorder(obj, cfg)
    for t in range(cfg.iters):
        a = cfg.schedule(t)
        rec(t, X, a)
        if order == "mix_then_step":
            X = Wm @ X - a * obj.gradients(X)
        else:
            X = Wm @ (X - a * obj.gradients(X))
        _guard(X, t + 1)
    rec(cfg.iters, X, cfg.schedule(cfg.iters), force=True)
    return rec.finish(cfg, X)


def dgd_transform_run(cfg: OptimizerConfig, obj: QuadraticObjective, W, X0,
                      schedule: TransformSchedule | Transform) -> RunRecord:
    """x_i ← φ⁻¹(Σ_j W_ij φ(x_j - α ∇f_j(x_j))); arguments under the floor are clamped."""
    _require_doubly(W, "DGD weights")
    if isinstance(schedule, Transform):
        schedule = TransformSchedule(schedule)
    X = np.array(X0, dtype=float)
    rec = _Recorder(obj, cfg)
    positive = schedule.default.positive_domain or not schedule.uniform
    clamped = 0
    for t in range(cfg.iters):
        a = cfg.schedule(t)
        rec(t, X, a)
        Z = X - a * obj.gradients(X)
        if positive:
            clamped += int(np.count_nonzero(Z < POSITIVE_FLOOR))
        X = transform_step(W, Z, schedule, t)
        _guard(X, t + 1)
    rec(cfg.iters, X, cfg.schedule(cfg.iters), force=True)
    return rec.finish(cfg, X, counters={"clamped": clamped})


def dgd_track_run(cfg: OptimizerConfig, obj: QuadraticObjective, Wx, Wy, X0) -> RunRecord:
    """x ← Wx x - α y ; y ← Wy y + ∇f(x_new) - ∇f(x_old). Wx need only be row stochastic."""
    _require_doubly(Wy, "tracking weights")
    Wxm, Wym = _wm(Wx), _wm(Wy)
    if not np.allclose(Wxm.sum(axis=1), 1.0, atol=1e-12, rtol=0):
        raise ConfigError("Wx must be row stochastic")
    X = np.array(X0, dtype=float)
    G = obj.gradients(X)
    Y = G.copy()
    rec = _Recorder(obj, cfg)
    for t in range(cfg.iters):
        a = cfg.schedule(t)
        rec(t, X, a, Y, G)
        X = Wxm @ X - a * Y
        _guard(X, t + 1)
        Gn = obj.gradients(X)
        Y = Wym @ Y + (Gn - G)
        G = Gn
    rec(cfg.iters, X, cfg.schedule(cfg.iters), Y, G, force=True)
    return rec.finish(cfg, X, flags={"empirical_only": True})


def next_run(cfg: OptimizerConfig, obj: QuadraticObjective, op: ConsensusOperator, Wy, X0) -> RunRecord:
    """NEXT with exact local solves and ``op`` as the x-consensus step."""
    _require_doubly(Wy, "tracking weights")
    Wym = _wm(Wy)
    n = obj.n
    rng = np.random.default_rng(cfg.seed)
    X = obj.project(np.array(X0, dtype=float))
    G = obj.gradients(X)
    Y = G.copy()
    Pi = n * Y - G
    rec = _Recorder(obj, cfg)
    counters = {"clamped": 0, "fallbacks": 0}
    for t in range(cfg.iters):
        a = cfg.schedule(t)
        rec(t, X, a, Y, G)
        Xt = surrogate_argmin(G, X, Pi, cfg.tau, obj.K)
        Z = X + a * (Xt - X)
        for _ in range(cfg.consensus_rounds):
            Z, info = op.apply(Z, t, rng, direction=Y)
            counters["clamped"] += info["clamped"]
            counters["fallbacks"] += info["fallbacks"]
        X = Z
        _guard(X, t + 1)
        Gn = obj.gradients(X)
        Y = Wym @ Y + (Gn - G)
        Pi = n * Y - Gn
        G = Gn
    rec(cfg.iters, X, cfg.schedule(cfg.iters), Y, G, force=True)
    return rec.finish(cfg, X, counters=counters)


def stationarity_probe(obj: QuadraticObjective, x, n_probe: int = 1000, seed: int = 0,
                       box=None) -> float:
    """min over random feasible y of ∇F(x)ᵀ(y - x); y uniform in K ∩ box."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    if box is None:
        w = max(np.abs(x).max(), 1.0)
        box = (x - w, x + w)
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), x.shape) for v in box)
    if obj.K == "nonneg":
        lo = np.maximum(lo, 0.0)
    Yp = lo + rng.random((n_probe, x.size)) * (hi - lo)
    return float(((Yp - x) @ obj.total_gradient(x)).min())
