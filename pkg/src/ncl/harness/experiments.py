"""Scenario runner: pure consensus, single optimisation runs, seeded sweeps, figure reproduction."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..consensus import ConsensusOperator, operator_from_config, run_pure_consensus, t_epsilon, trace_rows
from ..graph import GraphError, load_graph_config
from ..objectives import QuadraticObjective, generate_partial_quadratic, load_ensemble
from ..optimizers import (ConfigError, OptimizerConfig, config_hash, dgd_run, dgd_track_run,
                          dgd_transform_run, next_run)
from ..transforms import TransformSchedule, transform_from_config
from . import io

log = logging.getLogger(__name__)

SCENARIOS = ("pure_consensus", "optimize", "sweep", "reproduce_fig3", "reproduce_fig4", "validate")

FIG3_SCHEMES = [{"consensus": "pw_mean", "p": p, "label": f"p={p}"} for p in (-3, -1, 1, 2, 5)] + [
    {"consensus": "max", "label": "max"},
    {"consensus": "min", "label": "min"},
    {"consensus": "grad_hull", "delta": 0.9, "label": "grad_hull"},
    {"consensus": "grad_cube", "delta": 0.9, "label": "grad_cube"},
]
FIG4_SCHEMES = [
    {"consensus": "linear", "label": "linear"},
    {"consensus": "max", "label": "max"},
    {"consensus": "min", "label": "min"},
    {"consensus": "grad_hull", "delta": 0.9, "label": "grad_hull"},
    {"consensus": "grad_cube", "delta": 0.9, "label": "grad_cube"},
]
RUN_COLUMNS = ("t", "gap_rel", "dev_total", "span")


def _default_optimizer():
    return {"algorithm": "next", "tau": 100.0, "iters": 5000, "cadence": 1,
            "schedule": {"kind": "power_decay", "a": 0.8, "b": 0.53}}


@dataclass
class ExperimentConfig:
    scenario: str
    graph: dict = field(default_factory=lambda: {"topology": "wrap19"})
    init: dict = field(default_factory=lambda: {"dist": "chi_squared", "k": 5})
    ks: list | None = None
    seeds: list = field(default_factory=lambda: [0])
    schemes: list = field(default_factory=list)
    optimizer: dict = field(default_factory=_default_optimizer)
    objective: dict = field(default_factory=lambda: {"kind": "partial_quadratic", "dprime": 2})
    dim: int = 1
    eps: list = field(default_factory=lambda: [1e-3])
    max_iters: int = 5000
    out: str = "results"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.init.get("dist") == "chi_squared":
            _check_k(self.init.get("k"))
        for k in self.ks or []:
            _check_k(k)
        opt = _default_optimizer()
        opt.update(self.optimizer)
        self.optimizer = opt
        if self.scenario == "reproduce_fig3" and not self.schemes:
            self.schemes = [dict(s) for s in FIG3_SCHEMES]
        if self.scenario == "reproduce_fig4":
            if not self.schemes:
                self.schemes = [dict(s) for s in FIG4_SCHEMES]
            if self.ks is None:
                self.ks = [5, 25, 100]
        if self.scenario in ("pure_consensus", "optimize", "sweep", "reproduce_fig3", "reproduce_fig4") \
                and not self.schemes:
            raise ConfigError("no schemes configured")
        for s in self.schemes:
            s.setdefault("label", scheme_label(s))

    @classmethod
    def from_dict(cls, dct: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(dct) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "scenario" not in dct:
            raise ConfigError("config needs a scenario")
        return cls(**dct)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_k(k):
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k <= 0:
        raise ConfigError(f"chi-squared k must be a positive integer, got {k!r}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            dct = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(dct)


def scheme_label(s: dict) -> str:
    if "label" in s:
        return s["label"]
    kind = s["consensus"]
    if kind == "pw_mean":
        return f"p={s['p']:g}"
    if kind == "transform":
        t = transform_from_config(s.get("transform"))
        return f"transform_{t.kind}{'' if t.kind != 'power' else f'{t.p:g}'}"
    return kind


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", label)


def sample_initial(dist: dict, shape, seed) -> np.ndarray:
    """Initial ensemble. chi_squared(k) is drawn as a sum of k squared standard normals."""
    rng = np.random.default_rng(seed)
    kind = dist.get("dist")
    shape = tuple(shape)
    if kind == "chi_squared":
        k = dist.get("k")
        _check_k(k)
        out = np.zeros(shape)
        for _ in range(int(k)):
            out += rng.standard_normal(shape) ** 2
        return out
    if kind == "uniform":
        a, b = float(dist.get("a", 0.0)), float(dist.get("b", 1.0))
        if not a < b:
            raise ConfigError("uniform init needs a < b")
        return rng.uniform(a, b, shape)
    if kind == "fixed":
        vals = np.asarray(dist["values"], dtype=float)
        if vals.ndim == 1 and len(shape) == 2:
            vals = vals[:, None]
        return np.array(np.broadcast_to(vals, shape))
    raise ConfigError(f"unknown init distribution {kind!r}")


# ---------------------------------------------------------------- single runs

@lru_cache(maxsize=8)
def _graph(graph_json: str):
    try:
        return load_graph_config(json.loads(graph_json))
    except GraphError as e:
        raise ConfigError(str(e)) from e


@lru_cache(maxsize=64)
def _objective(obj_json: str, graph_json: str, seed: int) -> QuadraticObjective:
    spec = json.loads(obj_json)
    g, _ = _graph(graph_json)
    kind = spec.get("kind", "partial_quadratic")
    if kind == "partial_quadratic":
        return generate_partial_quadratic(g, int(spec.get("dprime", 2)), seed,
                                          shared_Mb=bool(spec.get("shared_Mb", False)),
                                          K=spec.get("K", "nonneg"))
    if kind == "file":
        return load_ensemble(spec["path"])
    raise ConfigError(f"unknown objective kind {kind!r}")


def run_config_dict(cfg: ExperimentConfig, scheme: dict, seed: int, k) -> dict:
    init = dict(cfg.init)
    if k is not None:
        init["k"] = k
    return {"graph": cfg.graph, "objective": cfg.objective, "init": init, "scheme": scheme,
            "optimizer": cfg.optimizer, "seed": seed}


def execute_run(run_cfg: dict) -> dict:
    """One optimisation run from a self-contained config; returns the record dict."""
    gj, oj = json.dumps(run_cfg["graph"], sort_keys=True), json.dumps(run_cfg["objective"], sort_keys=True)
    g, W = _graph(gj)
    seed = int(run_cfg["seed"])
    obj = _objective(oj, gj, seed)
    X0 = sample_initial(run_cfg["init"], (obj.n, obj.d), [seed, 1])
    opt = dict(run_cfg["optimizer"])
    scheme = {k: v for k, v in run_cfg["scheme"].items() if k != "label"}
    ocfg = OptimizerConfig(consensus=scheme, seed=seed, **opt)
    alg = ocfg.algorithm
    if alg == "next":
        rec = next_run(ocfg, obj, operator_from_config(scheme, g, W), W, X0)
    elif alg == "dgd":
        rec = dgd_run(ocfg, obj, W, X0)
    elif alg == "dgd_transform":
        rec = dgd_transform_run(ocfg, obj, W, X0, TransformSchedule(transform_from_config(scheme.get("transform"))))
    else:
        rec = dgd_track_run(ocfg, obj, W, W, X0)
    rec.config = run_cfg
    return rec.to_dict()


def record_rows(record: dict) -> list[tuple]:
    return [tuple(m[c] for c in RUN_COLUMNS) for m in record["metrics"]]


# ---------------------------------------------------------------- sweeps

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NCL_THREADS", "1")))
    except ValueError:
        raise ConfigError("NCL_THREADS must be an integer") from None


@dataclass
class SweepResult:
    records: dict  # (k, label) -> list of record dicts in seed order
    out: Path | None

    def median_at(self, k, label: str, metric: str, t: int) -> float:
        vals = []
        for r in self.records[(k, label)]:
            row = next(m for m in r["metrics"] if m["t"] == t)
            vals.append(row[metric])
        return float(np.median(vals))


def run_sweep(cfg: ExperimentConfig, out: str | Path | None = None, resume: bool = False,
              write: bool = True) -> SweepResult:
    """Every (k, scheme, seed) combination; files are written by this process only."""
    out = Path(out or cfg.out) if write else None
    ks = cfg.ks if cfg.ks else [cfg.init.get("k", "na")]
    jobs, keys, cached = [], [], {}
    for k in ks:
        for s in cfg.schemes:
            for seed in cfg.seeds:
                rc = run_config_dict(cfg, s, seed, k if cfg.init.get("dist") == "chi_squared" else None)
                key = (k, s["label"], seed)
                if resume and out is not None:
                    jp = _run_path(out, k, s["label"], seed).with_suffix(".json")
                    if jp.exists():
                        try:
                            rec = io.read_record(jp)
                            if rec.get("stamp", {}).get("config_hash") == config_hash(rc):
                                cached[key] = rec
                                continue
                        except (OSError, json.JSONDecodeError):
                            log.warning("unreadable record %s; rerunning", jp)
                jobs.append(rc)
                keys.append(key)
    nthreads = _threads()
    if nthreads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=nthreads) as ex:
            results = list(ex.map(execute_run, jobs))
    else:
        results = [execute_run(j) for j in jobs]
    done = dict(zip(keys, results))
    records = {}
    for k in ks:
        for s in cfg.schemes:
            lst = []
            for seed in cfg.seeds:
                key = (k, s["label"], seed)
                rec = done.get(key) or cached[key]
                lst.append(rec)
                if out is not None and key in done:
                    p = _run_path(out, k, s["label"], seed)
                    io.write_csv(RUN_COLUMNS, record_rows(rec), p.with_suffix(".csv"))
                    io.write_record(rec, p.with_suffix(".json"))
            records[(k, s["label"])] = lst
    res = SweepResult(records, out)
    if out is not None:
        _write_aggregates(cfg, res, ks)
    return res


def _run_path(out: Path, k, label: str, seed: int) -> Path:
    return out / "runs" / f"k{k}" / _slug(label) / f"seed{seed}"


def _median_series(recs: list[dict], metric: str) -> tuple[list, list]:
    ts = [m["t"] for m in recs[0]["metrics"]]
    cols = np.array([[m[metric] for m in r["metrics"]] for r in recs], dtype=float)
    return ts, list(np.median(cols, axis=0))


def _write_aggregates(cfg: ExperimentConfig, res: SweepResult, ks) -> None:
    for k in ks:
        rows = []
        curves = {"gap_rel": {}, "dev_total": {}}
        for s in cfg.schemes:
            recs = res.records[(k, s["label"])]
            ts, gap = _median_series(recs, "gap_rel")
            _, dev = _median_series(recs, "dev_total")
            _, sp = _median_series(recs, "span")
            curves["gap_rel"][s["label"]] = (ts, gap)
            curves["dev_total"][s["label"]] = (ts, dev)
            rows += [(t, s["label"], float(a), float(b), float(c)) for t, a, b, c in zip(ts, gap, dev, sp)]
        io.write_csv(("t", "scheme", "gap_rel", "dev_total", "span"), rows, res.out / f"aggregate_k{k}.csv")
        n = len(cfg.seeds)
        io.write_svg(curves["gap_rel"], res.out / f"gap_rel_k{k}.svg",
                     title=f"relative objective gap, k={k}, median of {n} seeds", ylabel="gap_rel")
        io.write_svg(curves["dev_total"], res.out / f"dev_total_k{k}.svg",
                     title=f"total deviation from optimum, k={k}, median of {n} seeds", ylabel="dev_total")


# -------------------------------------------------------- pure consensus

def _consensus_operator(cfg: ExperimentConfig, scheme: dict) -> ConsensusOperator:
    g, W = _graph(json.dumps(cfg.graph, sort_keys=True))
    return operator_from_config({k: v for k, v in scheme.items() if k != "label"} | {"label": scheme["label"]}, g, W)


def run_consensus_experiment(cfg: ExperimentConfig, out=None, write: bool = True) -> dict:
    """Pure consensus per (scheme, seed). Returns {label: [trace, ...]}."""
    out = Path(out or cfg.out) if write else None
    g, _ = _graph(json.dumps(cfg.graph, sort_keys=True))
    traces = {}
    stop = min(cfg.eps) if cfg.eps else 0.0
    for s in cfg.schemes:
        op = _consensus_operator(cfg, s)
        lst = []
        for seed in cfg.seeds:
            X0 = sample_initial(cfg.init, (g.n, cfg.dim), seed)
            tr = run_pure_consensus(X0, op, cfg.max_iters, eps=stop, span_tol=math.inf,
                                    rng=np.random.default_rng([seed, 2]))
            lst.append(tr)
            if out is not None:
                io.write_csv(("t", "span", "V_ratio"), trace_rows(tr),
                             out / "consensus" / _slug(s["label"]) / f"seed{seed}.csv")
        traces[s["label"]] = lst
    if out is not None:
        rows = t_epsilon_report(cfg, traces)
        io.write_csv(REPORT_COLUMNS, [tuple(r[c] for c in REPORT_COLUMNS) for r in rows],
                     out / "t_epsilon.csv")
        curves = {}
        for label, lst in traces.items():
            m = min(len(tr.t) for tr in lst)
            curves[label] = (list(lst[0].t[:m]), list(np.median([tr.v_ratio[:m] for tr in lst], axis=0)))
        io.write_svg(curves, out / "v_ratio.svg", title="V[t]/V[0], median over seeds", ylabel="V ratio")
    return traces


REPORT_COLUMNS = ("scheme", "eps", "median", "q25", "q75", "censored", "cap", "seeds", "p1_slower")


def t_epsilon_report(cfg: ExperimentConfig, traces: dict | None = None) -> list[dict]:
    """Per (scheme, ε): median and quartiles of T_ε over seeds, censoring count and cap.

    ``p1_slower`` is set for power-mean schemes when a p = 1 scheme is also
    present: median T_{ε,1} > median T_{ε,p}.
    """
    if traces is None:
        traces = run_consensus_experiment(cfg, write=False)
    p1 = next((s["label"] for s in cfg.schemes
               if (s["consensus"] == "pw_mean" and float(s["p"]) == 1.0) or s["consensus"] == "linear"), None)
    rows = []
    for eps in cfg.eps:
        meds = {}
        for s in cfg.schemes:
            te = np.array([t_epsilon(tr, eps) for tr in traces[s["label"]]], dtype=float)
            meds[s["label"]] = float(np.median(te))
            q25, q75 = np.quantile(te, [0.25, 0.75], method="inverted_cdf")
            rows.append({"scheme": s["label"], "eps": float(eps), "median": meds[s["label"]],
                         "q25": float(q25), "q75": float(q75), "censored": int(np.isinf(te).sum()),
                         "cap": int(cfg.max_iters), "seeds": len(te), "p1_slower": None, "_kind": s})
        for r in rows:
            s = r.pop("_kind", None)
            if s is not None and p1 is not None and r["eps"] == eps and s["consensus"] == "pw_mean" \
                    and r["scheme"] != p1:
                r["p1_slower"] = meds[p1] > r["median"]
    return rows


# ---------------------------------------------------------------- dispatch

def run_experiment(cfg: ExperimentConfig, out=None, resume: bool = False):
    if cfg.scenario == "pure_consensus":
        return run_consensus_experiment(cfg, out)
    if cfg.scenario == "validate":
        from .validate import run_validation
        return run_validation()
    if cfg.scenario == "optimize":
        cfg = ExperimentConfig.from_dict(cfg.to_dict() | {"scenario": "sweep", "seeds": cfg.seeds[:1]})
    return run_sweep(cfg, out, resume)
