"""Self-check suite behind ``ncl validate``. Each check returns (ok, detail)."""

from __future__ import annotations

import json
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..consensus import (ConsensusOperator, extreme_step, linear_step, operator_from_config, pw_mean_step, run_pure_consensus,
                         span_contraction_fuzz, transform_step)
from ..graph import build_topology, custom_weights, metropolis_weights
from ..objectives import ensemble_from_dict, generate_partial_quadratic
from ..optimizers import OptimizerConfig, StepSchedule, dgd_run, dgd_transform_run, next_run
from ..transforms import IDENTITY, make_transform
from . import io

RING_X0 = np.array([7.0, 2.0, 12.0, 2.0, 7.0])


def _ring():
    g = build_topology("ring", n=5)
    return g, custom_weights(g, 0.6, 0.2)


def exact_ratio(X0, X1, limit) -> Fraction:
    lim = Fraction(limit)
    v0 = sum((Fraction(a) - lim) ** 2 for a in X0)
    v1 = sum((Fraction(a) - lim) ** 2 for a in X1)
    return v1 / v0


def ring_exact():
    """One linear and one max step on the 5-ring in rational arithmetic."""
    g, _ = _ring()
    Wq = np.array([[Fraction(3, 5) if i == j else Fraction(1, 5) if j in g.neighbors(i) else Fraction(0)
                    for j in range(5)] for i in range(5)], dtype=object)
    x0 = np.array([Fraction(int(v)) for v in RING_X0], dtype=object)
    x_lin = linear_step(Wq, x0).ravel()
    x_max = extreme_step(RING_X0, g, "max").ravel()
    lim_lin = sum(x0) / 5
    return x0, x_lin, lim_lin, x_max


def check_ring_example():
    x0, x_lin, lim, x_max = ring_exact()
    r_lin = exact_ratio(x0, x_lin, lim)
    r_max = exact_ratio(x0, [Fraction(float(v)) for v in x_max], 12)
    ok = (list(x_lin) == [6, 5, 8, 5, 6] and list(x_max) == [7, 12, 12, 12, 7]
          and r_lin == Fraction(3, 35) and r_max == Fraction(1, 5))
    g, W = _ring()
    flt = ConsensusOperator("linear", g, W).apply(RING_X0)[0].ravel()
    ok = ok and bool(np.allclose(flt, [6, 5, 8, 5, 6], rtol=0, atol=1e-12))
    return ok, f"linear {[int(v) for v in x_lin]} ratio {r_lin}; max {[int(v) for v in x_max]} ratio {r_max}"


def check_span_fuzz():
    bad = sum(span_contraction_fuzz(1000, th, seed=s) for s, th in enumerate(("0.05", "0.2")))
    return bad == 0, f"{bad} violations over 2000 trials"


def check_pw_cross_path():
    g, W = _ring()
    a = pw_mean_step(W, RING_X0, 2.0)
    b = transform_step(W, RING_X0, make_transform("power", 2.0))
    err = float(np.abs(a - b).max())
    return err <= 1e-12, f"max difference {err:.3g}"


def check_round_trips():
    g = build_topology("ring", n=4)
    q = generate_partial_quadratic(g, 1, seed=3)
    q2 = ensemble_from_dict(json.loads(json.dumps(q.to_dict())))
    ok_q = np.array_equal(q.H, q2.H) and np.array_equal(q.lin, q2.lin)
    rec = {"a": [1.0, 0.1, 1e-300], "b": {"z": 2, "y": None}}
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "r.json"
        io.write_record(rec, p)
        ok_r = io.read_record(p) == rec
    return ok_q and ok_r, f"ensemble {ok_q}, record {ok_r}"


def _fixture(iters=100):
    g = build_topology("wrap19")
    W = metropolis_weights(g)
    q = generate_partial_quadratic(g, 2, seed=11)
    X0 = np.random.default_rng(5).uniform(1.0, 40.0, (q.n, q.d))
    return g, W, q, X0, OptimizerConfig("next", iters=iters, seed=1)


def check_degeneracy_chain():
    g, W, q, X0, cfg = _fixture()
    base = next_run(cfg, q, ConsensusOperator("linear", g, W), W, X0)
    variants = {
        "transform identity": ConsensusOperator("transform", g, W),
        "pw_mean p=1": operator_from_config({"consensus": "pw_mean", "p": 1}, g, W),
        "hull floor rows": ConsensusOperator("hull", g, W, delta=0.9, selector="rows"),
    }
    bad = [k for k, op in variants.items()
           if not np.array_equal(next_run(cfg, q, op, W, X0).X_final, base.X_final)]
    hull_u = ConsensusOperator("hull", g, W, delta=0.9, selector="dirichlet")
    hull_t = ConsensusOperator("hull", g, W, delta=0.9, selector="dirichlet")
    hull_t.schedule = type(hull_t.schedule)(IDENTITY)
    if not np.array_equal(next_run(cfg, q, hull_u, W, X0).X_final, next_run(cfg, q, hull_t, W, X0).X_final):
        bad.append("transformed hull identity")
    dcfg = OptimizerConfig("dgd", schedule=StepSchedule.constant(1e-3), iters=100)
    Xd = np.random.default_rng(2).uniform(1, 40, (q.n, q.d))
    if not np.array_equal(dgd_run(dcfg, q, W, Xd, order="step_then_mix").X_final,
                          dgd_transform_run(dcfg, q, W, Xd, IDENTITY).X_final):
        bad.append("dgd identity transform")
    return not bad, "all bitwise equal" if not bad else f"mismatch: {bad}"


def check_max_diameter():
    g, W = _ring()
    tr = run_pure_consensus(RING_X0, ConsensusOperator("max", g, W), max_iters=10)
    return tr.v_ratio[2] == 0.0, f"V ratio at t=2: {tr.v_ratio[2]}"


CHECKS = {
    "ring example values": check_ring_example,
    "span contraction fuzz": check_span_fuzz,
    "power mean cross path": check_pw_cross_path,
    "serialisation round trips": check_round_trips,
    "degeneracy chain": check_degeneracy_chain,
    "max consensus in diameter steps": check_max_diameter,
}


def run_validation() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check, reported not raised
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
