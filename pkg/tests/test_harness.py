import json
import math
from pathlib import Path

import numpy as np
import pytest

from ncl.harness import io
from ncl.harness.cli import main
from ncl.harness.experiments import (ExperimentConfig, load_config, run_consensus_experiment, run_sweep,
                                     sample_initial, t_epsilon_report)
from ncl.objectives import generate_partial_quadratic
from ncl.graph import build_topology
from ncl.optimizers import ConfigError

RING = {"topology": "ring", "n": 5, "weights": {"self": 0.6, "edge": 0.2}}


def small_sweep(**kw):
    d = {"scenario": "reproduce_fig4", "ks": [5], "seeds": [0, 1],
         "schemes": [{"consensus": "linear"}, {"consensus": "max"}],
         "optimizer": {"iters": 20, "cadence": 5}}
    d.update(kw)
    return d


def test_chi_squared_moments():
    x = sample_initial({"dist": "chi_squared", "k": 5}, (200, 100), 0)
    assert x.min() > 0
    assert abs(x.mean() - 5) < 0.05
    assert abs(x.var() - 10) < 0.3


def test_uniform_regression():
    x = sample_initial({"dist": "uniform", "a": 0, "b": 1}, (5, 1), 0).ravel()
    assert np.allclose(x, [0.63696169, 0.26978671, 0.04097352, 0.01652764, 0.81327024], atol=1e-8)


@pytest.mark.parametrize("bad", [
    {"scenario": "sweep", "schemes": [{"consensus": "linear"}], "ks": [0]},
    {"scenario": "sweep", "schemes": [{"consensus": "linear"}], "ks": [2.5]},
    {"scenario": "sweep", "schemes": [{"consensus": "linear"}], "seeds": []},
    {"scenario": "sweep", "schemes": []},
    {"scenario": "nope", "schemes": [{"consensus": "linear"}]},
    {"scenario": "sweep", "schemes": [{"consensus": "linear"}], "colour": "red"},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_csv_header_only(tmp_path):
    io.write_csv(("t", "span"), [], tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_bytes() == b"t,span\r\n"
    io.write_csv(("t", "x"), [(1, 0.1), (2, None)], tmp_path / "b.csv")
    assert io.read_csv(tmp_path / "b.csv") == (["t", "x"], [["1", "0.1"], ["2", ""]])


def test_svg_polylines(tmp_path):
    curves = {"a": ([0, 1, 2], [1.0, 0.1, 0.01]), "b": ([0, 1], [2.0, 0.0]), "c": ([0], [1.0])}
    io.write_svg(curves, tmp_path / "f.svg", title="t<1>")
    text = (tmp_path / "f.svg").read_text()
    assert text.count("<polyline") == 3
    assert "t&lt;1&gt;" in text and text.rstrip().endswith("</svg>")


def test_output_error(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(io.OutputError):
        io.write_csv(("a",), [], tmp_path / "f" / "x.csv")


def test_record_round_trip(tmp_path):
    res = run_sweep(ExperimentConfig.from_dict(small_sweep(seeds=[0])), write=False)
    rec = res.records[(5, "linear")][0]
    io.write_record(rec, tmp_path / "r.json")
    assert io.read_record(tmp_path / "r.json") == json.loads(io.canonical_json(rec))


def test_ring_consensus_csv(tmp_path):
    cfg = ExperimentConfig(scenario="pure_consensus", graph=RING, init={"dist": "fixed", "values": [7, 2, 12, 2, 7]},
                           schemes=[{"consensus": "linear"}, {"consensus": "max"}], max_iters=3, eps=[1e-12])
    run_consensus_experiment(cfg, tmp_path)
    h, rows = io.read_csv(tmp_path / "consensus" / "linear" / "seed0.csv")
    assert h == ["t", "span", "V_ratio"]
    assert [r[0] for r in rows] == ["0", "1", "2", "3"]
    assert float(rows[0][2]) == 1.0
    assert float(rows[1][2]) == pytest.approx(3 / 35, abs=1e-12)
    assert float(rows[1][1]) == pytest.approx(3.0, abs=1e-12)  # span of [6, 5, 8, 5, 6]
    _, mrows = io.read_csv(tmp_path / "consensus" / "max" / "seed0.csv")
    assert float(mrows[1][2]) == pytest.approx(0.2, abs=1e-12)
    h, rep = io.read_csv(tmp_path / "t_epsilon.csv")
    rep = {r[0]: dict(zip(h, r)) for r in rep}
    assert rep["max"]["median"] == "2.0" and rep["max"]["censored"] == "0"
    assert rep["linear"]["censored"] == "1" and rep["linear"]["cap"] == "3"
    assert math.isinf(float(rep["linear"]["median"]))
    assert (tmp_path / "v_ratio.svg").exists()


def test_consensus_start_is_zero():
    cfg = ExperimentConfig(scenario="pure_consensus", graph=RING, init={"dist": "fixed", "values": [3] * 5},
                           schemes=[{"consensus": "linear"}, {"consensus": "pw_mean", "p": 2}], max_iters=10)
    rows = t_epsilon_report(cfg)
    assert [r["median"] for r in rows] == [0.0, 0.0]


def test_t_epsilon_report_wrap19():
    cfg = ExperimentConfig(scenario="pure_consensus", init={"dist": "uniform", "a": 1, "b": 10},
                           seeds=list(range(20)), max_iters=3000, eps=[1e-3, 1e-6],
                           schemes=[{"consensus": "pw_mean", "p": 1}, {"consensus": "pw_mean", "p": 30}])
    rows = t_epsilon_report(cfg)
    assert len(rows) == 4
    for r in rows:
        assert r["seeds"] == 20 and r["censored"] == 0 and r["q25"] <= r["median"] <= r["q75"]
    assert all(r["p1_slower"] is not None for r in rows if r["scheme"] == "p=30")
    assert all(r["p1_slower"] is None for r in rows if r["scheme"] == "p=1")


def _tree(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_sweep_outputs_and_gap_rel(tmp_path):
    cfg = ExperimentConfig.from_dict(small_sweep())
    run_sweep(cfg, tmp_path)
    files = set(_tree(tmp_path))
    for lab in ("linear", "max"):
        for s in (0, 1):
            assert f"runs/k5/{lab}/seed{s}.csv" in files and f"runs/k5/{lab}/seed{s}.json" in files
    assert {"aggregate_k5.csv", "gap_rel_k5.svg", "dev_total_k5.svg"} <= files
    rec = io.read_record(tmp_path / "runs/k5/max/seed1.json")
    g = build_topology("wrap19")
    obj = generate_partial_quadratic(g, 2, 1)
    xa = np.array(rec["final"]["x_a"])
    F = sum(obj.local_value(i, xa) for i in range(g.n))
    Fs = obj.optimum[1]
    assert abs(abs(F - Fs) / abs(Fs) - rec["metrics"][-1]["gap_rel"]) <= 1e-12
    h, rows = io.read_csv(tmp_path / "aggregate_k5.csv")
    assert h == ["t", "scheme", "gap_rel", "dev_total", "span"] and len(rows) == 2 * 5


def test_resume_reuses_records(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict(small_sweep(seeds=[0]))
    run_sweep(cfg, tmp_path)
    before = _tree(tmp_path)
    import ncl.harness.experiments as ex

    def boom(_):
        raise AssertionError("should not rerun")
    monkeypatch.setattr(ex, "execute_run", boom)
    run_sweep(cfg, tmp_path, resume=True)
    assert _tree(tmp_path) == before


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": "sweep", "schemes": [{"consensus": "linear"}], "ks": [-1]}))
    assert main(["sweep", "--config", str(bad)]) == 2
    assert main(["sweep"]) == 2
    mism = tmp_path / "m.json"
    mism.write_text(json.dumps({"scenario": "pure_consensus", "schemes": [{"consensus": "linear"}]}))
    assert main(["sweep", "--config", str(mism)]) == 2
    (tmp_path / "blocker").write_text("")
    good = tmp_path / "g.json"
    good.write_text(json.dumps({"scenario": "pure_consensus", "graph": RING, "schemes": [{"consensus": "max"}],
                                "init": {"dist": "uniform"}, "max_iters": 5}))
    assert main(["consensus", "--config", str(good), "--out", str(tmp_path / "blocker" / "x")]) == 1
    assert main(["consensus", "--config", str(good), "--out", str(tmp_path / "ok")]) == 0
    assert "max" in capsys.readouterr().out


def test_reproduce_byte_deterministic(tmp_path, monkeypatch):
    c = tmp_path / "c.json"
    c.write_text(json.dumps(small_sweep()))
    assert main(["reproduce", "--figure", "fig4", "--config", str(c), "--out", str(tmp_path / "a")]) == 0
    assert main(["reproduce", "--figure", "fig4", "--config", str(c), "--out", str(tmp_path / "b")]) == 0
    monkeypatch.setenv("NCL_THREADS", "2")
    assert main(["reproduce", "--figure", "fig4", "--config", str(c), "--out", str(tmp_path / "p")]) == 0
    a = _tree(tmp_path / "a")
    assert a and a == _tree(tmp_path / "b") == _tree(tmp_path / "p")
