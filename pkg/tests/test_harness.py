import json
import os
import xml.dom.minidom

import pytest

from mntdp import cli, harness
from mntdp.harness import ConfigError, ExperimentConfig, StreamCursor, StreamRevisitError
from mntdp.streams import build_stream

FAST = {"max_iterations": 40, "patience": 20}
GRID = {"learning_rates": [0.01], "weight_decays": [0.0], "gamma_learning_rates": [0.01]}


def config(learner="mntdp_d", kind="S-", out=None, **kw):
    raw = {"learner": learner, "stream": {"kind": kind, "scale": "desk", "seed": 3},
           "options": {"hidden_dim": 16}, "grid": GRID, "budget": FAST, "seed": 1}
    if out is not None:
        raw["output_dir"] = str(out)
    raw.update(kw)
    return ExperimentConfig.from_dict(raw)


def test_validation_lists_every_problem():
    raw = {"learner": "pnn", "stream": {"kind": "S?", "colour": 1}, "budget": {"patience": 0},
           "grid": {"learning_rates": []}, "extra": True}
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(raw)
    msgs = info.value.errors
    assert len(msgs) == 6
    assert any("pnn" in m for m in msgs) and any("extra" in m for m in msgs)
    assert any("colour" in m for m in msgs) and any("S?" in m for m in msgs)


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--learner", "pnn", "--kind", "S-"]) == 2
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", "--learner", "independent", "--manifest", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["gen-stream", "S?", "desk", "1", "--out", str(tmp_path / "s")]) == 2
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "results.csv").write_text("garbage\n")
    assert cli.main(["report", str(tmp_path / "broken"), "--out", str(tmp_path / "r")]) == 3
    assert cli.main(["report", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3


def test_stream_cursor_visits_each_task_once():
    stream, data = build_stream("Spl", "desk", 0)
    cur = StreamCursor(stream, data)
    seen = [spec.task_id for spec, _ in cur]
    assert seen == list(range(5)) and cur.complete()
    with pytest.raises(StreamRevisitError):
        cur.visit(2)
    cur2 = StreamCursor(stream, data)
    with pytest.raises(StreamRevisitError):
        cur2.visit(1)


def test_gen_stream_idempotent(tmp_path):
    a = cli.cmd_gen_stream("Spl", "desk", 7, tmp_path / "a")
    b = cli.cmd_gen_stream("Spl", "desk", 7, tmp_path / "b")
    m = json.loads(a.read_text())
    assert len(m["tasks"]) == 5
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    cli.cmd_gen_stream("Spl", "desk", 7, tmp_path / "a")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == b.read_bytes()


def test_paper_scale_s_minus_has_six_tasks():
    stream, _ = build_stream("S-", "paper", 7)
    assert len(stream.to_manifest()["tasks"]) == 6


def test_run_outputs_and_determinism(tmp_path):
    names = ("results.csv", "summary.json", "tasks.json", "checkpoint.bin")
    r1 = cli.cmd_run(config(out=tmp_path / "r1"))
    first = {n: (r1 / n).read_bytes() for n in names}
    cli.cmd_run(config(out=tmp_path / "r1"))
    assert {n: (r1 / n).read_bytes() for n in names} == first
    r2 = cli.cmd_run(config(out=tmp_path / "r2"))
    assert (r2 / "results.csv").read_bytes() == first["results.csv"]
    header = (r1 / "results.csv").read_text().splitlines()[0].split(",")
    assert header == harness.RESULT_COLUMNS and "transfer" in header
    summary = json.loads((r1 / "summary.json").read_text())
    assert summary["access_log"] == list(range(6))
    assert summary["table"]["mntdp_d"]["S-"]["forgetting"] == 0.0


def test_run_from_manifest_matches_generated(tmp_path):
    manifest = cli.cmd_gen_stream("S-", "desk", 3, tmp_path / "st")
    a = harness.run_experiment(config(stream={"manifest": str(manifest)}))
    b = harness.run_experiment(config())
    assert a.metrics == b.metrics


def test_independent_transfer_is_zero():
    res = harness.run_experiment(config("independent", "Spl"))
    assert res.metrics["transfer"] == 0.0
    assert res.metrics["forgetting"] == 0.0


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    monkeypatch.setenv(harness.THREADS_ENV, "1")
    out = cli.cmd_run(config("new_head", out=tmp_path / "ignored"))
    assert out == tmp_path / "env" and (out / "results.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_ewc_lambda_stream_sweep():
    res = harness.run_experiment(config("ewc_online", "Spl", budget={"max_iterations": 20, "patience": 10}))
    assert res.info["ewc_lambda"] in {1, 5, 10, 50, 100, 500, 1e3, 5e3, 1e4}


def test_report(tmp_path):
    d1 = cli.cmd_run(config("independent", out=tmp_path / "a"))
    rep = cli.cmd_report([d1], tmp_path / "rep1")
    assert len((rep / "results.csv").read_text().splitlines()) == 2
    d2 = cli.cmd_run(config("finetune", out=tmp_path / "b"))
    rep = cli.cmd_report([d1, d2], tmp_path / "rep2")
    rows = harness.read_results_csv(rep / "results.csv")
    assert [r["learner"] for r in rows] == ["finetune", "independent"]
    layout = cli.bar_layout(rows)
    assert all(len(bars) == 2 for bars in layout.values())
    xml.dom.minidom.parse(str(rep / "chart.svg"))
    again = cli.cmd_report([d1, d2], tmp_path / "rep3")
    assert (again / "chart.svg").read_bytes() == (rep / "chart.svg").read_bytes()
