import json
import math
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evotune import cli
from evotune.database import ProgramDatabase, ProgramRecord
from evotune.orchestrator import run_search
from evotune.reporting import (
    MetricsRow,
    aggregate,
    default_budgets,
    format_rows,
    histogram,
    metrics_row,
    progress_curve,
    select_top,
    top_k,
    unique_score_count,
    within_budget,
)
from test_orchestrator import InProcessSandbox, cfg_for


def make_db():
    db = ProgramDatabase(2)
    db.register_seed("seed", -10.0)
    rows = [(1, -8.0, "a"), (1, -9.0, "b"), (2, -5.0, "c"), (3, -5.0, "d"), (4, -2.0, "e")]
    for i, (t, r, src) in enumerate(rows):
        db.register(ProgramRecord(f"t{t}-k{i}", src, r, i % 2, t))
    # same text on the other island counts once
    db.register(ProgramRecord("t4-k9", "e", -2.0, 0, 4))
    return db


def test_budget_and_topk():
    db = make_db()
    assert {r.id for r in within_budget(db, 8, K=8)} >= {"seed-i0", "t1-k0"}
    assert all(r.timestep <= 1 for r in within_budget(db, 15, K=8))
    assert top_k(db, 1, budget=16, K=8) == -5.0
    assert [r.id for r in select_top(db, 2, budget=24, K=8)] == ["t2-k2", "t3-k3"]
    assert top_k(db, 50) == pytest.approx((-2 - 5 - 5 - 8 - 9 - 10) / 6)
    assert unique_score_count(db) == 5
    with pytest.raises(ValueError):
        top_k(db, 0)


def test_metrics_row_and_tsv():
    row = metrics_row(make_db(), 32, k=2, K=8)
    assert (row.top1_gap, row.top50_gap, row.unique_score_count) == (2.0, 3.5, 5)
    text = format_rows([row])
    header, line = text.splitlines()
    assert header.split("\t")[:4] == ["split", "budget", "top1_gap", "top50_gap"]
    assert line.startswith("validation\t32\t2\t3.5")


def test_histogram_bins():
    h = histogram([0.0, 0.1, 0.26, 0.5, 0.74], 0.25)
    assert h.counts == [2, 1, 2] and h.edges == [0.0, 0.25, 0.5, 0.75]
    assert h.to_text().splitlines()[0] == "bin_lo\tbin_hi\tcount"
    assert histogram([], 0.5).counts == [0]
    with pytest.raises(ValueError):
        histogram([1.0], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=60), st.floats(0.05, 5))
def test_histogram_conserves_counts(gaps, w):
    h = histogram(gaps, w)
    assert h.total == len(gaps)
    assert len(h.edges) == len(h.counts) + 1
    assert h.edges[0] <= min(gaps) and max(gaps) < h.edges[-1] + 1e-9


def test_aggregate_mean_and_stderr():
    rows = [[MetricsRow("validation", 100, g, g, -g, 3, 10)] for g in (1.0, 2.0, 3.0)]
    agg = {a.metric: a for a in aggregate(rows)}
    assert agg["top1_gap"].mean == 2.0
    assert agg["top1_gap"].stderr == pytest.approx(1.0 / math.sqrt(3))
    assert math.isnan(aggregate(rows[:1])[0].stderr)


def test_default_budgets_and_curve():
    assert default_budgets(30000) == [9600, 16000, 22400]
    assert default_budgets(200) == [200]
    curve = progress_curve(make_db(), 8, 32, points=4)
    assert [c["budget"] for c in curve] == [8, 16, 24, 32]
    gaps = [c["top1_gap"] for c in curve]
    assert gaps == sorted(gaps, reverse=True)


# -- CLI -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    run_search(cfg_for(), d, sandbox=InProcessSandbox())
    return d


def test_cli_report_writes_tables_and_figures(run_dir, tmp_path, capsys):
    assert cli.main(["report", "--db", str(run_dir), "--budgets", "16,48", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("split\tbudget") and len(out) == 3
    for name in ("metrics.tsv", "progress.tsv", "histogram.tsv", "progress.png", "histogram.png"):
        assert (tmp_path / name).stat().st_size > 0
    assert (tmp_path / "progress.png").read_bytes()[:4] == b"\x89PNG"


def test_cli_plot_and_aggregate(run_dir, tmp_path, capsys):
    assert cli.main(["plot", "--db", str(run_dir / "database.jsonl"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "histogram.png").exists()
    capsys.readouterr()
    assert cli.main(["aggregate", str(run_dir), str(run_dir), "--budgets", "48"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "split\tbudget\tmetric\tmean\tstderr\tn"
    assert lines[1].endswith("\t2")


def test_cli_export_and_train(run_dir, tmp_path, capsys):
    out = tmp_path / "pref.jsonl"
    assert cli.main(["export-pref", "--db", str(run_dir), "--out", str(out), "--max-timestep", "6"]) == 0
    n = int(capsys.readouterr().out.split("\t")[0])
    assert n == len(out.read_text().splitlines()) and n > 0
    assert cli.main(["train-update", "--pref", str(out), "--t", "400"]) == 0
    assert capsys.readouterr().out.strip().startswith("base+dpo-")
    script = tmp_path / "tr.py"
    script.write_text("import json,sys\njson.load(sys.stdin)\nprint(json.dumps({'policy_handle': 'p7'}))\n")
    assert cli.main(["train-update", "--pref", str(out), "--backend", "command",
                     "--command", f"{sys.executable} {script}"]) == 0
    assert capsys.readouterr().out.strip() == "p7"
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["train-update", "--pref", str(empty)]) == 1


def test_cli_eval_on_other_split(run_dir, capsys):
    assert cli.main(["eval", "--db", str(run_dir), "--split", "validation_perturbed", "--budget", "8",
                     "--workers", "1"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert row.startswith("validation_perturbed\t8\t")


def test_cli_init_and_search(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(json.dumps({"task": "bin_packing", "T": 2, "K": 2, "f_rl": 1,
                               "instances": {"params": {"num_instances": 1, "num_items": 30}}}))
    assert cli.main(["init", "--config", str(cfg), "--run-dir", str(tmp_path / "r"),
                     "--splits", "validation"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split("\t")[3] == "ok"
    assert cli.main(["search", "--config", str(cfg), "--run-dir", str(tmp_path / "r"), "--workers", "1"]) == 0
    summary = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert summary["t"] == "2" and summary["outputs_sampled"] == "4"
    # without --config the run's own config.yaml is reused, so nothing is left to do
    assert cli.main(["search", "--run-dir", str(tmp_path / "r"), "--workers", "1"]) == 0
    summary = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert summary["t"] == "2" and summary["outputs_sampled"] == "4"


def test_cli_errors(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["report", "--db", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
