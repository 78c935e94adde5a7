import json

import pytest

from rankdistill.cli import build_parser, main
from rankdistill.experiments import read_results

TINY = dict(
    task=dict(vocab_size=30, query_len=3, doc_len=5, pos_overlap_min=2, neg_overlap_max=1),
    n_train=16, n_dev_queries=3, n_candidates=4,
    teacher=dict(num_layers=2, hidden=16, heads=2, ffn_dim=32, init_std=0.1),
    student=dict(num_layers=1, hidden=8, heads=2, ffn_dim=16, init_std=0.1),
    epochs=1, teacher_epochs=1, batch_size=8,
)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_suite_table2_five_seeds(config, tmp_path, capsys):
    out = tmp_path / "t2"
    assert main(["suite", "--config", config, "--suite", "table2", "--seeds", "0", "1", "2", "3", "4",
                 "--output-dir", str(out)]) == 0
    assert len(read_results(out / "table2.csv")) == 30
    assert "[30/30]" in capsys.readouterr().out


def test_suite_fig1_rows_and_fractions(config, tmp_path):
    out = tmp_path / "f1"
    assert main(["suite", "--config", config, "--suite", "fig1", "--seeds", "0", "--output-dir", str(out)]) == 0
    rows = read_results(out / "fig1.csv")
    assert len(rows) == 10 * 2 * 1
    assert sorted({r["fraction"] for r in rows}) == [round(0.1 * i, 1) for i in range(1, 11)]


def test_suite_rerun_bitwise_identical(config, tmp_path):
    for name in ("a", "b"):
        assert main(["suite", "--config", config, "--suite", "table3", "--output-dir", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "table3.csv").read_bytes() == (tmp_path / "b" / "table3.csv").read_bytes()


def test_output_env_variable(config, tmp_path, monkeypatch):
    monkeypatch.setenv("RANKDISTILL_OUTPUT", str(tmp_path / "env"))
    assert main(["suite", "--config", config, "--suite", "single"]) == 0
    assert (tmp_path / "env" / "single" / "single.csv").exists()


def test_teacher_distill_eval_pipeline(config, tmp_path, capsys):
    t, s = tmp_path / "teacher.npz", tmp_path / "student.npz"
    assert main(["train-teacher", "--config", config, "--out", str(t), "--history", str(tmp_path / "h.csv")]) == 0
    assert main(["distill", "--config", config, "--teacher", str(t), "--plan", "L2", "--layer-map", "last_k",
                 "--out", str(s)]) == 0
    report, run = tmp_path / "r.json", tmp_path / "run.txt"
    assert main(["eval", "--config", config, "--model", str(s), "--report", str(report),
                 "--run-file", str(run)]) == 0
    assert "MRR@10" in capsys.readouterr().out
    assert 0.0 <= json.loads(report.read_text())["mrr_at_10"] <= 1.0
    assert len(run.read_text().splitlines()) == 3 * 4
    assert main(["compare", "--a", str(report), "--b", str(report)]) == 0


def test_gen_data_then_train_from_tsv(config, tmp_path):
    assert main(["gen-data", "--config", config, "--output", str(tmp_path)]) == 0
    assert main(["train-teacher", "--config", config, "--train", str(tmp_path / "train.tsv"),
                 "--out", str(tmp_path / "t.npz")]) == 0
    assert main(["eval", "--config", config, "--model", str(tmp_path / "t.npz"),
                 "--dev", str(tmp_path / "dev.tsv")]) == 0


def test_malformed_tsv_exits_2(config, tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("only\ttwo\n")
    assert main(["train-teacher", "--config", config, "--train", str(bad), "--out", str(tmp_path / "t.npz")]) == 2
    assert "bad.tsv:1" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(config, tmp_path):
    assert main(["eval", "--config", config, "--model", str(tmp_path / "nope.npz")]) == 2


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rte": 1}))
    assert main(["suite", "--config", str(cfg)]) == 2


def test_unknown_suite_is_usage_error():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["suite", "--suite", "table9"])
    assert info.value.code == 2
