import csv
import json

import pytest

from posemetric.cli import main
from posemetric.config import load_run_config
from posemetric.dataset import load_jsonl
from posemetric.encoder import load_checkpoint
from posemetric.retrieval import load_index

TINY = {
    "data": {"n_samples": 96},
    "train": {"epochs": 2, "hidden": [16], "backbone_out": 16, "head_hidden": [8], "embed_dim": 4},
    "eval": {"n_queries": 12},
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "train.jsonl")]) == 0
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "test.jsonl"),
                 "--n", "12", "--seed", "9", "--first-id", "1000"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "train.jsonl"),
                 "--out", str(tmp_path / "m.ckpt")]) == 0
    assert main(["build-index", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "train.jsonl"),
                 "--out", str(tmp_path / "i.idx")]) == 0
    return tmp_path


def test_pipeline_artifacts(workdir, capsys):
    assert len(load_jsonl(workdir / "train.jsonl")) == 96
    assert [s.id for s in load_jsonl(workdir / "test.jsonl")][:2] == [1000, 1001]
    pair, header = load_checkpoint(workdir / "m.ckpt")
    assert len(header["history"]) == 2 and pair.camera.output_dim == 4
    index = load_index(workdir / "i.idx")
    assert len(index) == 96 and index.encoder_hash == header["sha256"]


def test_query_outputs_one_line_per_sample(workdir, capsys):
    capsys.readouterr()
    args = ["--checkpoint", str(workdir / "m.ckpt"), "--index", str(workdir / "i.idx"), "--data", str(workdir / "test.jsonl")]
    assert main(["query", *args]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[0])
    assert rec["id"] == 1000 and set(rec) >= {"azimuth", "elevation", "inplane", "distance", "source_id"}
    # same answer from the other backend
    assert main(["query", *args, "--backend", "linear", "--out", str(workdir / "p.jsonl")]) == 0
    assert (workdir / "p.jsonl").read_text().strip().splitlines() == lines


def test_eval_writes_csv_json_and_figure(workdir):
    out = workdir / "ev"
    assert main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--index", str(workdir / "i.idx"),
                 "--data", str(workdir / "test.jsonl"), "--out", str(out), "--levels", "L0", "L2"]) == 0
    rows = list(csv.DictReader(open(out / "reference_design.csv", encoding="utf-8")))
    assert {r["occlusion_level"] for r in rows} == {"L0", "L2"}
    assert all(float(r["acc_pi18"]) <= float(r["acc_pi6"]) for r in rows)
    assert json.loads((out / "reference_design.json").read_text())["axis"] == "reference_design"
    assert (out / "reference_design.png").stat().st_size > 0


def test_bench(workdir, capsys):
    out = workdir / "bench.json"
    assert main(["bench", "--checkpoint", str(workdir / "m.ckpt"), "--index", str(workdir / "i.idx"),
                 "--data", str(workdir / "test.jsonl"), "--repetitions", "5", "--n-queries", "2", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())
    assert summary["repetitions"] == 5 and summary["n_queries"] == 2
    assert summary["embed_mean_s"] > 0 and summary["search_mean_s"] > 0


def test_sweep_and_ablate(workdir):
    cfg = str(workdir / "tiny.json")
    assert main(["sweep", "--config", cfg, "--axis", "beta_train", "--values", "0", "0.25",
                 "--beta-tests", "0.5", "--out", str(workdir / "sw"), "--no-figures"]) == 0
    rows = list(csv.DictReader(open(workdir / "sw" / "beta_train.csv", encoding="utf-8")))
    assert [r["value"] for r in rows if r["category"] == "ALL"] == ["0.0", "0.25"]
    assert main(["ablate", "--config", cfg, "--what", "reference", "--designs", "TrainDB", "CoarseDB",
                 "--out", str(workdir / "ab")]) == 0
    assert (workdir / "ab" / "reference_design.png").exists()


def test_mismatched_checkpoint_rejected(workdir, capsys):
    cfg = str(workdir / "tiny.json")
    assert main(["train", "--config", cfg, "--data", str(workdir / "train.jsonl"), "--out", str(workdir / "m2.ckpt"),
                 "--epochs", "1"]) == 0
    code = main(["query", "--checkpoint", str(workdir / "m2.ckpt"), "--index", str(workdir / "i.idx"),
                 "--data", str(workdir / "test.jsonl")])
    assert code == 2 and "different checkpoint" in capsys.readouterr().err


def test_bad_sweep_value(tmp_path, capsys):
    assert main(["sweep", "--axis", "loss_variant", "--values", "Nope", "--out", str(tmp_path)]) == 2
    assert "invalid loss_variant" in capsys.readouterr().err


def test_unknown_config_field(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["generate-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "x")]) == 2
    assert "unknown TrainConfig fields" in capsys.readouterr().err


def test_shipped_config_loads():
    from pathlib import Path

    cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / "desk.json")
    assert cfg.train.epochs == 200 and cfg.data.n_samples == 2000
