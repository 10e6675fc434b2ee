import csv
import json

import pytest
import yaml

from regent.cli import load_config, main
from regent.formats import load_demoset

TINY = {
    "pretrain_levels": {"gridworld": [0, 1]},
    "heldout_levels": {"gridworld": [1000]},
    "demos_per_level": 4,
    "retrieval_count": 2,
    "demo_counts": [1, 2, 5, 10],
    "n": 3,
    "model": {"n_layers": 1, "n_heads": 2, "hidden": 8},
    "train": {"batch_size": 8, "lr_start": 0.001, "epochs": 1, "stop_after_epochs": 1},
    "eval": {"episodes": 2, "seeds": 1},
    "bound": {"level": 0, "demo_counts": [1, 2], "episodes": 5},
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def run(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp, TINY)
    out = tmp / "run"
    codes = [run(cmd, "--config", cfg, "--out", str(out)) for cmd in ("gen", "preprocess", "pretrain", "finetune", "eval", "bound", "report")]
    return tmp, cfg, out, codes


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        assert pipeline[3] == [0] * 7

    def test_eval_shape(self, pipeline):
        _, _, out, _ = pipeline
        rows = list(csv.DictReader(open(out / "reports" / "eval.csv")))
        for policy in ("rnp", "regent", "regent_finetuned"):
            mine = [r for r in rows if r["policy"] == policy and r["env_id"] == "gridworld-1000"]
            assert sorted(int(r["n_demos"]) for r in mine) == [1, 2, 5, 10]
        hashes = {r["config_hash"] for r in rows}
        assert len(hashes) == 1

    def test_reports_carry_hash(self, pipeline):
        _, _, out, _ = pipeline
        manifest = json.loads((out / "manifest.json").read_text())
        for name in ("eval.csv", "eval_runs.csv", "bound.csv", "summary.csv"):
            rows = list(csv.DictReader(open(out / "reports" / name)))
            assert rows and all(r["config_hash"] == manifest["config_hash"] for r in rows)

    def test_rerun_is_identical(self, pipeline):
        tmp, cfg, out, _ = pipeline
        out2 = tmp / "again"
        for cmd in ("gen", "preprocess", "pretrain", "finetune", "eval"):
            assert run(cmd, "--config", cfg, "--out", str(out2)) == 0
        assert (out / "manifest.json").read_text() == (out2 / "manifest.json").read_text()
        assert (out / "reports" / "eval.csv").read_bytes() == (out2 / "reports" / "eval.csv").read_bytes()


class TestValidation:
    def test_overlap_rejected_before_generation(self, tmp_path):
        bad = {**TINY, "heldout_levels": {"gridworld": [1]}}
        out = tmp_path / "never"
        assert run("gen", "--config", write_cfg(tmp_path, bad), "--out", str(out)) == 2
        assert not out.exists()

    def test_unknown_key(self, tmp_path):
        assert run("gen", "--config", write_cfg(tmp_path, {**TINY, "demo_count": [1]})) == 2
        assert run("gen", "--config", write_cfg(tmp_path, {**TINY, "train": {"lr": 1.0}})) == 2

    def test_zero_demo_count(self, tmp_path):
        assert run("eval", "--config", write_cfg(tmp_path, {**TINY, "demo_counts": [0, 1]})) == 2

    def test_missing_artifact(self, tmp_path, capsys):
        assert run("eval", "--config", write_cfg(tmp_path, TINY), "--out", str(tmp_path / "empty")) == 1
        assert "pretrained-s0.ckpt" in capsys.readouterr().err

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as e:
            run("gen", "--seed", "x")
        assert e.value.code == 2

    def test_seed_override_changes_hash(self, tmp_path):
        path = write_cfg(tmp_path, TINY)
        assert load_config(path, seed=1).config_hash != load_config(path, seed=2).config_hash
        assert load_config(path, out="a").config_hash == load_config(path, out="b").config_hash


def test_twelve_levels(tmp_path):
    cfg = {**TINY, "pretrain_levels": {"gridworld": list(range(12))}, "demos_per_level": 20}
    out = tmp_path / "g"
    assert run("gen", "--config", write_cfg(tmp_path, cfg), "--out", str(out)) == 0
    files = sorted((out / "demos").glob("gridworld-train-*.demoset"))
    assert len(files) == 12
    assert all(len(load_demoset(f).demos) == 20 for f in files)
