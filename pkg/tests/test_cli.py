import json
import subprocess
import sys
from pathlib import Path

import pytest

from mamlicl import cli
from mamlicl.checkpoint import load_checkpoint

SMOKE = str(Path(__file__).parent.parent / "configs" / "smoke.cfg")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--config", SMOKE, "--out", str(out)]) == 0
    return out


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"resolved_config.txt", "universe.jsonl", "train_log.jsonl", "checkpoint.ckpt", "train_summary.json",
            "checkpoint_000002.ckpt", "checkpoint_000004.ckpt"} <= names
    recs = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2, 3]
    summary = json.loads((trained / "train_summary.json").read_text())
    assert summary == {"meta_updates": 4, "batches_consumed": 8, "batches_per_update": 2, "skipped": 0}
    assert "meta.steps = 4" in (trained / "resolved_config.txt").read_text()


def test_train_is_reproducible(trained, tmp_path):
    assert cli.main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.ckpt").read_bytes() == (trained / "checkpoint.ckpt").read_bytes()
    strip = lambda p: [{k: v for k, v in json.loads(line).items() if k != "elapsed"}
                       for line in p.read_text().splitlines()]
    assert strip(tmp_path / "train_log.jsonl") == strip(trained / "train_log.jsonl")


def test_seed_override_changes_weights(trained, tmp_path):
    assert cli.main(["train", "--config", SMOKE, "--out", str(tmp_path), "--seed", "7"]) == 0
    a = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert a["seed"] == 7
    assert a["params"].digest() != load_checkpoint(trained / "checkpoint.ckpt")["params"].digest()


def test_evaluate_from_checkpoint(trained, tmp_path, capsys):
    assert cli.main(["evaluate", "--config", SMOKE, "--out", str(tmp_path),
                     "--checkpoint", str(trained / "checkpoint.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "test: average" in out and "unseen: average" in out
    rows = (tmp_path / "eval_report.tsv").read_text().splitlines()
    assert len(rows) == 1 + 8 * 2


def test_adapt_report(trained, tmp_path):
    assert cli.main(["adapt", "--config", SMOKE, "--out", str(tmp_path),
                     "--checkpoint", str(trained / "checkpoint.ckpt")]) == 0
    rows = (tmp_path / "adapt_report.tsv").read_text().splitlines()
    assert rows[0].startswith("phase\ttask") and len(rows) == 1 + 2 * 2 * 2


def test_mismatched_checkpoint_exit_code(trained, tmp_path, capsys):
    cfg = tmp_path / "big.cfg"
    cfg.write_text(Path(SMOKE).read_text().replace("model.d_model = 8", "model.d_model = 16"))
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.ckpt"),
                     "--out", str(tmp_path)]) == 2
    assert "shapes differ" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("meta.n = 0\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    from mamlicl.metatrain import TrainingDiverged

    def boom(*a, **kw):
        raise TrainingDiverged("11 consecutive non-finite steps")

    monkeypatch.setattr(cli, "run_meta_training", boom)
    assert cli.main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 3


def test_ablation_grid(tmp_path):
    assert [r[0] for r in cli.ABLATION_GRID] == ["SGD+SGD", "SGD+AdamW", "AdamW+SGD", "AdamW+AdamW",
                                                 "AdamW+AdamW shared"]
    assert cli.main(["ablate-optimizers", "--config", SMOKE, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation.tsv").read_text().splitlines()
    assert len(rows) == 6
    assert "(*)" in next(r for r in rows if r.startswith("AdamW+SGD"))


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "mamlicl.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "evaluate", "adapt", "ablate-optimizers", "verify"):
        assert cmd in r.stdout
