from __future__ import annotations

import json

import pytest
import torch
import yaml

from golden.regenerate import help_texts
from conftest import GOLDEN
from motionanim.cli import main
from motionanim.config import SCHEMA
from motionanim.denoiser import load_checkpoint
from motionanim.io import read_frames

TINY = {"schema": SCHEMA,
        "model": {"base_width": 16, "embed_width": 16, "time_width": 16, "heads": 2, "groups": 4},
        "optim": {"batch_size": 2},
        "train": {"checkpoint_every": 5, "eval_batch": 4, "log_every": 5},
        "sampler": {"num_inference_steps": 3}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--scenes", "1",
                 "--train-clips", "6"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run"),
                 "--steps", "10"]) == 0
    return root, cfg


def params(path):
    model, _, _ = load_checkpoint(path)
    return torch.cat([p.detach().flatten() for p in model.parameters()])


@pytest.mark.parametrize("name", ["motionanim", "gen-data", "train", "edit", "eval", "report"])
def test_help_matches_golden(name):
    assert help_texts()[name] == (GOLDEN / f"help_{name}.txt").read_text()


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    assert "--resume" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["gen-data", "--scenes", "0"], ["gen-data", "--scenes", "x"], [],
                                  ["edit", "--scale-motion", "-1"], ["report"],
                                  ["report", "--scores", "a", "--paper-scores"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_missing_corpus_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == 2
    err = capsys.readouterr().err
    assert "training corpus not found" in err and str(tmp_path / "nowhere") in err


def test_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(f"schema: {SCHEMA}\nmodle: {{}}\n")
    assert main(["report", "--paper-scores", "--config", str(tmp_path / "c.yaml")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_gen_data_summary_line(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--scenes", "2", "--train-clips", "0"]) == 0
    assert capsys.readouterr().out.strip() == f"wrote 12 edit tasks over 2 scenes and 0 training clips to {tmp_path}"


def test_train_outputs_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    run = root / "run"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["step_000005.ckpt", "step_000010.ckpt"]
    summary = json.loads((run / "summary.json").read_text())
    assert summary["steps"] == 10
    assert [json.loads(x)["step"] for x in (run / "losses.jsonl").read_text().splitlines()] == list(range(1, 11))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                 "--steps", "10"]) == 0
    assert (tmp_path / "last.ckpt").read_bytes() == (run / "last.ckpt").read_bytes()
    assert (tmp_path / "summary.json").read_bytes() == (run / "summary.json").read_bytes()


def test_resume_matches_straight_run(workspace, tmp_path):
    root, cfg = workspace
    common = ["--config", str(cfg), "--data", str(root / "data")]
    assert main(["train", *common, "--out", str(tmp_path / "a"), "--steps", "20"]) == 0
    assert main(["train", *common, "--out", str(tmp_path / "b"), "--steps", "10"]) == 0
    assert main(["train", *common, "--out", str(tmp_path / "b"), "--steps", "20", "--resume"]) == 0
    torch.testing.assert_close(params(tmp_path / "b" / "last.ckpt"), params(tmp_path / "a" / "last.ckpt"),
                               atol=1e-6, rtol=0)
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert sb["initial_loss"] == sa["initial_loss"]
    assert (tmp_path / "a" / "losses.jsonl").read_text().count("\n") == 20
    assert (tmp_path / "b" / "losses.jsonl").read_text().count("\n") == 20


def test_resume_without_checkpoint_exit_2(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                 "--resume"]) == 2


def test_edit_candidates_distinct_and_deterministic(workspace, tmp_path):
    root, cfg = workspace
    argv = ["edit", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
            str(root / "run" / "last.ckpt"), "--task", "syn-0000-style", "--candidates", "3"]
    assert main([*argv, "--out", str(tmp_path / "a")]) == 0
    assert main([*argv, "--out", str(tmp_path / "b")]) == 0
    task = "moca/syn-0000-style"
    cands = [read_frames(tmp_path / "a" / task / "candidates" / f"cand_{i:02d}")[0] for i in range(3)]
    assert not (cands[0] == cands[1]).all() and not (cands[1] == cands[2]).all()
    for p in sorted((tmp_path / "a" / task).rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    ranking = json.loads((tmp_path / "a" / task / "ranking.json").read_text())["ranking"]
    keys = [(-r["m_geo"], r["candidate"]) for r in ranking]
    assert keys == sorted(keys) and [r["seed"] for r in sorted(ranking, key=lambda r: r["candidate"])] == [0, 1, 2]
    best = read_frames(tmp_path / "a" / task)[0]
    assert (best == read_frames(tmp_path / "a" / task / "candidates" / ranking[0]["candidate"])[0]).all()


def test_edit_motion_type_logs_drop(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["edit", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                 str(root / "run" / "last.ckpt"), "--task", "syn-0000-motion", "--out", str(tmp_path)]) == 0
    assert "INFO motion edit: motion conditioning dropped (s_M = 0) for 1 of 1" in capsys.readouterr().err


def test_edit_unknown_task_exit_2(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["edit", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                 str(root / "run" / "last.ckpt"), "--task", "nope", "--out", str(tmp_path)]) == 2
    assert "unknown task id" in capsys.readouterr().err


def test_eval_missing_edits_and_labels(workspace, tmp_path, capsys):
    root, cfg = workspace
    edits = tmp_path / "edits"
    assert main(["edit", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                 str(root / "run" / "last.ckpt"), "--task", "syn-0000-object", "--out", str(edits)]) == 0
    base = ["eval", "--config", str(cfg), "--data", str(root / "data"), "--edits", str(edits),
            "--out", str(tmp_path / "report")]
    assert main(base) == 1
    assert "5 manifest row(s) have no edit" in capsys.readouterr().err
    assert main([*base, "--allow-missing"]) == 0
    assert "no labels given: alignment sections marked absent" in capsys.readouterr().out
    assert (tmp_path / "report" / "scores.jsonl").read_text().count("\n") == 1


def test_report_corrupt_labels_exit_1(tmp_path, capsys):
    good = {"task_id": "t", "method_a": "a", "method_b": "b", "scores_a": {"m_geo": 0.1},
            "scores_b": {"m_geo": 0.2}, "votes": [{"choice": "A", "reasons": ["text-alignment"]}]}
    (tmp_path / "labels.jsonl").write_text(json.dumps(good) + "\n{broken\n")
    assert main(["report", "--paper-scores", "--labels", str(tmp_path / "labels.jsonl"),
                 "--out", str(tmp_path / "r")]) == 1
    assert "labels line 2" in capsys.readouterr().err


def test_report_paper_scores(tmp_path, capsys):
    assert main(["report", "--paper-scores", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "MoCA > VideoComposer > Tune-a-Video > Gen-1 > Dreamix > TokenFlow > MasaCtrl" in out
    assert (tmp_path / "tables.txt").exists()
