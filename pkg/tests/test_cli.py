import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

from robomix.cli import run
from robomix.episode import load_episode
from robomix.synth import make_corpus

from conftest import PUBLISHED_MIX


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    truth = make_corpus(root, n_episodes=12, seed=3)
    return root, truth


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_flag(capsys):
    assert run(["qa", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_in_is_usage_error(tmp_path):
    assert run(["qa", "--out", str(tmp_path)]) == 2


def test_missing_input_is_data_error(tmp_path):
    assert run(["qa", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1


def test_config_error_names_file_and_field(tmp_path, capsys):
    cfg = tmp_path / "pipe.json"
    cfg.write_text(json.dumps({"sampler": "missing.json"}))
    assert run(["sample-plan", "--config", str(cfg), "--alpha", "1"]) == 2
    err = capsys.readouterr().err
    assert "pipe.json" in err and "sampler" in err


def test_sample_plan_table(tmp_path, capsys):
    cfg = tmp_path / "sampler.json"
    cfg.write_text(json.dumps({"dataset_ids": list(PUBLISHED_MIX), "weights": list(PUBLISHED_MIX.values()),
                               "ramp_steps": 100, "seed": 0}))
    assert run(["sample-plan", "--alpha", "1", "--config", str(cfg)]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["dataset_id", "probability"]
    w = np.array(list(PUBLISHED_MIX.values()))
    assert [r[0] for r in rows[1:]] == list(PUBLISHED_MIX)
    assert np.allclose([float(r[1]) for r in rows[1:]], w / w.sum(), rtol=0, atol=1e-12)


def test_sample_plan_draws_reproducible(tmp_path, capsys):
    cfg = tmp_path / "sampler.json"
    cfg.write_text(json.dumps({"dataset_ids": ["a", "b"], "weights": [1, 3], "ramp_steps": 10}))
    run(["sample-plan", "--config", str(cfg), "--step", "4", "--draws", "50", "--seed", "9"])
    first = capsys.readouterr().out
    run(["sample-plan", "--config", str(cfg), "--step", "4", "--draws", "50", "--seed", "9"])
    assert capsys.readouterr().out == first
    assert first.count("\n") == 51


def test_qa_single_pack(corpus, tmp_path):
    root, truth = corpus
    clean = next(k for k, v in truth.items() if v is None)
    assert run(["qa", "--in", str(root / "episodes" / clean), "--config", str(root / "pipeline.json"),
                "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "qa_report.json").read_text())
    assert report["episode_id"] == clean and report["accepted"]


def test_bare_qa_config_is_accepted(corpus, tmp_path):
    root, _ = corpus
    cfg = tmp_path / "qa.json"
    cfg.write_text(json.dumps({"tremble_max": 0.9, "sharpness_min": 1.0, "min_length": 2}))
    assert run(["qa", "--in", str(root / "episodes"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "qa_index.json").is_file()


def test_qa_corpus_rejects_faults(corpus, tmp_path):
    root, truth = corpus
    assert run(["qa", "--in", str(root / "episodes"), "--config", str(root / "pipeline.json"),
                "--out", str(tmp_path)]) == 0
    index = json.loads((tmp_path / "qa_index.json").read_text())
    assert index["rejected"] == {k: [v] for k, v in truth.items() if v}


def test_every_subcommand_runs_and_is_idempotent(corpus, tmp_path):
    root, _ = corpus
    cfg = str(root / "pipeline.json")
    eps = str(root / "episodes")
    before = tree_digest(root / "episodes")

    def pipeline(out):
        cmds = [
            ["validate"], ["qa"], ["align", "--write-packs"], ["unify"], ["augment"], ["summary"],
            ["progress"],
            ["fit-ood", "--embodiment", "aloha_bimanual"],
            ["refine", "--embodiment", "franka_single"],
        ]
        for c in cmds:
            args = [c[0], "--in", eps, "--config", cfg, "--out", str(out / c[0]), "--seed", "1", *c[1:]]
            assert run(args) == 0, c
        model = out / "fit-ood" / "gmm_model.json"
        assert run(["ood-check", "--in", eps, "--model", str(model), "--config", cfg,
                    "--out", str(out / "ood-check")]) == 0
        return tree_digest(out)

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    assert a == b
    rerun = pipeline(tmp_path / "a")
    assert rerun == a
    assert tree_digest(root / "episodes") == before
    assert any(k.endswith(".align_plan.json") for k in a)
    plan = json.loads((tmp_path / "a" / "align" / "green_humanoid.align_plan.json").read_text())
    assert {"dataset_id", "mean_flow", "reference_flow", "stride_f"} <= set(plan)


def test_jobs_do_not_change_outputs(corpus, tmp_path):
    root, _ = corpus
    for jobs in ("1", "3"):
        assert run(["qa", "--in", str(root / "episodes"), "--config", str(root / "pipeline.json"),
                    "--out", str(tmp_path / jobs), "--jobs", jobs]) == 0
    assert tree_digest(tmp_path / "1") == tree_digest(tmp_path / "3")


def test_unify_writes_float_matrix(corpus, tmp_path):
    root, _ = corpus
    assert run(["unify", "--in", str(root / "episodes" / "ep001"), "--config", str(root / "pipeline.json"),
                "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "unified.json").read_text())
    U = np.fromfile(tmp_path / "unified_actions.f32", dtype="<f4").reshape(meta["T"], 64)
    assert not U[:, [i for i in range(64) if i not in meta["mask"]]].any()


def test_retarget_gripper_robot_to_humanoid(corpus, tmp_path):
    root, truth = corpus
    aloha = next(p for p in sorted((root / "episodes").iterdir())
                 if load_episode(p).embodiment_id == "aloha_bimanual" and truth[p.name] is None)
    assert run(["retarget", "--in", str(aloha), "--target", "green_humanoid",
                "--config", str(root / "pipeline.json"), "--out", str(tmp_path)]) == 0
    out = load_episode(tmp_path / "episodes" / f"{aloha.name}.green_humanoid")
    assert out.embodiment_id == "green_humanoid" and out.action_dim == 38
    report = json.loads((tmp_path / "retarget_report.json").read_text())
    assert report[aloha.name]["source_embodiment"] == "aloha_bimanual"


def test_retarget_needs_target(corpus, tmp_path):
    root, _ = corpus
    assert run(["retarget", "--in", str(root / "episodes"), "--out", str(tmp_path)]) == 2


def test_make_corpus_command(tmp_path):
    assert run(["make-corpus", "--out", str(tmp_path), "--episodes", "8", "--seed", "2"]) == 0
    assert len(list((tmp_path / "episodes").iterdir())) == 8
