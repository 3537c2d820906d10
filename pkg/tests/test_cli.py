import csv
import json

import pytest

from spar.cli import RunConfig, UsageError, main

TINY = {
    "net": {"unet_levels": 2, "base_channels": 4, "ae_channels": [4, 8, 512], "mask_disc_channels": [4, 8]},
    "train": {"epochs": 2, "batch_size": 4},
    "latentviz": {"perplexity": 3.0, "iterations": 60},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--out", str(root / "data"), "--patients", "2", "--size", "16", "--depth", "4",
                 "--seed", "1"]) == 0
    return root


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_gen_data_is_deterministic(tmp_path, capsys):
    args = ["gen-data", "--patients", "3", "--size", "16", "--depth", "4", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out.strip()
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out.strip() == first and len(first) == 64
    assert sorted(p.name for p in (tmp_path / "a").glob("case_*")) == ["case_000", "case_001", "case_002"]
    assert json.loads((tmp_path / "a" / "cohort.json").read_text())["cohort_hash"] == first


def test_gen_data_rejects_bad_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "60"]) == 1
    err = capsys.readouterr().err.strip()
    assert "16" in err and len(err.splitlines()) == 1


def test_existing_output_needs_force(workspace, capsys):
    args = ["gen-data", "--out", str(workspace / "data"), "--patients", "2", "--size", "16", "--depth", "4",
            "--seed", "1"]
    assert main(args) == 1
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "nonsense"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_missing_data_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--method", "baseline", "--out", str(tmp_path / "o")]) == 1


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(UsageError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"train": {"lr": 0.1}})
    cfg = RunConfig.from_dict({"seed": 4, "train": {"augment": {"max_rotation_deg": 5}}})
    assert cfg.train.seed == cfg.cohort.seed == 4 and cfg.train.augment.max_rotation_deg == 5


def test_default_config_carries_training_defaults():
    cfg = RunConfig()
    assert (cfg.train.lam, cfg.train.ae_lr, cfg.train.seg_lr, cfg.train.epochs, cfg.train.batch_size) == \
        (1e-2, 1e-2, 1e-4, 10, 32)
    assert cfg.latentviz.epochs == (1, 2, 3, 4, 5, 10)


def test_flags_override_config(workspace):
    out = workspace / "override"
    assert main(["train", "--data", str(workspace / "data"), "--method", "baseline", "--config",
                 str(workspace / "tiny.json"), "--epochs", "1", "--out", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["train_config"]["epochs"] == 1 and manifest["final_epoch"] == 1


def test_runtime_failure_exits_two(workspace, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--method", "baseline", "--config",
                 str(workspace / "tiny.json"), "--seg-lr", "1e30", "--epochs", "3", "--out",
                 str(workspace / "diverged")])
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "non-finite" in err


def _train(workspace, method, name, seed=0):
    out = workspace / name
    assert main(["train", "--data", str(workspace / "data"), "--method", method, "--config",
                 str(workspace / "tiny.json"), "--seed", str(seed), "--out", str(out)]) == 0
    return out


def test_train_eval_viz_pipeline_is_byte_reproducible(workspace):
    runs = [_train(workspace, "spar", f"spar{i}", seed=3) for i in range(2)]
    for name in ("loss.csv", "epochs.csv", "ae_loss.csv", "ae_epochs.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    manifest = json.loads((runs[0] / "run_manifest.json").read_text())
    assert set(manifest["checkpoints"]["D"]) == {"1", "2"}

    for r in runs:
        assert main(["eval", "--run", str(r), "--data", str(workspace / "data"), "--case", "000",
                     "--out", str(r / "eval_case")]) == 0
        assert main(["viz-latent", "--run", str(r), "--epochs", "1,2", "--config", str(workspace / "tiny.json"),
                     "--out", str(r / "viz")]) == 0
    for rel in ("eval_case/per_case.csv", "eval_case/aggregate.csv", "viz/codes.csv", "viz/embedding.csv",
                "viz/convergence.csv"):
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel

    agg = _rows(runs[0] / "eval_case" / "aggregate.csv")
    assert agg[0] == ["method", "metric", "mean", "std", "n"]
    assert [r[1] for r in agg[1:]] == ["dice", "ravd_percent", "assd_mm", "mssd_mm"]
    conv = _rows(runs[0] / "viz" / "convergence.csv")
    assert conv[0] == ["epoch", "structure", "mean_nearest_gt_distance"] and len(conv) == 1 + 2 * 3
    codes = _rows(runs[0] / "viz" / "codes.csv")
    svg = (runs[0] / "viz" / "embedding.svg").read_text()
    assert svg.count('class="code"') == len(codes) - 1


def test_viz_missing_epoch(workspace, capsys):
    run = _train(workspace, "spar", "viz_missing")
    assert main(["viz-latent", "--run", str(run), "--epochs", "1,7", "--out", str(workspace / "vm")]) == 1
    assert "7" in capsys.readouterr().err


def test_eval_errors(workspace):
    run = _train(workspace, "baseline", "base_for_eval")
    assert main(["eval", "--run", str(run), "--data", str(workspace / "data"), "--case", "999",
                 "--out", str(workspace / "e1")]) == 1
    assert main(["eval", "--run", str(workspace / "nowhere"), "--data", str(workspace / "data"), "--case", "000",
                 "--out", str(workspace / "e2")]) == 1


def test_eval_loo_two_patients(workspace):
    run = _train(workspace, "baseline", "base_loo")
    out = workspace / "loo"
    assert main(["eval", "--run", str(run), "--data", str(workspace / "data"), "--loo", "--out", str(out)]) == 0
    agg = _rows(out / "aggregate.csv")
    assert all(r[4] == "2" for r in agg[1:2])
    folds = _rows(out / "folds.csv")
    assert folds[0] == ["method", "case_id", "seed", "train_cohort_hash"] and len(folds) == 3


def test_compare_two_runs_identical(workspace):
    outs = []
    for i in range(2):
        out = workspace / f"compare{i}"
        assert main(["compare", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
                     "--epochs", "1", "--out", str(out)]) == 0
        outs.append(out)
    rows = _rows(outs[0] / "compare.csv")
    assert [r[0] for r in rows[1::4]] == ["baseline", "adv-mask", "shape-l2", "spar"]
    assert len(rows) == 1 + 4 * 4
    for name in ("compare.csv", "folds.csv", "baseline/per_case.csv", "spar/per_case.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    info = json.loads((outs[0] / "compare.json").read_text())
    assert len(info["cohort_hash"]) == 64
    table = (outs[0] / "table.txt").read_text().splitlines()
    assert len(table) == 2 + 4
