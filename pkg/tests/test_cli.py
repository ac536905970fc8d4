import json

import pytest
from PIL import Image

from keystego.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main

from .conftest import synthetic_module

KEY_VALUES = (918273645546372819, 1029384756647382910, 5647382910192837465, 8877665544332211009)
KEYS = f"{KEY_VALUES[0]}:{KEY_VALUES[1]},{KEY_VALUES[2]}:{KEY_VALUES[3]}"


@pytest.fixture
def workspace(tmp_path, isolated_settings):
    gen = synthetic_module()
    for split, count in (("train", 8), ("val", 6)):
        gen.write_split(tmp_path / "data", split, count, side=16, seed=0)
    config = {
        "run_name": "cli",
        "backbone": {"width": 4, "depth": 1, "side": 16},
        "train": {"num_keys": 2, "steps": 2, "batch_size": 2, "eval_every": 0,
                  "checkpoint_every": 0, "eval_samples": 2},
        "data": {"root": str(tmp_path / "data"), "side": 16},
    }
    (tmp_path / "run.json").write_text(json.dumps(config))
    return tmp_path


@pytest.fixture
def checkpoint(workspace):
    assert main(["train", "--config", str(workspace / "run.json"), "--keys", KEYS]) == EXIT_OK
    path = workspace / "runs" / "cli" / "checkpoints" / "last.ckpt"
    assert path.is_file()
    return path


def test_train_writes_run_directory(checkpoint):
    run_dir = checkpoint.parent.parent
    assert (run_dir / "run_config.json").is_file()
    assert (run_dir / "metrics.jsonl").is_file()
    assert (run_dir / "eval_report.json").is_file()


def test_embed_recover_purify(workspace, checkpoint):
    secret = workspace / "data" / "val" / "val_00000.png"
    cover = workspace / "data" / "val" / "val_00001.png"
    stego = workspace / "out" / "stego.png"
    common = ["--checkpoint", str(checkpoint)]
    assert main(["embed", *common, "--key", str(KEY_VALUES[0]), "--secret", str(secret), "--cover", str(cover),
                 "--out", str(stego)]) == EXIT_OK
    assert main(["recover", *common, "--key", hex(KEY_VALUES[1]), "--stego", str(stego),
                 "--out", str(workspace / "out" / "rec.png"), "--secret", str(secret)]) == EXIT_OK
    assert main(["purify", *common, "--noisy", str(cover), "--out", str(workspace / "out" / "pur.png"),
                 "--clean", str(cover)]) == EXIT_OK
    with Image.open(stego) as img:
        assert img.size == (16, 16)


def test_report_commands(workspace, checkpoint):
    out = workspace / "reports"
    common = ["--checkpoint", str(checkpoint), "--keys", KEYS]
    assert main(["evaluate", *common, "--out-dir", str(out / "eval")]) == EXIT_OK
    assert main(["crossmatrix", *common, "--out-dir", str(out / "cm")]) == EXIT_OK
    assert main(["probe", *common, "--n-random", "2", "--out-dir", str(out / "probe")]) == EXIT_OK
    assert main(["pca", *common, "--n-samples", "2", "--baseline", str(checkpoint),
                 "--out-dir", str(out / "pca")]) == EXIT_OK

    report = json.loads((out / "eval" / "eval_report.json").read_text())
    assert report["report"]["sample_count"] == 3
    assert (out / "eval" / "eval_grid.png").is_file()
    matrix = json.loads((out / "cm" / "cross_key_matrix.json").read_text())
    assert len(matrix["cells"]) == 2
    assert (out / "cm" / "cross_key_matrix.png").is_file()
    assert json.loads((out / "probe" / "probe_report.json").read_text())["n_random"] == 2
    assert set(json.loads((out / "pca" / "pca_points.json").read_text())) == {"isolated", "baseline"}


def test_evaluate_at_another_side(workspace, checkpoint):
    out = workspace / "side32"
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--keys", KEYS, "--side", "32",
                 "--out-dir", str(out)]) == EXIT_OK
    assert (out / "eval_report.json").is_file()


def test_resume_extends_training(workspace, checkpoint):
    assert main(["train", "--resume", str(checkpoint), "--keys", KEYS, "--set", "train.steps=3"]) == EXIT_OK
    events = [json.loads(l) for l in (checkpoint.parent.parent / "metrics.jsonl").read_text().splitlines()]
    assert max(e["step"] for e in events if e["event"] == "step") == 2


def test_sweep_writes_summary(workspace):
    out = workspace / "sweep"
    assert main(["sweep", "--config", str(workspace / "run.json"), "--k-list", "2",
                 "--alpha-list", "0.5,0.9", "--set", "train.steps=1", "--out-dir", str(out)]) == EXIT_OK
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert [(c["num_keys"], c["alpha"]) for c in summary["cells"]] == [(2, 0.5), (2, 0.9)]
    assert (out / "K2_alpha0.5" / "cross_key_matrix.json").is_file()


def test_key_errors_exit_with_usage_code(workspace, checkpoint):
    run = str(workspace / "run.json")
    assert main(["train", "--config", run]) == EXIT_USAGE
    assert main(["train", "--config", run, "--keys", "1:2"]) == EXIT_USAGE
    assert main(["train", "--config", run, "--keys", "1:1,2:3"]) == EXIT_USAGE
    assert main(["recover", "--checkpoint", str(checkpoint), "--key", "nope", "--stego", run,
                 "--out", str(workspace / "x.png")]) == EXIT_USAGE
    assert main(["train", "--config", run, "--set", "train.alpha=2"]) == EXIT_USAGE


def test_generated_keys_for_experiments(workspace):
    assert main(["train", "--config", str(workspace / "run.json"), "--random-keys", "5",
                 "--set", "run_name=generated"]) == EXIT_OK
    assert (workspace / "runs" / "generated" / "checkpoints" / "last.ckpt").is_file()


def test_runtime_errors_exit_with_failure_code(workspace):
    assert main(["evaluate", "--checkpoint", str(workspace / "missing.ckpt"), "--keys", KEYS]) == EXIT_FAILURE
    assert main(["train", "--config", str(workspace / "run.json"), "--keys", KEYS,
                 "--set", f"data.root={workspace / 'nowhere'}"]) == EXIT_FAILURE


def test_index_selects_a_registered_pair(workspace, checkpoint):
    secret = workspace / "data" / "val" / "val_00000.png"
    cover = workspace / "data" / "val" / "val_00001.png"
    out = workspace / "out"
    common = ["--checkpoint", str(checkpoint)]
    assert main(["embed", *common, "--index", "2", "--keys", KEYS, "--secret", str(secret),
                 "--cover", str(cover), "--out", str(out / "by_index.png")]) == EXIT_OK
    assert main(["embed", *common, "--key", str(KEY_VALUES[2]), "--secret", str(secret),
                 "--cover", str(cover), "--out", str(out / "by_key.png")]) == EXIT_OK
    assert main(["recover", *common, "--index", "2", "--keys", KEYS, "--stego", str(out / "by_index.png"),
                 "--out", str(out / "rec_index.png")]) == EXIT_OK
    assert main(["recover", *common, "--key", str(KEY_VALUES[3]), "--stego", str(out / "by_index.png"),
                 "--out", str(out / "rec_key.png")]) == EXIT_OK
    for a, b in (("by_index.png", "by_key.png"), ("rec_index.png", "rec_key.png")):
        with Image.open(out / a) as x, Image.open(out / b) as y:
            assert list(x.getdata()) == list(y.getdata())


def test_index_errors_exit_with_usage_code(workspace, checkpoint):
    args = ["recover", "--checkpoint", str(checkpoint), "--stego", str(workspace / "data" / "val" / "val_00000.png"),
            "--out", str(workspace / "x.png")]
    assert main([*args, "--index", "3", "--keys", KEYS]) == EXIT_USAGE
    assert main([*args, "--index", "1"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main([*args, "--index", "1", "--key", "5", "--keys", KEYS])


def test_keys_never_reach_logs(workspace, checkpoint, isolated_settings):
    secret = workspace / "data" / "val" / "val_00000.png"
    cover = workspace / "data" / "val" / "val_00001.png"
    assert main(["embed", "--checkpoint", str(checkpoint), "--key", str(KEY_VALUES[0]), "--secret", str(secret),
                 "--cover", str(cover), "--out", str(workspace / "out" / "s.png")]) == EXIT_OK
    assert main(["recover", "--checkpoint", str(checkpoint), "--index", "1", "--keys", KEYS,
                 "--stego", str(secret), "--out", str(workspace / "out" / "r.png")]) == EXIT_OK
    run_dir = checkpoint.parent.parent
    log = workspace / "logs" / "keystego.log"
    texts = [log.read_text() if log.exists() else ""]
    texts += [(run_dir / name).read_text() for name in ("metrics.jsonl", "run_config.json", "eval_report.json")]
    for value in KEY_VALUES:
        for form in (str(value), hex(value), f"{value:x}"):
            for text in texts:
                assert form not in text
