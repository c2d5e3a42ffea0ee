import csv
import json
import shutil

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pytest  # noqa: E402
import torch  # noqa: E402

from advdetect import cli, config, harness, models, synthetic  # noqa: E402
from advdetect.attacks import SWEEP_HEADER  # noqa: E402
from advdetect.errors import ConfigError  # noqa: E402
from advdetect.pipeline import stage_seed  # noqa: E402
from conftest import run_pipeline, write_config  # noqa: E402


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    synthetic.write_dataset(root, {"train": 24, "val": 8, "test": 12}, num_classes=2, size=40, seed=5)
    return root


def small_config(tmp_path, root, name="run", **sections):
    sections.setdefault("train", {})
    sections["train"] = {"num_classes": 2, "head_classes": 4, "epochs": 1, **sections["train"]}
    sections.setdefault("detector", {"calibration_split": "train"})
    return write_config(tmp_path / f"{name}.toml", root / "classification", tmp_path / name, **sections)


# config ----------------------------------------------------------------------

def test_default_config_and_round_trip(tmp_path):
    empty = tmp_path / "empty.toml"
    empty.write_text("")
    cfg = config.load_config(empty)
    assert cfg == config.ExperimentConfig()
    assert cfg.train.learning_rate == 0.001 and cfg.train.momentum == 0.9 and cfg.train.batch_size == 4
    config.save_config(cfg, tmp_path / "again.toml")
    assert config.load_config(tmp_path / "again.toml").config_hash() == cfg.config_hash()
    assert cfg.with_overrides(output="elsewhere").config_hash() == cfg.config_hash()
    assert cfg.with_overrides(seed=3).config_hash() != cfg.config_hash()


@pytest.mark.parametrize("text, match", [
    ("bogus = 1\n", "unknown keys"),
    ("[train]\nepochz = 3\n", "unknown keys"),
    ("[train]\nepochs = 2.5\n", "integer"),
    ("[attack]\nclamp = 1\n", "boolean"),
    ("task = \"detection\"\n", "expected one of"),
    ("[train\n", "invalid TOML"),
])
def test_config_errors(tmp_path, text, match):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        config.load_config(path)


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "nope.toml" in capsys.readouterr().err


# stages ----------------------------------------------------------------------

def test_make_dataset_cli(tmp_path):
    cfg = write_config(tmp_path / "c.toml", tmp_path, tmp_path / "data",
                       dataset={"train": 4, "val": 2, "test": 2, "num_classes": 3})
    assert cli.main(["make-dataset", "--config", str(cfg)]) == 0
    assert sorted(p.name for p in (tmp_path / "data" / "classification" / "train").iterdir()) == \
        ["circle", "square", "triangle"]
    assert len(list((tmp_path / "data" / "segmentation" / "val" / "masks").iterdir())) == 2


def test_zero_epochs_keeps_initialization(tmp_path, small_root):
    cfg_path = small_config(tmp_path, small_root, train={"epochs": 0})
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    cfg = config.load_config(cfg_path)
    loaded = models.load_checkpoint(harness.checkpoint_path(cfg))
    init = models.ClassifierModel("tiny-cnn", 4, 64, input_size=32, seed=stage_seed(0, "model-init"))
    assert torch.equal(loaded.head.weight, init.head.weight)
    assert models.backbone_checksum(loaded) == models.backbone_checksum(init)
    assert models.read_epoch_log(tmp_path / "run" / "train" / "epoch_log.csv") == []


def test_overfit_ten_images(tmp_path):
    root = tmp_path / "ten"
    synthetic.write_dataset(root, {"train": 10}, num_classes=2, size=40, seed=2)
    cfg = write_config(tmp_path / "c.toml", root / "classification", tmp_path / "run",
                       preprocess={"scale": [1.0, 1.0], "ratio": [1.0, 1.0], "flip_probability": 0.0},
                       train={"num_classes": 2, "head_classes": 4, "epochs": 30, "learning_rate": 0.01})
    rows = harness.cmd_train(config.load_config(cfg))
    assert rows[-1].phase == "train" and rows[-1].accuracy == 1.0


def test_rerun_gives_identical_epoch_log(tmp_path, small_root):
    logs = []
    for name in ("a", "b"):
        cfg = small_config(tmp_path, small_root, name, train={"epochs": 2})
        assert cli.main(["train", "--config", str(cfg)]) == 0
        logs.append((tmp_path / name / "train" / "epoch_log.csv").read_text())
    assert logs[0] == logs[1]


def test_missing_checkpoint_names_path(tmp_path, small_root, capsys):
    cfg = small_config(tmp_path, small_root)
    assert cli.main(["sweep", "--config", str(cfg)]) == 2
    assert str(tmp_path / "run" / "train" / "checkpoint.ckpt") in capsys.readouterr().err


def test_malformed_dataset_lists_paths(tmp_path, small_root, capsys):
    root = tmp_path / "broken"
    shutil.copytree(small_root / "classification", root / "classification")
    stray = root / "classification" / "train" / "circle" / "README.txt"
    stray.write_text("not an image")
    cfg = small_config(tmp_path, root)
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert str(stray) in capsys.readouterr().err


def test_label_outside_class_count_is_rejected(tmp_path, small_root, capsys):
    cfg = small_config(tmp_path, small_root, train={"num_classes": 1, "head_classes": 2})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "num_classes" in capsys.readouterr().err


def test_small_calibration_split_exits_1(tmp_path, small_root, capsys):
    cfg = small_config(tmp_path, small_root, detector={"calibration_split": "val"})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert cli.main(["detect", "--config", str(cfg)]) == 1
    assert "at least 20" in capsys.readouterr().err


def test_changed_config_on_same_output_is_refused(tmp_path, small_root, capsys):
    cfg = small_config(tmp_path, small_root)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    cfg2 = small_config(tmp_path, small_root, train={"epochs": 2})
    assert cli.main(["train", "--config", str(cfg2), "--output", str(tmp_path / "run")]) == 2
    assert "different config" in capsys.readouterr().err


def test_zero_only_grid_and_independent_reader(tmp_path, small_root):
    cfg = small_config(tmp_path, small_root, attack={"eps_grid": [0.0]})
    run_pipeline(cfg, ("train", "sweep"))
    path = tmp_path / "run" / "sweep" / "sweep.csv"
    with open(path, newline="") as f:
        parsed = list(csv.reader(f))
    assert parsed[0] == SWEEP_HEADER
    assert len(parsed) == 2
    assert [float(v) for v in parsed[1]] == [0.0] + [1.0] * 6
    fig, ax = plt.subplots()
    ax.plot([float(r[0]) for r in parsed[1:]], [float(r[2]) for r in parsed[1:]])
    fig.savefig(tmp_path / "replot.png")
    plt.close(fig)
    assert (tmp_path / "replot.png").stat().st_size > 0


def test_segmentation_run(tmp_path, small_root):
    cfg = write_config(tmp_path / "seg.toml", small_root / "segmentation", tmp_path / "seg",
                       task="segmentation",
                       train={"num_classes": 3, "head_classes": 3, "epochs": 1},
                       attack={"eps_grid": [0.0, 0.05]})
    run_pipeline(cfg, ("train", "sweep"))
    rows = list(csv.reader(open(tmp_path / "seg" / "sweep" / "sweep.csv")))
    assert rows[1][1:] == ["1.0"] * 6
    assert cli.main(["detect", "--config", str(cfg)]) == 2
    assert cli.main(["verify", str(tmp_path / "seg")]) == 0


# end-to-end runs ---------------------------------------------------------------

def test_e2e_outputs(e2e_runs):
    run = e2e_runs[0]
    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"train", "sweep", "detect"}
    assert manifest["toolkit_version"] == "0.1.0"
    summary = json.loads((run / "detect" / "auroc.json").read_text())
    for metric in ("confidence", "non_me", "k_density"):
        assert summary["auroc"][metric]["0.00"] == 0.5
    panel = sorted((run / "sweep" / "images").iterdir())
    assert len(panel) == 4 * 9
    for line in (run / "detect" / "detections.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["verdict"] in ("clean", "adversarial")
        assert (rec["verdict"] == "clean") == (rec["margin"] >= 0)


def test_verify_passes_on_intact_run(e2e_runs, capsys):
    assert cli.main(["verify", str(e2e_runs[0])]) == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_flags_flipped_byte(e2e_runs, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(e2e_runs[0], run)
    target = run / "detect" / "reference_set.bin"
    blob = bytearray(target.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    target.write_bytes(bytes(blob))
    report = harness.cmd_verify(run)
    assert not report.ok
    assert report.failures == ["detect/reference_set.bin: content hash mismatch"]
    assert cli.main(["verify", str(run)]) == 1


def test_verify_flags_non_identity_zero_row(e2e_runs, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(e2e_runs[0], run)
    path = run / "sweep" / "sweep.csv"
    lines = path.read_text().splitlines()
    lines[1] = "0.0," + ",".join(["0.99"] * 6)
    path.write_text("\n".join(lines) + "\n")
    failures = harness.cmd_verify(run).failures
    assert any("not all ones" in f for f in failures)


def test_verify_flags_missing_artifact_and_bad_jsonl(e2e_runs, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(e2e_runs[0], run)
    (run / "sweep" / "panel.png").unlink()
    with open(run / "detect" / "detections.jsonl", "a") as f:
        f.write("{not json\n")
    failures = harness.cmd_verify(run).failures
    assert "sweep/panel.png: missing" in failures
    assert any("detections.jsonl: line" in f for f in failures)
    assert not harness.cmd_verify(tmp_path / "nowhere").ok


def test_detect_does_not_touch_other_stages(e2e_runs, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(e2e_runs[0], run)
    before = {p: harness.sha256_file(p) for p in (run / "train").iterdir()}
    sweep_before = harness.sha256_file(run / "sweep" / "sweep.csv")
    cfg = config.load_config(run / "config.toml").with_overrides(output=run)
    harness.cmd_detect(cfg)
    assert {p: harness.sha256_file(p) for p in (run / "train").iterdir()} == before
    assert harness.sha256_file(run / "sweep" / "sweep.csv") == sweep_before
    assert harness.cmd_verify(run).ok
