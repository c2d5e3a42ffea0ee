"""Staged experiment commands: train, sweep, detect, verify, make-dataset.

Each stage writes into ``<output_dir>/<stage>/`` and records its artifacts
(path + SHA-256) and wall-clock time in ``<output_dir>/manifest.json``.
The resolved config is written to ``<output_dir>/config.toml`` before any
computation; later stages refuse to run against a different config.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, attacks, detector, models, plots, synthetic
from .config import ExperimentConfig, dumps, load_config
from .errors import CheckpointError, ConfigError, DatasetError, ValidationError
from .pipeline import (AugmentSpec, ImageDataset, NormSpec, TensorImage, denormalize, load_image,
                       load_mask, save_image, scan_classification_tree, scan_segmentation_pairs, stage_seed)
from .segmetrics import PER_CLASS_HEADER, write_per_class_csv

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG = "config.toml"
ROC_HEADER = ["fpr", "tpr", "threshold"]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_dir: Path
    config_hash: str
    toolkit_version: str = __version__
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir):
        run_dir = Path(run_dir)
        data = json.loads((run_dir / MANIFEST).read_text())
        return cls(run_dir, data["config_hash"], data.get("toolkit_version", ""), data.get("stages", {}))

    def save(self):
        payload = {"config_hash": self.config_hash, "toolkit_version": self.toolkit_version,
                   "stages": self.stages}
        (self.run_dir / MANIFEST).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def record(self, stage, paths, wall_clock):
        artifacts = {}
        for p in paths:
            rel = Path(p).relative_to(self.run_dir).as_posix()
            artifacts[rel] = sha256_file(p)
        self.stages[stage] = {"artifacts": artifacts, "wall_clock_s": round(wall_clock, 3)}
        self.save()

    def artifact(self, stage, name):
        return self.run_dir / stage / name


def prepare_run(cfg: ExperimentConfig):
    """Create the run directory, pin the config and open the manifest."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dumps(cfg)
    cfg_path = out / CONFIG
    if cfg_path.exists():
        existing = load_config(cfg_path)
        if existing.config_hash() != cfg.config_hash():
            raise ConfigError(f"{out} already holds a run with a different config; use a fresh --output")
    else:
        cfg_path.write_text(text)
    if (out / MANIFEST).exists():
        manifest = RunManifest.load(out)
        if manifest.config_hash != cfg.config_hash():
            raise ConfigError(f"{out / MANIFEST} was produced by a different config")
    else:
        manifest = RunManifest(out, cfg.config_hash())
        manifest.save()
    return manifest


# data ------------------------------------------------------------------------

def norm_spec(cfg):
    return NormSpec(cfg.preprocess.mean, cfg.preprocess.std)


def augment_spec(cfg, mode):
    p = cfg.preprocess
    return AugmentSpec(p.crop_size, p.resize_size, p.flip_probability, mode,
                       stage_seed(cfg.global_seed, "augment"), tuple(p.scale), tuple(p.ratio))


def _class_names(cfg):
    root = Path(cfg.dataset_root) / "train"
    _, names = scan_classification_tree(root)
    return names


def load_split(cfg, split, class_names=None):
    """Raw images of one split, validated against the configured class count."""
    root = Path(cfg.dataset_root) / split
    k = cfg.train.num_classes
    if cfg.task == "classification":
        samples, names = scan_classification_tree(root, class_names)
        if len(names) > k:
            raise DatasetError(f"{len(names)} class directories but train.num_classes = {k}", [root])
        images, bad = [], []
        for path, label in samples:
            try:
                images.append(load_image(path, label))
            except DatasetError as exc:
                bad.extend(exc.paths)
        if bad:
            raise DatasetError("unreadable or non-RGB images", bad)
        return images
    images, bad = [], []
    for img_path, mask_path in scan_segmentation_pairs(root):
        try:
            img = load_image(img_path)
            img.label_map = load_mask(mask_path, k)
            img.validate()
            images.append(img)
        except (DatasetError, ValidationError) as exc:
            bad.extend(getattr(exc, "paths", [img_path]))
    if bad:
        raise DatasetError("malformed image/mask pairs", bad)
    return images


def eval_dataset(cfg, images):
    return ImageDataset(images, augment_spec(cfg, "eval"), norm_spec(cfg), dense=cfg.task == "segmentation")


def _stack(ds):
    xs, ys = zip(*(ds[i] for i in range(len(ds))))
    return torch.stack(xs), torch.stack([torch.as_tensor(y) for y in ys])


def checkpoint_path(cfg):
    return Path(cfg.output_dir) / "train" / "checkpoint.ckpt"


def _load_model(cfg):
    path = checkpoint_path(cfg)
    if not path.exists():
        raise CheckpointError("checkpoint not found; run `advdetect train` first", path)
    return load_checkpoint_for(cfg, path)


def load_checkpoint_for(cfg, path):
    return models.load_checkpoint(path, expected_backbone=cfg.backbone_id)


# stages ----------------------------------------------------------------------

def cmd_make_dataset(cfg: ExperimentConfig, root=None):
    root = Path(root or cfg.output_dir)
    d = cfg.dataset
    counts = synthetic.write_dataset(root, {"train": d.train, "val": d.val, "test": d.test},
                                     d.num_classes, d.image_size, cfg.global_seed)
    log.info("wrote synthetic dataset to %s: %s", root, counts)
    return counts


def cmd_train(cfg: ExperimentConfig):
    start = time.perf_counter()
    manifest = prepare_run(cfg)
    names = _class_names(cfg) if cfg.task == "classification" else None
    train_imgs = load_split(cfg, "train", names)
    val_imgs = load_split(cfg, "val", names) if (Path(cfg.dataset_root) / "val").is_dir() else None

    t = cfg.train
    model = models.ClassifierModel(
        cfg.backbone_id, t.head_classes, cfg.model.feature_dim, input_size=cfg.preprocess.crop_size,
        norm=norm_spec(cfg), dense=cfg.task == "segmentation", seed=stage_seed(cfg.global_seed, "model-init"),
        widths=tuple(cfg.model.widths), pretrained=cfg.model.pretrained or None,
    )
    tcfg = models.TrainConfig(t.learning_rate, t.momentum, t.batch_size, t.epochs, t.num_classes,
                              t.head_classes, stage_seed(cfg.global_seed, "train"))
    model.train_config = tcfg.to_dict()
    train_ds = ImageDataset(train_imgs, augment_spec(cfg, "train"), norm_spec(cfg),
                            dense=cfg.task == "segmentation")
    val_ds = eval_dataset(cfg, val_imgs) if val_imgs else None

    out = Path(cfg.output_dir) / "train"
    out.mkdir(parents=True, exist_ok=True)
    last, best = out / "checkpoint_last.ckpt", out / "checkpoint_best.ckpt"
    best_acc = [-1.0]

    def keep_best(epoch, m, rows):
        val = [r for r in rows if r.epoch == epoch and r.phase == "val"]
        score = val[0].accuracy if val else rows[-1].accuracy
        if score > best_acc[0]:
            best_acc[0] = score
            models.save_checkpoint(m, best, extra={"epoch": epoch, "val_accuracy": score})

    model, rows = models.train_head(model, train_ds, tcfg, val_ds, callback=keep_best)
    models.save_checkpoint(model, last, extra={"epoch": t.epochs})
    if not best.exists():
        models.save_checkpoint(model, best, extra={"epoch": 0})
    chosen = best if t.select == "best_val" else last
    checkpoint_path(cfg).write_bytes(chosen.read_bytes())

    log_csv = out / "epoch_log.csv"
    models.write_epoch_log(rows, log_csv)
    plot = out / "epoch_log.png"
    plots.epoch_log_plot(rows, plot)
    artifacts = [checkpoint_path(cfg), last, best, log_csv, plot]
    if names is not None:
        (out / "class_names.json").write_text(json.dumps(names) + "\n")
        artifacts.append(out / "class_names.json")
    manifest.record("train", artifacts, time.perf_counter() - start)
    return rows


def _panel(cfg, model, ds, eps, out):
    n = min(cfg.attack.panel_images, len(ds))
    if n == 0:
        return []
    picks = np.unique(np.linspace(0, len(ds) - 1, n).round().astype(int))
    x, y = _stack(torch.utils.data.Subset(ds, picks.tolist()))
    n = len(picks)
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)
    grid = [[None] * len(eps) for _ in range(n)]
    written = []
    for j, e in enumerate(eps):
        spec = attacks.AttackSpec(epsilon=e, loss_target=cfg.attack.loss_target, clamp=cfg.attack.clamp)
        adv, _, _ = attacks.fgsm_batch(model, x, y, spec)
        for i in range(n):
            px = denormalize(TensorImage(adv[i], model.norm, True)).data.numpy()
            grid[i][j] = px
            path = images_dir / f"img{i:02d}_eps{e:.2f}.png"
            save_image(np.rint(np.transpose(px, (1, 2, 0)) * 255), path)
            written.append(path)
    panel = out / "panel.png"
    plots.adversarial_panel(grid, eps, panel)
    return written + [panel]


def cmd_sweep(cfg: ExperimentConfig):
    start = time.perf_counter()
    manifest = prepare_run(cfg)
    model = _load_model(cfg)
    names = _class_names(cfg) if cfg.task == "classification" else None
    ds = eval_dataset(cfg, load_split(cfg, cfg.detector.test_split, names))
    out = Path(cfg.output_dir) / "sweep"
    out.mkdir(parents=True, exist_ok=True)

    records, bundles = [], []
    rows = attacks.epsilon_sweep(model, ds, cfg.attack.eps_grid, cfg.attack.baseline, cfg.attack.loss_target,
                                 cfg.attack.clamp, workers=cfg.attack.workers, records=records, bundles=bundles)
    for r in records:
        r.path = ds.path(r.index)
    sweep_csv = out / "sweep.csv"
    attacks.write_sweep_csv(rows, sweep_csv)
    pairs = out / "pairs.jsonl"
    attacks.write_pair_records(records, pairs)
    lost = out / "lost_classes.json"
    attacks.write_lost_classes(rows, lost)
    metrics_json = out / "metrics.json"
    metrics_json.write_text(json.dumps([{"epsilon": e, **b.to_dict()} for e, _, b in bundles], indent=2) + "\n")
    artifacts = [sweep_csv, pairs, lost, metrics_json]
    for e, cm, _ in bundles:
        p = out / f"per_class_eps{e:.2f}.csv"
        write_per_class_csv(cm, p)
        artifacts.append(p)
    plot = out / "sweep_plot.png"
    plots.sweep_plot(rows, plot)
    artifacts.append(plot)
    artifacts += _panel(cfg, model, ds, [float(e) for e in cfg.attack.eps_grid], out)
    manifest.record("sweep", artifacts, time.perf_counter() - start)
    return rows


def cmd_detect(cfg: ExperimentConfig):
    start = time.perf_counter()
    if cfg.task != "classification":
        raise ConfigError("detection scores need a single predicted class; set task = \"classification\"")
    manifest = prepare_run(cfg)
    model = _load_model(cfg)
    names = _class_names(cfg)
    out = Path(cfg.output_dir) / "detect"
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.detector

    ref_path = out / "reference_set.bin"
    if ref_path.exists():
        ref = detector.load_reference_set(ref_path)
    else:
        ref_ds = eval_dataset(cfg, load_split(cfg, d.reference_split, names))
        x_ref, y_ref = _stack(ref_ds)
        feats = detector.score_batch(model, x_ref)["features"]
        ref = detector.build_reference_set(feats, y_ref.numpy(), d.reference_cap,
                                           stage_seed(cfg.global_seed, "reference"), d.bandwidth or None)
        detector.save_reference_set(ref, ref_path)

    cal_ds = eval_dataset(cfg, load_split(cfg, d.calibration_split, names))
    if len(cal_ds) < detector.MIN_CALIBRATION:
        raise ValidationError(f"calibration split has {len(cal_ds)} images; need at least {detector.MIN_CALIBRATION}")
    x_cal, _ = _stack(cal_ds)
    cal = detector.score_batch(model, x_cal, ref)
    policies = {m: detector.calibrate_threshold(cal[m], d.target_fpr, m) for m in detector.METRICS}
    policy = policies[d.metric]
    calibration = out / "calibration.json"
    calibration.write_text(json.dumps({"primary_metric": d.metric, "calibration_split": d.calibration_split,
                                       "policies": {m: p.to_dict() for m, p in policies.items()}},
                                      indent=2) + "\n")

    test_ds = eval_dataset(cfg, load_split(cfg, d.test_split, names))
    x, y = _stack(test_ds)
    paths = [test_ds.path(i) for i in range(len(test_ds))]
    clean = detector.score_batch(model, x, ref)
    detections = out / "detections.jsonl"
    summary = {"auroc": {m: {} for m in detector.METRICS},
               "flagged_fraction": {m: {"clean": float(policies[m].flags(clean[m]).mean())}
                                    for m in detector.METRICS}}
    curves, artifacts = {}, [ref_path, calibration, detections]
    with open(detections, "w") as f:
        for r in detector.reports_from_batch(clean, policy, paths):
            f.write(json.dumps({**r.to_dict(), "input": "clean", "epsilon": 0.0}) + "\n")
        for e in d.eps_grid:
            spec = attacks.AttackSpec(epsilon=float(e), loss_target=cfg.attack.loss_target, clamp=cfg.attack.clamp)
            adv, _, _ = attacks.fgsm_batch(model, x, y, spec)
            scored = detector.score_batch(model, adv, ref)
            for r in detector.reports_from_batch(scored, policy, paths):
                f.write(json.dumps({**r.to_dict(), "input": "adversarial", "epsilon": float(e)}) + "\n")
            for m in detector.METRICS:
                result = detector.evaluate_detector(clean[m], scored[m])
                key = f"{float(e):.2f}"
                summary["auroc"][m][key] = result["auroc"]
                summary["flagged_fraction"][m][key] = float(policies[m].flags(scored[m]).mean())
                roc_csv = out / f"roc_{m}_eps{key}.csv"
                detector.write_roc_csv(result["roc_points"], roc_csv)
                artifacts.append(roc_csv)
                if m == d.metric:
                    curves[f"{m} eps={key} (AUROC {result['auroc']:.3f})"] = result["roc_points"]
    auroc_json = out / "auroc.json"
    auroc_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    roc_png = out / "roc.png"
    plots.roc_plot(curves, roc_png)
    artifacts += [auroc_json, roc_png]
    manifest.record("detect", artifacts, time.perf_counter() - start)
    return summary


# verification ----------------------------------------------------------------

@dataclass
class VerifyReport:
    checked: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    def fail(self, msg):
        self.failures.append(msg)


def _check_csv(path, rel, report, cfg):
    name = path.name
    try:
        if name == "sweep.csv":
            rows = attacks.read_sweep_csv(path)
            if not rows or rows[0].epsilon != 0.0:
                report.fail(f"{rel}: first row is not epsilon = 0")
            elif cfg is None or cfg.attack.baseline == "predictions":
                bad = [c for c in attacks.SWEEP_HEADER[1:] if getattr(rows[0], c) != 1.0]
                if bad:
                    report.fail(f"{rel}: epsilon = 0 row is not all ones in {', '.join(bad)}")
        elif name == "epoch_log.csv":
            for r in models.read_epoch_log(path):
                vals = [r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro]
                if any(not 0.0 <= v <= 1.0 for v in vals):
                    report.fail(f"{rel}: epoch {r.epoch} {r.phase} has a metric outside [0, 1]")
        else:
            with open(path, newline="") as f:
                header = next(csv.reader(f), None)
            expected = ROC_HEADER if name.startswith("roc_") else PER_CLASS_HEADER
            if header != expected:
                report.fail(f"{rel}: header {header} != {expected}")
    except (ValidationError, ValueError, TypeError) as exc:
        report.fail(f"{rel}: schema check failed ({exc})")


def cmd_verify(run_dir) -> VerifyReport:
    """Rehash every manifest artifact and revalidate CSV/JSONL schemas."""
    run_dir = Path(run_dir)
    if run_dir.is_file():
        run_dir = run_dir.parent
    report = VerifyReport()
    try:
        manifest = RunManifest.load(run_dir)
    except (OSError, ValueError, KeyError) as exc:
        report.fail(f"{run_dir / MANIFEST}: cannot read manifest ({exc})")
        return report
    cfg = None
    try:
        cfg = load_config(run_dir / CONFIG)
        if cfg.config_hash() != manifest.config_hash:
            report.fail(f"{CONFIG}: content does not match the manifest config hash")
    except ConfigError as exc:
        report.fail(f"{CONFIG}: {exc}")
    if not manifest.stages:
        report.fail(f"{MANIFEST}: no stages recorded")
    for stage, entry in sorted(manifest.stages.items()):
        for rel, digest in sorted(entry.get("artifacts", {}).items()):
            path = run_dir / rel
            report.checked.append(rel)
            if not path.exists():
                report.fail(f"{rel}: missing")
                continue
            if sha256_file(path) != digest:
                report.fail(f"{rel}: content hash mismatch")
            if path.suffix == ".csv":
                _check_csv(path, rel, report, cfg)
            elif path.suffix == ".jsonl":
                with open(path) as f:
                    for n, line in enumerate(f, 1):
                        try:
                            json.loads(line)
                        except ValueError:
                            report.fail(f"{rel}: line {n} is not valid JSON")
                            break
    return report
