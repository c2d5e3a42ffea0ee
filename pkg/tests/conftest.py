from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from advdetect import cli, models, synthetic
from advdetect.pipeline import AugmentSpec, ImageDataset, NormSpec

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def stack(ds):
    xs, ys = zip(*(ds[i] for i in range(len(ds))))
    return torch.stack(xs), torch.tensor(ys)


@pytest.fixture(scope="session")
def desk():
    """Tiny-cnn trained on synthetic shapes, plus eval-mode splits."""
    k = 4
    aug = AugmentSpec(crop_size=32, resize_size=36, mode="train", rng_seed=11, scale=(0.5, 1.0))
    norm = NormSpec()
    splits = {name: synthetic.generate(n, k, 40, seed=seed, prefix=name)
              for name, n, seed in [("train", 400, 1), ("cal", 400, 2), ("held", 400, 3), ("test", 200, 4)]}
    model = models.ClassifierModel("tiny-cnn", k + 2, 64, input_size=32, norm=norm, seed=0)
    checksum_before = models.backbone_checksum(model)
    cfg = models.TrainConfig(epochs=30, num_classes=k, head_classes=k + 2, rng_seed=0)
    model, rows = models.train_head(model, ImageDataset(splits["train"], aug, norm), cfg)
    ns = SimpleNamespace(model=model, rows=rows, cfg=cfg, aug=aug, norm=norm, k=k,
                         checksum_before=checksum_before, checksum_after=models.backbone_checksum(model))
    for name, imgs in splits.items():
        ds = ImageDataset(imgs, aug.eval(), norm)
        x, y = stack(ds)
        setattr(ns, f"{name}_ds", ds)
        setattr(ns, f"{name}_x", x)
        setattr(ns, f"{name}_y", y)
    return ns


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    synthetic.write_dataset(root, {"train": 120, "val": 60, "test": 60}, num_classes=4, size=40, seed=3)
    return root


def write_config(path, dataset_root, output_dir, **sections):
    lines = [f'dataset_root = "{dataset_root}"', f'output_dir = "{output_dir}"']
    for name, values in sections.items():
        if not isinstance(values, dict):
            lines.insert(0, f"{name} = {values!r}".replace("'", '"'))
            continue
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, str):
                v = f'"{v}"'
            lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def run_pipeline(cfg_path, stages=("train", "sweep", "detect")):
    for stage in stages:
        code = cli.main([stage, "--config", str(cfg_path)])
        assert code == 0, f"{stage} exited with {code}"


@pytest.fixture(scope="session")
def e2e_runs(shapes_root, tmp_path_factory):
    """Two full CLI runs from the same config, in different output directories."""
    base = tmp_path_factory.mktemp("e2e")
    runs = []
    for name in ("run_a", "run_b"):
        cfg = write_config(base / f"{name}.toml", shapes_root / "classification", base / name,
                           train={"epochs": 8})
        run_pipeline(cfg)
        runs.append(base / name)
    return runs


class ToyModel(torch.nn.Module):
    """Minimal stand-in exposing the attributes the attack code relies on."""

    def __init__(self, fn, num_classes=2, norm=None, dense=False):
        super().__init__()
        self.fn = fn
        self.num_classes = num_classes
        self.norm = norm or NormSpec((0.5,), (0.5,))
        self.dense = dense
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        logits = self.fn(x)
        return logits, x.flatten(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
