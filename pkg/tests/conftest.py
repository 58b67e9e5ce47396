import time
from pathlib import Path

import pytest

from attpose.cli import load_samples, run_training
from attpose.config import load_run_config

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"

SMALL_CFG = """\
[data]
source = synthetic
n_frames = 24
scene_seed = 1

[encoder]
backbone = tiny-residual
feature_dim = 32
attention_ratio = 4
dropout_rate = 0.0
width = 8

[preprocess]
rescale_short_side = 40
crop = 32

[train]
epochs = 2
learning_rate = 0.001
batch_size = 8
dropout_rate = 0.0

[temporal]
frame_spacing = 5
"""


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The desk-profile model trained once on the 200-frame synthetic scene."""
    cfg = load_run_config(TOY_CFG, {"out": str(tmp_path_factory.mktemp("toy"))})
    cfg.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt = run_training(cfg, cfg.out)
    seconds = time.perf_counter() - t0
    return {"cfg": cfg, "ckpt": ckpt, "seconds": seconds, "samples": load_samples(cfg, "eval"),
            "ckpt_path": cfg.out / "checkpoint.ckpt"}


@pytest.fixture
def small_cfg_path(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return path


@pytest.fixture(scope="session")
def single_region_run(tmp_path_factory):
    """Desk-profile model trained on the scene whose only texture is one patch on one wall."""
    cfg = load_run_config(TOY_CFG, {"out": str(tmp_path_factory.mktemp("single_region"))})
    cfg.data.texture_mode = "single_region"
    cfg.out.mkdir(parents=True, exist_ok=True)
    ckpt = run_training(cfg, cfg.out)
    return {"cfg": cfg, "ckpt": ckpt, "samples": load_samples(cfg, "eval")}
