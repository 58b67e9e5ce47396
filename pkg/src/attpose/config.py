"""Run configuration: INI-style file with one section per module, plus flag overrides.

Precedence, lowest to highest: built-in defaults, config file,
``ATTPOSE_OUT`` environment variable (output directory only), command-line
flags. The fully resolved configuration is written back out as INI so a run
can be repeated from its echo.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import ColorJitterConfig, PreprocessConfig, TemporalConfig
from .errors import ConfigurationError, PreprocessingError
from .model import EncoderConfig
from .train_eval import TrainConfig

OUT_ENV = "ATTPOSE_OUT"
DATA_SOURCES = ("synthetic", "manifest", "7scenes")


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    eval_path: str = ""  # manifest source: separate evaluation manifest (defaults to path)
    train_split: str = "train"
    eval_split: str = "test"
    n_frames: int = 200
    scene_seed: int = 0
    texture_mode: str = "full"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1))
    temporal: TemporalConfig | None = None
    out: Path = Path("runs")
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        d = self.data
        if d.source not in DATA_SOURCES:
            raise ConfigurationError(f"data.source must be one of {DATA_SOURCES}, got {d.source!r}")
        if d.source != "synthetic":
            if not d.path:
                raise ConfigurationError(f"data.path is required for source {d.source!r}")
            if not Path(d.path).exists():
                raise ConfigurationError(f"dataset path {d.path} does not exist")
            if d.eval_path and not Path(d.eval_path).exists():
                raise ConfigurationError(f"dataset path {d.eval_path} does not exist")
        elif d.n_frames < 1:
            raise ConfigurationError("data.n_frames must be >= 1")
        if self.encoder.input_size != self.preprocess.crop:
            raise ConfigurationError("encoder input size must equal the preprocessing crop")


def _parse(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value.strip()


def _typed(section: dict, defaults: dict) -> dict:
    out = dict(defaults)
    for key, value in section.items():
        if key not in defaults:
            raise ConfigurationError(f"unknown key {key!r}")
        out[key] = _parse(value, defaults[key])
    return out


def _apply(obj, section: dict, skip=()):
    known = {f.name: f for f in fields(obj)}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} for {type(obj).__name__}")
        try:
            setattr(obj, key, _parse(value, getattr(obj, key)))
        except ValueError as e:
            raise ConfigurationError(f"bad value for {key}: {e}") from None
    return obj


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build and validate a RunConfig from an optional INI file and flag overrides.

    Recognized override keys: out, seed, deterministic, temporal, epochs, batch_size.
    """
    cp = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigurationError(f"{path}: {e}") from None
    allowed = {"data", "encoder", "preprocess", "train", "temporal", "run"}
    unknown = set(cp.sections()) - allowed
    if unknown:
        raise ConfigurationError(f"unknown config section(s) {sorted(unknown)}")
    sec = {s: dict(cp[s]) for s in cp.sections()}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    try:
        data = _apply(DataConfig(), sec.get("data", {}))

        enc = _apply(EncoderConfig(), sec.get("encoder", {}))

        pre_sec = dict(sec.get("preprocess", {}))
        jitter_keys = {k: pre_sec.pop(k) for k in list(pre_sec) if k.startswith("jitter_")}
        jitter_on = _parse(pre_sec.pop("jitter", "false"), False)
        pre_kwargs = _typed(pre_sec, {"rescale_short_side": 256, "crop": 256, "crop_mode": "random"})
        jitter = None
        if jitter_on:
            jitter = _apply(ColorJitterConfig(), {k[len("jitter_"):]: v for k, v in jitter_keys.items()})
        pre = PreprocessConfig(**pre_kwargs, jitter=jitter)
        enc.input_size = pre.crop
        enc = EncoderConfig(**{f.name: getattr(enc, f.name) for f in fields(enc)})

        run = sec.get("run", {})
        seed = int(overrides.get("seed", run.get("seed", 0)))
        deterministic = bool(overrides.get("deterministic")) or _parse(run.get("deterministic", "true"), True)
        out = overrides.get("out") or run.get("out") or os.environ.get(OUT_ENV) or "runs"

        tsec = dict(sec.get("temporal", {}))
        temporal_on = _parse(tsec.pop("enabled", "false"), False) or bool(overrides.get("temporal"))
        temporal = _apply(TemporalConfig(), tsec) if temporal_on else None
        if temporal is not None:
            temporal = TemporalConfig(temporal.temporal_alpha, temporal.frame_spacing, temporal.triplet)

        tr_sec = dict(sec.get("train", {}))
        if "epochs" not in tr_sec and "epochs" not in overrides:
            raise ConfigurationError("train.epochs is required")
        tr = TrainConfig(epochs=int(overrides.get("epochs", tr_sec.pop("epochs", 0))))
        tr_sec.pop("epochs", None)
        _apply(tr, tr_sec, skip=("seed", "deterministic", "temporal"))
        if "batch_size" in overrides:
            tr.batch_size = int(overrides["batch_size"])
        tr = TrainConfig(epochs=tr.epochs, learning_rate=tr.learning_rate, batch_size=tr.batch_size,
                         dropout_rate=tr.dropout_rate, beta0=tr.beta0, gamma0=tr.gamma0, seed=seed,
                         temporal=temporal, deterministic=deterministic, adam_betas=tr.adam_betas,
                         weight_decay=tr.weight_decay)
    except (ValueError, PreprocessingError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(str(e)) from None

    cfg = RunConfig(data, enc, pre, tr, temporal, Path(out), seed, deterministic)
    cfg.validate()
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def dump_run_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["data"] = {f.name: _fmt(getattr(cfg.data, f.name)) for f in fields(cfg.data)}
    cp["encoder"] = {f.name: _fmt(getattr(cfg.encoder, f.name)) for f in fields(cfg.encoder) if f.name != "input_size"}
    pre = {"rescale_short_side": _fmt(cfg.preprocess.rescale_short_side), "crop": _fmt(cfg.preprocess.crop),
           "crop_mode": cfg.preprocess.crop_mode, "jitter": _fmt(cfg.preprocess.jitter is not None)}
    if cfg.preprocess.jitter is not None:
        for f in fields(cfg.preprocess.jitter):
            pre[f"jitter_{f.name}"] = _fmt(getattr(cfg.preprocess.jitter, f.name))
    cp["preprocess"] = pre
    cp["train"] = {f.name: _fmt(getattr(cfg.train, f.name)) for f in fields(cfg.train)
                   if f.name not in ("seed", "deterministic", "temporal")}
    t = cfg.temporal
    cp["temporal"] = {"enabled": _fmt(t is not None)}
    if t is not None:
        cp["temporal"].update({f.name: _fmt(getattr(t, f.name)) for f in fields(t)})
    cp["run"] = {"out": str(cfg.out), "seed": str(cfg.seed), "deterministic": _fmt(cfg.deterministic)}
    lines = []

    class _W:
        def write(self, s):
            lines.append(s)

    cp.write(_W())
    return "".join(lines)
