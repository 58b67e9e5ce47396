"""Training loop, checkpoints and evaluation reports."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .data import (ColorJitterConfig, DatasetSample, PoseDataset, PreprocessConfig, TemporalConfig,
                   dataset_triplets)
from .errors import CheckpointCorruptError, CheckpointVersionError, NonFiniteLossError
from .geometry import position_error, rotation_error
from .loss import BETA0, GAMMA0, LossState, batch_loss, batch_temporal_loss
from .model import EncoderConfig, PoseNetwork

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = b"attpose-checkpoint-version: "


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 5e-5
    batch_size: int = 64
    dropout_rate: float = 0.5
    beta0: float = BETA0
    gamma0: float = GAMMA0
    seed: int = 0
    temporal: TemporalConfig | None = None
    deterministic: bool = True
    # Adam moments and weight decay are not given for the method; torch defaults are recorded here
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if isinstance(self.temporal, dict):
            self.temporal = TemporalConfig(**self.temporal)
        self.adam_betas = tuple(self.adam_betas)


# checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    model_state: dict
    beta: float
    gamma: float
    encoder: EncoderConfig
    preprocess: PreprocessConfig
    train: TrainConfig
    epoch: int = 0  # completed epochs
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    log_records: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train.seed

    def build_model(self) -> PoseNetwork:
        model = PoseNetwork(self.encoder)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _preprocess_to_dict(cfg: PreprocessConfig) -> dict:
    return asdict(cfg)


def _preprocess_from_dict(d: dict) -> PreprocessConfig:
    d = dict(d)
    if d.get("jitter") is not None:
        d["jitter"] = ColorJitterConfig(**d["jitter"])
    return PreprocessConfig(**d)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a single-file checkpoint: version line, checksum line, torch payload."""
    payload = {
        "model_state": ckpt.model_state,
        "beta": ckpt.beta,
        "gamma": ckpt.gamma,
        "encoder": asdict(ckpt.encoder),
        "preprocess": _preprocess_to_dict(ckpt.preprocess),
        "train": asdict(ckpt.train),
        "epoch": ckpt.epoch,
        "optimizer_state": ckpt.optimizer_state,
        "rng_state": ckpt.rng_state,
        "log_records": [list(r) for r in ckpt.log_records],
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = _MAGIC + f"{CHECKPOINT_VERSION}\n".encode() + f"sha256 {hashlib.sha256(body).hexdigest()} {len(body)}\n".encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointCorruptError(f"{path}: cannot read checkpoint ({e})") from None
    if not raw.startswith(_MAGIC):
        raise CheckpointCorruptError(f"{path}: not a checkpoint file (missing version header)")
    first_nl = raw.find(b"\n")
    second_nl = raw.find(b"\n", first_nl + 1)
    try:
        version = int(raw[len(_MAGIC):first_nl])
    except ValueError:
        raise CheckpointCorruptError(f"{path}: malformed version field") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        _, digest, length = raw[first_nl + 1:second_nl].decode().split()
        length = int(length)
    except (ValueError, UnicodeDecodeError):
        raise CheckpointCorruptError(f"{path}: malformed checksum line") from None
    body = raw[second_nl + 1:]
    if len(body) != length or hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointCorruptError(f"{path}: truncated or corrupted checkpoint body")
    d = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    return Checkpoint(
        model_state=d["model_state"],
        beta=d["beta"],
        gamma=d["gamma"],
        encoder=EncoderConfig(**d["encoder"]),
        preprocess=_preprocess_from_dict(d["preprocess"]),
        train=TrainConfig(**d["train"]),
        epoch=d["epoch"],
        optimizer_state=d["optimizer_state"],
        rng_state=d["rng_state"],
        log_records=[tuple(r) for r in d["log_records"]],
    )


# training ------------------------------------------------------------------

def format_record(rec) -> str:
    epoch, step, *vals = rec
    return " ".join([str(epoch), str(step)] + [repr(float(v)) for v in vals])


def _seed_everything(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model: PoseNetwork, samples: Sequence[DatasetSample], cfg: TrainConfig,
          preprocess_cfg: PreprocessConfig, log_stream: IO[str] | None = None,
          resume: Checkpoint | None = None) -> Checkpoint:
    """Minibatch Adam over the network and the loss weights beta, gamma.

    Writes one ``epoch step loss beta gamma`` record per optimizer step to
    ``log_stream`` (temporal mode appends the pairwise-term value). With a
    ``resume`` checkpoint, training continues from its last completed epoch
    and reproduces the uninterrupted run.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    _seed_everything(cfg.seed, cfg.deterministic)
    state = LossState(cfg.beta0, cfg.gamma0)
    model.regressor.dropout.p = cfg.dropout_rate
    params = list(model.parameters()) + list(state.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)
    records: list = []
    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        with torch.no_grad():
            state.beta.fill_(resume.beta)
            state.gamma.fill_(resume.gamma)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        records = list(resume.log_records)
        start_epoch = resume.epoch

    ds = PoseDataset(samples, preprocess_cfg, train=True, seed=cfg.seed)
    temporal = cfg.temporal
    if temporal is not None:
        units = dataset_triplets(samples, temporal)
        if not units:
            raise ValueError("temporal training requested but no tuples fit in the dataset")
        per_batch = max(1, cfg.batch_size // temporal.tuple_size)
    else:
        units = list(range(len(samples)))
        per_batch = cfg.batch_size

    if log_stream is not None and not records:
        cols = "epoch step loss beta gamma" + (" pairwise" if temporal is not None else "")
        log_stream.write(f"# {cols}\n")
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        ds.set_epoch(epoch)
        order = _epoch_order(len(units), cfg.seed, epoch)
        epoch_losses = []
        for step, k in enumerate(range(0, len(order), per_batch)):
            chosen = [units[i] for i in order[k:k + per_batch]]
            if temporal is not None:
                flat = [i for t in chosen for i in t]
                K = temporal.tuple_size
                imgs = torch.stack([ds.image(i) for i in flat])
                out = model(imgs)
                shape = (len(chosen), K, 3)
                loss, pair = batch_temporal_loss(out.p.view(shape), out.logq.view(shape),
                                                 ds.positions[flat].view(shape), ds.logqs[flat].view(shape),
                                                 state, temporal.temporal_alpha)
            else:
                imgs = torch.stack([ds.image(i) for i in chosen])
                out = model(imgs)
                loss = batch_loss(out.p, out.logq, ds.positions[chosen], ds.logqs[chosen], state)
                pair = None
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step} (samples {chosen})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = (epoch, step, loss.item(), state.beta.item(), state.gamma.item())
            if pair is not None:
                rec = rec + (pair.item(),)
            records.append(rec)
            epoch_losses.append(rec[2])
            if log_stream is not None:
                log_stream.write(format_record(rec) + "\n")
        if log_stream is not None:
            log_stream.flush()
        log.info("epoch %d mean loss %.6f beta %.4f gamma %.4f", epoch, float(np.mean(epoch_losses)),
                 state.beta.item(), state.gamma.item())
    model.eval()
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        beta=state.beta.item(),
        gamma=state.gamma.item(),
        encoder=model.cfg,
        preprocess=preprocess_cfg,
        train=cfg,
        epoch=max(cfg.epochs, start_epoch),
        optimizer_state=opt.state_dict(),
        rng_state=torch.get_rng_state(),
        log_records=records,
    )


# evaluation ----------------------------------------------------------------

@dataclass
class MetricsReport:
    sequence_ids: list[str]
    frame_indices: list[int]
    position_errors: np.ndarray  # meters
    rotation_errors: np.ndarray  # degrees
    pred_positions: np.ndarray
    pred_quats: np.ndarray
    gt_positions: np.ndarray
    gt_quats: np.ndarray

    @property
    def median_position(self) -> float:
        return float(np.median(self.position_errors))

    @property
    def median_rotation(self) -> float:
        return float(np.median(self.rotation_errors))

    @property
    def mean_position(self) -> float:
        return float(np.mean(self.position_errors))

    @property
    def mean_rotation(self) -> float:
        return float(np.mean(self.rotation_errors))

    def per_sequence(self) -> dict[str, dict[str, float]]:
        out = {}
        seqs = np.asarray(self.sequence_ids)
        for s in sorted(set(self.sequence_ids)):
            m = seqs == s
            pe, re = self.position_errors[m], self.rotation_errors[m]
            out[s] = {"median_position_m": float(np.median(pe)), "median_rotation_deg": float(np.median(re)),
                      "mean_position_m": float(np.mean(pe)), "mean_rotation_deg": float(np.mean(re)),
                      "frames": int(m.sum())}
        return out

    def summary_line(self) -> str:
        return f"{self.median_position:.2f}m, {self.median_rotation:.2f}\N{DEGREE SIGN}"

    def to_dict(self) -> dict:
        return {
            "median_position_m": self.median_position,
            "median_rotation_deg": self.median_rotation,
            "mean_position_m": self.mean_position,
            "mean_rotation_deg": self.mean_rotation,
            "frames": len(self.frame_indices),
            "per_sequence": self.per_sequence(),
            "sequence_ids": list(self.sequence_ids),
            "frame_indices": [int(i) for i in self.frame_indices],
            "position_errors": self.position_errors.tolist(),
            "rotation_errors": self.rotation_errors.tolist(),
            "pred_positions": self.pred_positions.tolist(),
            "pred_quats": self.pred_quats.tolist(),
            "gt_positions": self.gt_positions.tolist(),
            "gt_quats": self.gt_quats.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["sequence_ids"], d["frame_indices"], np.asarray(d["position_errors"]),
                   np.asarray(d["rotation_errors"]), np.asarray(d["pred_positions"]).reshape(-1, 3),
                   np.asarray(d["pred_quats"]).reshape(-1, 4), np.asarray(d["gt_positions"]).reshape(-1, 3),
                   np.asarray(d["gt_quats"]).reshape(-1, 4))

    def to_tsv(self) -> str:
        lines = ["sequence_id\tframe_index\tposition_error_m\trotation_error_deg"]
        for s, i, pe, re in zip(self.sequence_ids, self.frame_indices, self.position_errors, self.rotation_errors):
            lines.append(f"{s}\t{i}\t{float(pe)!r}\t{float(re)!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Compact per-sequence table in ``median m, median deg`` cells."""
        rows = [("Sequence", "Median", "Mean")]
        for s, v in self.per_sequence().items():
            rows.append((s, f"{v['median_position_m']:.2f}m, {v['median_rotation_deg']:.2f}\N{DEGREE SIGN}",
                         f"{v['mean_position_m']:.2f}m, {v['mean_rotation_deg']:.2f}\N{DEGREE SIGN}"))
        rows.append(("Average", self.summary_line(),
                     f"{self.mean_position:.2f}m, {self.mean_rotation:.2f}\N{DEGREE SIGN}"))
        widths = [max(len(r[k]) for r in rows) for k in range(3)]
        return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def report_from_predictions(samples: Sequence[DatasetSample], pred_p: np.ndarray, pred_q: np.ndarray) -> MetricsReport:
    gt_p = np.stack([s.pose.p for s in samples])
    gt_q = np.stack([s.pose.q for s in samples])
    pe = np.array([position_error(a, b) for a, b in zip(pred_p, gt_p)])
    re = np.array([rotation_error(a, b) for a, b in zip(pred_q, gt_q)])
    return MetricsReport([s.sequence_id for s in samples], [s.frame_index for s in samples], pe, re,
                         np.asarray(pred_p, dtype=np.float64), np.asarray(pred_q, dtype=np.float64), gt_p, gt_q)


@torch.no_grad()
def predict(model: PoseNetwork, samples: Sequence[DatasetSample], preprocess_cfg: PreprocessConfig,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    was_training = model.training
    model.eval()
    ds = PoseDataset(samples, preprocess_cfg, train=False)
    ps, qs = [], []
    for k in range(0, len(ds), batch_size):
        imgs = torch.stack([ds.image(i) for i in range(k, min(k + batch_size, len(ds)))])
        out = model(imgs)
        ps.append(out.p.double().numpy())
        qs.append(out.q.double().numpy())
    model.train(was_training)
    return np.concatenate(ps), np.concatenate(qs)


def evaluate(model_or_checkpoint, samples: Sequence[DatasetSample], preprocess_cfg: PreprocessConfig | None = None,
             batch_size: int = 64) -> MetricsReport:
    """Center-crop, dropout-off evaluation with per-frame position (m) and rotation (deg) errors."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(model_or_checkpoint, (str, Path)):
        model_or_checkpoint = load_checkpoint(model_or_checkpoint)
    if isinstance(model_or_checkpoint, Checkpoint):
        model = model_or_checkpoint.build_model()
        preprocess_cfg = preprocess_cfg or model_or_checkpoint.preprocess
    else:
        model = model_or_checkpoint
    if preprocess_cfg is None:
        raise ValueError("preprocess_cfg is required when evaluating a bare model")
    pred_p, pred_q = predict(model, samples, preprocess_cfg, batch_size)
    return report_from_predictions(samples, pred_p, pred_q)


def path_extent(positions) -> float:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(pts.max(0) - pts.min(0))) if len(pts) else math.nan
