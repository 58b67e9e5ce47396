"""Dataset ingestion, preprocessing, triplet sampling and the synthetic scene.

Two on-disk layouts are understood:

* 7-Scenes style: ``root/seq-XX/frame-NNNNNN.color.png`` plus
  ``frame-NNNNNN.pose.txt`` (4x4 camera-to-world matrix), with optional
  ``TrainSplit.txt`` / ``TestSplit.txt`` listing ``sequenceN`` lines.
* Manifest: a UTF-8 text file with ``sequence_id frame_index image_relpath
  pose_relpath`` per line. Pose files are either a 4x4 matrix or a single
  ``timestamp tx ty tz qu qvx qvy qvz`` line.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import IngestionError, PreprocessingError
from .geometry import (Pose, Trajectory, quat_from_axis_angle, quat_mul, quat_to_rotmat,
                       read_pose_matrix, read_pose_text, rotmat_to_quat, write_pose_matrix,
                       write_pose_text)

log = logging.getLogger(__name__)


@dataclass
class DatasetSample:
    image: np.ndarray | Path
    pose: Pose
    sequence_id: str
    frame_index: int

    @property
    def pixels(self) -> np.ndarray:
        """HxWx3 uint8 (or float in [0, 1]) pixels, decoding from disk if needed."""
        if isinstance(self.image, np.ndarray):
            return self.image
        return load_image(self.image)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# preprocessing -------------------------------------------------------------

@dataclass
class ColorJitterConfig:
    brightness: float = 0.7
    contrast: float = 0.7
    saturation: float = 0.7
    hue: float = 0.5


@dataclass
class PreprocessConfig:
    rescale_short_side: int = 256
    crop: int = 256
    crop_mode: str = "random"  # used in training; evaluation always center-crops
    jitter: ColorJitterConfig | None = None

    def __post_init__(self):
        if self.crop > self.rescale_short_side:
            raise PreprocessingError(f"crop {self.crop} exceeds rescale_short_side {self.rescale_short_side}")
        if self.crop_mode not in ("random", "center"):
            raise PreprocessingError(f"unknown crop_mode {self.crop_mode!r}")


def rescaled_size(h: int, w: int, short_side: int) -> tuple[int, int]:
    """Aspect-preserving size with the short side at ``short_side``; the long side rounds down."""
    if h <= w:
        return short_side, int(math.floor(w * short_side / h))
    return int(math.floor(h * short_side / w)), short_side


def _to_float_chw(image) -> torch.Tensor:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PreprocessingError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    else:
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t.permute(2, 0, 1).contiguous()


def rescale(image, short_side: int) -> torch.Tensor:
    """Return a 3xHxW float tensor in [0, 1] with the short side at ``short_side``."""
    t = _to_float_chw(image)
    h, w = t.shape[1:]
    size = rescaled_size(h, w, short_side)
    if size != (h, w):
        t = F.interpolate(t[None], size=size, mode="bilinear", align_corners=False, antialias=True)[0]
        t = t.clamp(0.0, 1.0)
    return t


def _jitter(t: torch.Tensor, cfg: ColorJitterConfig, seed: int) -> torch.Tensor:
    from torchvision.transforms import ColorJitter

    jitter = ColorJitter(cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return jitter(t)


def crop_offset(h: int, w: int, crop: int, random: bool, seed: int | None) -> tuple[int, int]:
    if not random:
        return (h - crop) // 2, (w - crop) // 2
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))


def preprocess(image, cfg: PreprocessConfig, rng_seed: int | None = None, train: bool = False) -> torch.Tensor:
    """Rescale, optionally jitter, crop and map intensities to [-1, 1].

    Evaluation (``train=False``) uses a center crop, no jitter, and ignores
    ``rng_seed``. Training output is a deterministic function of ``rng_seed``.
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and min(arr.shape[:2]) < cfg.crop:
        raise PreprocessingError(f"image {arr.shape[1]}x{arr.shape[0]} is smaller than the {cfg.crop}px crop")
    t = rescale(arr, cfg.rescale_short_side)
    if train and cfg.jitter is not None:
        t = _jitter(t, cfg.jitter, 0 if rng_seed is None else rng_seed)
    h, w = t.shape[1:]
    top, left = crop_offset(h, w, cfg.crop, train and cfg.crop_mode == "random", rng_seed)
    t = t[:, top:top + cfg.crop, left:left + cfg.crop]
    return (t * 2.0 - 1.0).clamp(-1.0, 1.0).contiguous()


# triplets ------------------------------------------------------------------

@dataclass
class TemporalConfig:
    temporal_alpha: float = 1.0
    frame_spacing: int = 10
    triplet: bool = True

    def __post_init__(self):
        if self.temporal_alpha < 0:
            raise ValueError("temporal_alpha must be >= 0")
        if self.frame_spacing < 1:
            raise ValueError("frame_spacing must be >= 1")

    @property
    def tuple_size(self) -> int:
        return 3 if self.triplet else 2


def sample_triplets(sequence, cfg: TemporalConfig) -> list[tuple[int, ...]]:
    """Index tuples ``(i, i+s, i+2s)`` (pairs ``(i, i+s)`` when ``cfg.triplet`` is off).

    ``sequence`` is an ordered sample list or simply its length.
    """
    n = sequence if isinstance(sequence, int) else len(sequence)
    s = cfg.frame_spacing
    k = cfg.tuple_size
    span = (k - 1) * s
    if n < span + 1:
        log.warning("sequence of length %d too short for spacing %d; no tuples", n, s)
        return []
    return [tuple(i + j * s for j in range(k)) for i in range(n - span)]


def dataset_triplets(samples: Sequence[DatasetSample], cfg: TemporalConfig) -> list[tuple[int, ...]]:
    """Tuples of global indices, never crossing a sequence boundary."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.sequence_id, []).append(i)
    out = []
    for seq in sorted(groups):
        idx = sorted(groups[seq], key=lambda i: samples[i].frame_index)
        out.extend(tuple(idx[j] for j in t) for t in sample_triplets(len(idx), cfg))
    return out


# ingestion -----------------------------------------------------------------

_SPLIT_FILES = {"train": "TrainSplit.txt", "test": "TestSplit.txt"}
_FRAME_RE = re.compile(r"frame-(\d+)\.color\.png$")


def _split_sequences(root: Path, split: str) -> list[Path]:
    if split not in ("train", "test", "all"):
        raise ValueError(f"unknown split {split!r}")
    seqs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("seq-"))
    split_file = root / _SPLIT_FILES.get(split, "")
    if split == "all" or not split_file.is_file():
        return seqs
    wanted = []
    for line in split_file.read_text().split():
        m = re.search(r"(\d+)$", line)
        if m:
            wanted.append(root / f"seq-{int(m.group(1)):02d}")
    missing = [p for p in wanted if not p.is_dir()]
    if missing:
        raise IngestionError(f"split {split_file.name} names missing sequence folder {missing[0]}")
    return wanted


def load_seven_scenes_style(root, split: str = "train", lazy: bool = True) -> list[DatasetSample]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    samples = []
    for seq_dir in _split_sequences(root, split):
        frames = []
        for img in seq_dir.iterdir():
            m = _FRAME_RE.search(img.name)
            if m:
                frames.append((int(m.group(1)), img))
        for idx, img in sorted(frames):
            pose_file = img.with_name(img.name.replace(".color.png", ".pose.txt"))
            if not pose_file.is_file():
                raise IngestionError(f"no pose file for frame {img}")
            pose = read_pose_matrix(pose_file)
            samples.append(DatasetSample(img if lazy else load_image(img), pose, seq_dir.name, idx))
    return samples


def _read_pose_file(path: Path) -> Pose:
    n = len(path.read_text().split())
    if n == 16:
        return read_pose_matrix(path)
    if n == 8:
        return read_pose_text(path).poses()[0]
    raise IngestionError(f"{path}: unrecognized pose file ({n} numbers)")


def read_manifest(path, lazy: bool = True) -> list[DatasetSample]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    base = path.parent
    samples = []
    seen: set[tuple[str, int]] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise IngestionError(f"{path}:{lineno}: expected 4 fields")
        seq, idx, img_rel, pose_rel = fields
        idx = int(idx)
        if idx < 0 or (seq, idx) in seen:
            raise IngestionError(f"{path}:{lineno}: frame index {idx} invalid or repeated in {seq}")
        seen.add((seq, idx))
        img, pose_file = base / img_rel, base / pose_rel
        if not img.is_file():
            raise IngestionError(f"{path}:{lineno}: missing image {img}")
        if not pose_file.is_file():
            raise IngestionError(f"no pose file for frame {img}")
        samples.append(DatasetSample(img if lazy else load_image(img), _read_pose_file(pose_file), seq, idx))
    samples.sort(key=lambda s: (s.sequence_id, s.frame_index))
    return samples


def write_dataset(samples: Sequence[DatasetSample], root) -> Path:
    """Write PNG frames, 4x4 pose files, ``manifest.txt`` and ``poses.txt``; return the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        seq_dir = root / s.sequence_id
        seq_dir.mkdir(exist_ok=True)
        img_rel = f"{s.sequence_id}/frame-{s.frame_index:06d}.color.png"
        pose_rel = f"{s.sequence_id}/frame-{s.frame_index:06d}.pose.txt"
        Image.fromarray(np.asarray(s.pixels, dtype=np.uint8)).save(root / img_rel)
        write_pose_matrix(root / pose_rel, s.pose)
        lines.append(f"{s.sequence_id} {s.frame_index} {img_rel} {pose_rel}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    traj = Trajectory.from_poses([s.pose for s in samples], [s.frame_index for s in samples])
    write_pose_text(root / "poses.txt", traj)
    return manifest


# synthetic scene -----------------------------------------------------------

@dataclass
class SyntheticScene:
    """A textured box room viewed by a pinhole camera moving along an open path."""

    seed: int = 0
    image_size: tuple[int, int] = (64, 85)  # (H, W)
    fov_deg: float = 70.0
    box_lo: tuple[float, float, float] = (-2.5, -2.5, -1.5)
    box_hi: tuple[float, float, float] = (2.5, 2.5, 1.5)
    texture_mode: str = "full"  # "full" or "single_region"
    texture_res: int = 24
    textures: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.texture_mode not in ("full", "single_region"):
            raise ValueError(f"unknown texture_mode {self.texture_mode!r}")
        if self.textures is None:
            self.textures = _make_textures(self.seed, self.texture_res, self.texture_mode)

    def path_pose(self, t: float) -> Pose:
        """Camera pose at path parameter t in [0, 1].

        The camera slides 2.4 m along x while bowing in y, bobbing in z and
        sweeping its heading across the +y wall.
        """
        x = -1.2 + 2.4 * t
        y = -0.6 + 0.5 * math.sin(math.pi * t)
        z = 0.15 * math.sin(2 * math.pi * t)
        yaw = math.pi / 2 + 0.9 - 1.8 * t
        pitch = 0.15 * math.sin(3 * math.pi * t)
        roll = 0.1 * math.sin(2 * math.pi * t)
        # camera axes: x right, y down, z forward; level camera facing +x at yaw 0
        base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        q_base = rotmat_to_quat(base)
        q_yaw = quat_from_axis_angle([0, 0, 1], yaw)
        q_pitch = quat_from_axis_angle([1, 0, 0], pitch)  # about camera x (right)
        q_roll = quat_from_axis_angle([0, 0, 1], roll)  # about camera z (forward)
        q = quat_mul(q_yaw, quat_mul(q_base, quat_mul(q_pitch, q_roll)))
        return Pose([x, y, z], q / np.linalg.norm(q))

    def ray_directions(self) -> np.ndarray:
        h, w = self.image_size
        f = 0.5 * w / math.tan(math.radians(self.fov_deg) / 2)
        xs = (np.arange(w) + 0.5 - w / 2) / f
        ys = (np.arange(h) + 0.5 - h / 2) / f
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y, np.ones_like(X)], axis=-1)

    def render(self, pose: Pose, return_mask: bool = False):
        """Ray-cast the box; returns HxWx3 uint8 (and the textured-region mask if asked)."""
        R = quat_to_rotmat(pose.q)
        d = self.ray_directions() @ R.T
        o = pose.p
        lo, hi = np.asarray(self.box_lo), np.asarray(self.box_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(d > 0, hi, lo)
            t_axis = (bound - o) / d
        t_axis = np.where(d == 0, np.inf, t_axis)
        axis = np.argmin(t_axis, axis=-1)
        t_hit = np.take_along_axis(t_axis, axis[..., None], -1)[..., 0]
        hit = o + d * t_hit[..., None]
        positive = np.take_along_axis(d, axis[..., None], -1)[..., 0] > 0
        wall = axis * 2 + positive  # 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
        uv = (hit - lo) / (hi - lo)
        img = np.zeros(self.image_size + (3,))
        mask = np.zeros(self.image_size, dtype=bool)
        for wi in range(6):
            sel = wall == wi
            if not sel.any():
                continue
            a = wi // 2
            others = [k for k in range(3) if k != a]
            u, v = uv[sel][:, others[0]], uv[sel][:, others[1]]
            tex, region = self.textures[wi]
            img[sel] = _bilinear(tex, u, v)
            if region is not None:
                u0, v0, u1, v1 = region
                mask[sel] = (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
        out = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        return (out, mask) if return_mask else out

    def path_extent(self, n_frames: int) -> float:
        """Diagonal of the bounding box of the sampled path positions (meters)."""
        pts = np.stack([self.path_pose(t).p for t in _path_params(n_frames)])
        return float(np.linalg.norm(pts.max(0) - pts.min(0)))


def _bilinear(tex: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    n = tex.shape[0]
    x = np.clip(u, 0, 1) * (n - 1)
    y = np.clip(v, 0, 1) * (n - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, n - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, n - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return (tex[x0, y0] * (1 - fx) * (1 - fy) + tex[x0 + 1, y0] * fx * (1 - fy)
            + tex[x0, y0 + 1] * (1 - fx) * fy + tex[x0 + 1, y0 + 1] * fx * fy)


def _make_textures(seed: int, res: int, mode: str):
    rng = np.random.default_rng(seed)
    textures = []
    for wi in range(6):
        if mode == "single_region" and wi != 3:
            textures.append((np.full((res, res, 3), 0.5), None))
            continue
        coarse = rng.random((6, 6, 3))
        idx = np.linspace(0, 5, res)
        i0 = np.clip(np.floor(idx).astype(int), 0, 4)
        f = (idx - i0)[:, None, None]
        rows = coarse[i0] * (1 - f) + coarse[i0 + 1] * f
        f2 = (idx - i0)[None, :, None]
        tex = rows[:, i0] * (1 - f2) + rows[:, i0 + 1] * f2
        for _ in range(10):
            x0, y0 = rng.integers(0, res - 3, 2)
            w, h = rng.integers(2, res // 3, 2)
            tex[x0:x0 + w, y0:y0 + h] = rng.random(3)
        tex = np.clip(0.15 + 0.7 * tex, 0, 1)
        region = None
        if mode == "single_region":
            # textured patch in the middle of the +y wall; the rest stays flat gray
            flat = np.full((res, res, 3), 0.5)
            lo, hi = res // 4, res - res // 4
            flat[lo:hi, lo:hi] = tex[lo:hi, lo:hi]
            tex = flat
            region = ((lo - 0.5) / (res - 1), (lo - 0.5) / (res - 1), (hi - 0.5) / (res - 1), (hi - 0.5) / (res - 1))
        textures.append((tex, region))
    return textures


def _path_params(n_frames: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)


def generate_synthetic_scene(n_frames: int, seed: int = 0, **scene_kwargs) -> list[DatasetSample]:
    """Render ``n_frames`` views along the scene path, each paired with its exact pose."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    scene = SyntheticScene(seed=seed, **scene_kwargs)
    samples = []
    for i, t in enumerate(_path_params(n_frames)):
        pose = scene.path_pose(float(t))
        samples.append(DatasetSample(scene.render(pose), pose, "synth", i))
    return samples


# torch dataset -------------------------------------------------------------

class PoseDataset(torch.utils.data.Dataset):
    """Preprocessed images with ``(p, logq)`` targets.

    Training crops are seeded by ``(seed, epoch, index)`` so that a given epoch
    sees the same inputs regardless of shuffling or resumption.
    """

    def __init__(self, samples: Sequence[DatasetSample], cfg: PreprocessConfig, train: bool = False, seed: int = 0):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = list(samples)
        self.cfg = cfg
        self.train = train
        self.seed = seed
        self.epoch = 0
        self._cache: dict[int, torch.Tensor] = {}
        self.positions = torch.tensor(np.stack([s.pose.p for s in self.samples]), dtype=torch.float32)
        self.logqs = torch.tensor(np.stack([s.pose.logq for s in self.samples]), dtype=torch.float32)

    def __len__(self):
        return len(self.samples)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def image(self, i: int) -> torch.Tensor:
        if not self.train:
            if i not in self._cache:
                self._cache[i] = preprocess(self.samples[i].pixels, self.cfg)
            return self._cache[i]
        seed = int(np.random.SeedSequence([self.seed, self.epoch, i]).generate_state(1)[0])
        return preprocess(self.samples[i].pixels, self.cfg, rng_seed=seed, train=True)

    def __getitem__(self, i):
        return self.image(i), self.positions[i], self.logqs[i]
