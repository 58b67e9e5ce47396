"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 checkpoint incompatibility or corruption.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import analysis, plotting
from .config import RunConfig, dump_run_config, load_run_config
from .data import (DatasetSample, PoseDataset, TemporalConfig, generate_synthetic_scene, load_seven_scenes_style,
                   read_manifest, write_dataset)
from .errors import CheckpointError, ConfigurationError, IngestionError
from .geometry import Trajectory
from .model import PoseNetwork
from .train_eval import evaluate, format_record, load_checkpoint, save_checkpoint, train

log = logging.getLogger("attpose")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_samples(cfg: RunConfig, split: str) -> list[DatasetSample]:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic_scene(d.n_frames, seed=d.scene_seed, texture_mode=d.texture_mode)
    if d.source == "manifest":
        path = d.eval_path if split == "eval" and d.eval_path else d.path
        return read_manifest(path)
    return load_seven_scenes_style(d.path, d.train_split if split == "train" else d.eval_split)


def _overrides(args) -> dict:
    return {
        "out": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "deterministic": getattr(args, "deterministic", None) or None,
        "temporal": getattr(args, "temporal", None) or None,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }


def _resolve(args) -> RunConfig:
    try:
        return load_run_config(args.config, _overrides(args))
    except ConfigurationError as e:
        raise CommandError(f"config error: {e}", EXIT_CONFIG) from None


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise CommandError(f"checkpoint error: {e}", EXIT_CHECKPOINT) from None


def _prepare_out(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.resolved.ini").write_text(dump_run_config(cfg))
    return cfg.out


def run_training(cfg: RunConfig, out: Path, tag: str = ""):
    samples = load_samples(cfg, "train")
    torch.manual_seed(cfg.seed)
    model = PoseNetwork(cfg.encoder)
    with open(out / f"train{tag}.log", "w") as fh:
        ckpt = train(model, samples, cfg.train, cfg.preprocess, log_stream=fh)
    save_checkpoint(ckpt, out / f"checkpoint{tag}.ckpt")
    return ckpt


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    ckpt = run_training(cfg, out)
    print(f"trained {cfg.train.epochs} epoch(s); final loss {format_record(ckpt.log_records[-1]) if ckpt.log_records else 'n/a'}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _write_report(report, out: Path, stem: str = "report"):
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}_errors.tsv").write_text(report.to_tsv())
    (out / f"{stem}_table.txt").write_text(report.table())
    (out / f"{stem}_summary.txt").write_text(report.summary_line() + "\n")


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = _load_ckpt(args.checkpoint)
    samples = load_samples(cfg, "eval")
    report = evaluate(ckpt, samples)
    out = _prepare_out(cfg)
    _write_report(report, out)
    sys.stdout.write(report.table())
    print(f"median: {report.summary_line()}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    ckpt = _load_ckpt(args.checkpoint)
    samples = load_samples(cfg, "eval")
    model = ckpt.build_model()
    out = _prepare_out(cfg)
    ds = PoseDataset(samples, ckpt.preprocess, train=False)
    if args.mode == "saliency":
        idx = args.frame % len(samples)
        img = ds.image(idx)
        sal = analysis.saliency(model, img)
        sal.save_text(out / f"saliency_{idx:06d}.txt")
        plotting.saliency_figure(((img.permute(1, 2, 0).numpy() + 1) / 2), sal.values, out / f"saliency_{idx:06d}.png")
        print(f"saliency map for frame {idx}: {out / f'saliency_{idx:06d}.png'}")
    elif args.mode == "distances":
        frames = torch.stack([ds.image(i) for i in range(len(ds))])
        prof = analysis.feature_distances(model, frames, args.anchor, post_attention=not args.pre_attention)
        lines = [f"{i} {float(d)!r}" for i, d in enumerate(prof.distances)]
        (out / "distances.txt").write_text("\n".join(lines) + "\n")
        plotting.distance_profile_figure(prof.distances, prof.anchor_index, out / "distances.png",
                                         "pre-attention" if args.pre_attention else "post-attention")
        rho = analysis.spearman(prof.distances, analysis.path_distance([s.pose.p for s in samples], prof.anchor_index))
        print(f"feature-distance profile from frame {prof.anchor_index}; spearman vs path distance {rho:.3f}")
    else:
        report = evaluate(ckpt, samples)
        pred = Trajectory(np.asarray(report.frame_indices, dtype=float), report.pred_positions, report.pred_quats)
        gt = Trajectory(np.asarray(report.frame_indices, dtype=float), report.gt_positions, report.gt_quats)
        lines = analysis.trajectory_plot(pred, gt, out / "trajectory.png", plane=args.plane)
        rows = ["frame\tgt_a\tgt_b\tpred_a\tpred_b"]
        for i, g, p in zip(report.frame_indices, lines["ground_truth"], lines["predicted"]):
            rows.append("\t".join([str(i)] + [repr(float(v)) for v in (*g, *p)]))
        (out / "trajectory.tsv").write_text("\n".join(rows) + "\n")
        print(f"trajectory overlay: {out / 'trajectory.png'}")
    return EXIT_OK


ABLATION_VARIANTS = ("basic", "attention", "temporal")


def ablation_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    temporal = cfg.temporal or TemporalConfig()
    out = {}
    for name in ABLATION_VARIANTS:
        enc = replace(cfg.encoder, use_attention=name != "basic")
        t = temporal if name == "temporal" else None
        out[name] = replace(cfg, encoder=enc, temporal=t, train=replace(cfg.train, temporal=t))
    return out


def ablation_table(results: dict) -> str:
    """Table with one row per sequence plus Average; cells are ``median m, median deg``."""
    names = list(results)
    seqs = sorted(next(iter(results.values())).per_sequence())
    rows = [["Sequence"] + names]
    for s in seqs:
        rows.append([s] + [f"{results[n].per_sequence()[s]['median_position_m']:.3f}m, "
                           f"{results[n].per_sequence()[s]['median_rotation_deg']:.2f}" for n in names])
    rows.append(["Average"] + [f"{results[n].median_position:.3f}m, {results[n].median_rotation:.2f}" for n in names])
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    eval_samples = load_samples(cfg, "eval")
    results = {}
    tsv = ["variant\tmedian_position_m\tmedian_rotation_deg\tmean_position_m\tmean_rotation_deg"]
    for name, vcfg in ablation_configs(cfg).items():
        print(f"[ablate] training {name}", flush=True)
        ckpt = run_training(vcfg, out, tag=f"_{name}")
        report = evaluate(ckpt, eval_samples)
        _write_report(report, out, stem=f"report_{name}")
        results[name] = report
        tsv.append(f"{name}\t{report.median_position!r}\t{report.median_rotation!r}\t"
                   f"{report.mean_position!r}\t{report.mean_rotation!r}")
    (out / "ablation.tsv").write_text("\n".join(tsv) + "\n")
    table = ablation_table(results)
    (out / "ablation.txt").write_text(table)
    plotting.ablation_figure(list(results), [r.median_position for r in results.values()],
                             [r.median_rotation for r in results.values()], out / "ablation.png")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    if args.frames < 1:
        raise CommandError("--frames must be >= 1", EXIT_CONFIG)
    samples = generate_synthetic_scene(args.frames, seed=args.seed, texture_mode=args.texture_mode)
    manifest = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} frames; manifest {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attpose", description="Attention-guided camera pose regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=False):
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--out", type=Path, help="output directory (default: [run] out, $ATTPOSE_OUT, ./runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        if training:
            sp.add_argument("--temporal", action="store_true", help="enable the triplet temporal loss")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("train", help="train a model")
    common(sp, training=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="saliency / feature distances / trajectory overlay")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--mode", choices=("saliency", "distances", "trajectory"), required=True)
    sp.add_argument("--frame", type=int, default=0, help="frame for saliency")
    sp.add_argument("--anchor", type=int, default=0, help="anchor frame for distances")
    sp.add_argument("--pre-attention", action="store_true", help="profile encoder features instead of Att(x)")
    sp.add_argument("--plane", choices=("xy", "xz", "yz"), default="xy")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="basic / attention / temporal comparison")
    common(sp, training=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth-data", help="write a synthetic dataset (PNG + pose files + manifest)")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--frames", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--texture-mode", choices=("full", "single_region"), default="full")
    sp.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        print(f"attpose: {e}", file=sys.stderr)
        return e.code
    except ConfigurationError as e:
        print(f"attpose: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"attpose: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (IngestionError, RuntimeError, ValueError, OSError) as e:
        print(f"attpose: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
