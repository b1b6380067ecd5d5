"""Command line entry points.

Every command takes --seed and is end-to-end deterministic given it.
Options can come from a JSON config file (--config); explicit flags win.
PRISM_THREADS caps torch worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import torch

from . import bvh, checkpoint, data_synth, eval_metrics, streaming
from .errors import PrismError
from .flow_dit import (
    DitConfig,
    DitTrainConfig,
    compute_dataset_stats,
    generate_motion,
    train_dit,
)
from .motion_repr import MotionGrid, load_clip, save_clip
from .motion_vae import VaeConfig, VaeLossWeights, VaeTrainConfig, train_vae
from .streaming import PromptScript, SelfForcingConfig, measure_drift, self_forcing_step


def _write_history_csv(path, history: list[dict]) -> None:
    if not history:
        return
    keys = list(history[0])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    config = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            config = json.load(f)
    for key, default in parser_defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, default))
    return args


def cmd_data_gen(args) -> int:
    args = _apply_config(args, {"clips_per_family": 400, "frames": 64, "seed": 0})
    cfg = data_synth.DatasetConfig(
        clips_per_family=int(args.clips_per_family),
        frames=int(args.frames),
        seed=int(args.seed),
    )
    dataset = data_synth.build_dataset(cfg)
    manifest = data_synth.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.clips)} clips, manifest {manifest}")
    return 0


def cmd_train_vae(args) -> int:
    defaults = {
        "steps": 200, "batch_size": 8, "batch_frames": 64, "lr": 1e-4, "seed": 0,
        "latent_dim": 16, "kl_weight": 1e-4,
    }
    args = _apply_config(args, defaults)
    dataset = data_synth.load_dataset(args.data)
    clips = [g for g, _ in dataset.subset("train")]
    cfg = VaeConfig(
        token_count=dataset.skeleton.token_count, latent_dim=int(args.latent_dim)
    )
    train_cfg = VaeTrainConfig(
        steps=int(args.steps),
        batch_size=int(args.batch_size),
        batch_frames=int(args.batch_frames),
        lr=float(args.lr),
        weights=VaeLossWeights(kl=float(args.kl_weight)),
    )
    model, history = train_vae(
        clips, dataset.skeleton, cfg, train_cfg, seed=int(args.seed),
        log=lambda e: print(" ".join(f"{k}={v}" for k, v in e.items())),
    )
    stats = compute_dataset_stats(model, clips)
    checkpoint.save_vae(args.out, model, stats)
    _write_history_csv(Path(args.out).with_suffix(".csv"), history)
    print(f"saved {args.out}")
    return 0


def cmd_train_dit(args) -> int:
    defaults = {
        "steps": 400, "batch_size": 8, "batch_frames": 64, "lr": 1e-4, "seed": 0,
        "width": 256, "heads": 4, "blocks": 4,
    }
    args = _apply_config(args, defaults)
    dataset = data_synth.load_dataset(args.data)
    vae, stats = checkpoint.load_vae(args.vae)
    if stats is None:
        stats = compute_dataset_stats(vae, [g for g, _ in dataset.subset("train")])
    cfg = DitConfig(
        token_count=vae.cfg.token_count,
        latent_dim=vae.cfg.latent_dim,
        width=int(args.width),
        heads=int(args.heads),
        blocks=int(args.blocks),
    )
    train_cfg = DitTrainConfig(
        steps=int(args.steps),
        batch_size=int(args.batch_size),
        batch_frames=int(args.batch_frames),
        lr=float(args.lr),
    )
    model, history = train_dit(
        vae, dataset.subset("train"), stats, cfg, train_cfg, seed=int(args.seed),
        log=lambda e: print(" ".join(f"{k}={v}" for k, v in e.items())),
    )
    checkpoint.save_dit(args.out, model, stats)
    _write_history_csv(Path(args.out).with_suffix(".csv"), history)
    print(f"saved {args.out}")
    return 0


def cmd_train_self_forcing(args) -> int:
    defaults = {
        "steps": 100, "batch_size": 4, "overlap": 8, "rollout_steps": 4,
        "lr": 1e-4, "seed": 0,
    }
    args = _apply_config(args, defaults)
    dataset = data_synth.load_dataset(args.data)
    vae, _ = checkpoint.load_vae(args.vae)
    model, stats = checkpoint.load_dit(args.dit)
    model.train()
    cfg = SelfForcingConfig(
        overlap=int(args.overlap),
        rollout_steps=int(args.rollout_steps),
        lr=float(args.lr),
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = torch.Generator().manual_seed(int(args.seed))
    train = dataset.subset("train")
    history = []
    for step in range(int(args.steps)):
        idx = torch.randint(len(train), (int(args.batch_size),), generator=rng)
        batch = [train[i] for i in idx]
        loss = self_forcing_step(vae, model, stats, batch, opt, cfg, rng)
        if step % 10 == 0 or step == int(args.steps) - 1:
            history.append({"step": step, "loss": loss})
            print(f"step={step} loss={loss}")
    checkpoint.save_dit(args.out, model, stats)
    _write_history_csv(Path(args.out).with_suffix(".csv"), history)
    print(f"saved {args.out}")
    return 0


def cmd_generate(args) -> int:
    defaults = {"frames": 120, "cfg_scale": 5.0, "steps": 50, "seed": 0}
    args = _apply_config(args, defaults)
    vae, _ = checkpoint.load_vae(args.vae)
    model, stats = checkpoint.load_dit(args.dit)
    cond = None
    if args.cond_file:
        cond_grid, _ = load_clip(args.cond_file)
        k = int(args.cond_frames) if args.cond_frames else cond_grid.frames
        cond = MotionGrid(cond_grid.data[:k], cond_grid.fps)
    generator = torch.Generator().manual_seed(int(args.seed))
    grid = generate_motion(
        vae, model, stats, args.text, int(args.frames),
        cond=cond, cfg_scale=float(args.cfg_scale), steps=int(args.steps),
        generator=generator,
    )
    skeleton = data_synth.default_skeleton()
    save_clip(args.out, grid, args.text, skeleton)
    if args.format == "bvh":
        bvh.export_bvh(Path(args.out).with_suffix(".bvh"), grid, skeleton)
    print(f"wrote {args.out}")
    return 0


def cmd_stream(args) -> int:
    defaults = {"overlap": 8, "cfg_scale": 5.0, "steps": 50, "seed": 0}
    args = _apply_config(args, defaults)
    vae, _ = checkpoint.load_vae(args.vae)
    model, stats = checkpoint.load_dit(args.dit)
    script = PromptScript.load(args.script)
    generator = torch.Generator().manual_seed(int(args.seed))
    grid, boundaries = streaming.stream_generate(
        vae, model, stats, script,
        overlap=int(args.overlap), cfg_scale=float(args.cfg_scale),
        steps=int(args.steps), generator=generator,
    )
    skeleton = data_synth.default_skeleton()
    text = " then ".join(t for t, _ in script.entries)
    save_clip(args.out, grid, text, skeleton, extra={"boundaries": boundaries})
    drift = measure_drift(grid, skeleton, boundaries)
    with open(Path(args.out).with_suffix(".drift.json"), "w") as f:
        json.dump(drift, f, sort_keys=True, indent=1)
    print(f"wrote {args.out} ({grid.frames} frames, {len(boundaries)} boundaries)")
    return 0


def _load_clip_set(path) -> list[MotionGrid]:
    p = Path(path)
    if p.is_dir():
        return [load_clip(f)[0] for f in sorted(p.glob("clip_*.json"))]
    if p.name == "manifest.json":
        ds = data_synth.load_dataset(p)
        return [g for g, _ in ds.clips]
    return [load_clip(p)[0]]


def cmd_eval(args) -> int:
    defaults = {"seed": 0}
    args = _apply_config(args, defaults)
    skeleton = data_synth.default_skeleton()
    report: dict[str, float] = {}
    if args.motion:
        grid, _ = load_clip(args.motion)
        boundaries = [int(b) for b in args.boundaries.split(",")] if args.boundaries else []
        if boundaries:
            peak, area = eval_metrics.transition_jerk(grid, skeleton, boundaries)
            report["peak_jerk"] = peak
            report["area_under_jerk"] = area
            drift = measure_drift(grid, skeleton, boundaries)
            report["min_segment_speed"] = min(
                s["mean_joint_speed"] for s in drift["segments"]
            )
    else:
        gt = _load_clip_set(args.gt)
        pred = _load_clip_set(args.pred)
        report["feat_fid"] = eval_metrics.feature_fid(gt, pred, skeleton)
        report["diversity_gt"] = eval_metrics.diversity(gt, skeleton, seed=int(args.seed))
        report["diversity_pred"] = eval_metrics.diversity(pred, skeleton, seed=int(args.seed))
        if len(gt) == len(pred) and all(
            a.frames == b.frames for a, b in zip(gt, pred)
        ):
            pos_gt = torch.cat([eval_metrics.joint_positions(g, skeleton) for g in gt])
            pos_pr = torch.cat([eval_metrics.joint_positions(g, skeleton) for g in pred])
            report["mpjpe_mm"] = eval_metrics.mpjpe(pos_gt, pos_pr)
            report["pa_mpjpe_mm"] = eval_metrics.pa_mpjpe(pos_gt, pos_pr)
            report["mpjre_deg"] = eval_metrics.mpjre(
                torch.cat([g.rotations for g in gt]),
                torch.cat([g.rotations for g in pred]),
            )
    report = eval_metrics.metric_report(**report)
    with open(args.out, "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prism")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        p = sub.add_parser(name)
        p.add_argument("--config")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("data-gen", cmd_data_gen, {
        "--out": {"required": True},
        "--clips-per-family": {}, "--frames": {}, "--seed": {},
    })
    add("train-vae", cmd_train_vae, {
        "--data": {"required": True}, "--out": {"required": True},
        "--steps": {}, "--batch-size": {}, "--batch-frames": {}, "--lr": {},
        "--seed": {}, "--latent-dim": {}, "--kl-weight": {},
    })
    add("train-dit", cmd_train_dit, {
        "--data": {"required": True}, "--vae": {"required": True},
        "--out": {"required": True},
        "--steps": {}, "--batch-size": {}, "--batch-frames": {}, "--lr": {},
        "--seed": {}, "--width": {}, "--heads": {}, "--blocks": {},
    })
    add("train-self-forcing", cmd_train_self_forcing, {
        "--data": {"required": True}, "--vae": {"required": True},
        "--dit": {"required": True}, "--out": {"required": True},
        "--steps": {}, "--batch-size": {}, "--overlap": {},
        "--rollout-steps": {}, "--lr": {}, "--seed": {},
    })
    add("generate", cmd_generate, {
        "--vae": {"required": True}, "--dit": {"required": True},
        "--text": {"required": True}, "--out": {"required": True},
        "--frames": {}, "--cond-file": {}, "--cond-frames": {},
        "--cfg-scale": {}, "--steps": {}, "--seed": {},
        "--format": {"choices": ["json", "bvh"], "default": "json"},
    })
    add("stream", cmd_stream, {
        "--vae": {"required": True}, "--dit": {"required": True},
        "--script": {"required": True}, "--out": {"required": True},
        "--overlap": {}, "--cfg-scale": {}, "--steps": {}, "--seed": {},
    })
    add("eval", cmd_eval, {
        "--gt": {}, "--pred": {}, "--motion": {}, "--boundaries": {},
        "--out": {"required": True}, "--seed": {},
    })
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PRISM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (PrismError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
