"""Autoregressive segment chaining and self-forcing training.

A stream is a sequence of (text, frames) entries. Segment 1 is plain
text-to-motion; every later segment injects the previous segment's tail
latents as noise-free conditioning tokens and appends only its new frames,
so the decoded output is one continuous clip with no post-hoc blending.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import NonFinite, ScriptInvalid
from .flow_dit import FlowModel, flow_loss, sample
from .kinematics import Skeleton, forward_kinematics_batch, geodesic_angle, rot6d_to_matrix
from .motion_repr import MotionGrid, NormStats, augment_xz
from .motion_vae import DOWNSAMPLE, MotionVae
from .text_cond import encode_text


@dataclass
class PromptScript:
    entries: list[tuple[str, int]]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ScriptInvalid("empty script")
        for text, frames in self.entries:
            if not 16 <= frames <= 360:
                raise ScriptInvalid(f"segment length {frames} outside 16..360")
            if frames % DOWNSAMPLE != 0:
                raise ScriptInvalid(f"segment length {frames} not a multiple of 4")

    @classmethod
    def load(cls, path) -> "PromptScript":
        with open(path) as f:
            obj = json.load(f)
        return cls(entries=[(e["text"], int(e["frames"])) for e in obj])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(
                [{"text": t, "frames": n} for t, n in self.entries], f, sort_keys=True
            )


@dataclass
class StreamState:
    """Mutable per-stream state; one owner per stream."""

    decoder_caches: list[Tensor] | None = None
    encoder_caches: list[Tensor] | None = None
    last_latents: Tensor | None = None  # normalized, (T'_c, K, D)
    segments_emitted: int = 0
    total_frames: int = 0


def stream_generate(
    vae: MotionVae,
    model: FlowModel,
    stats: NormStats,
    script: PromptScript,
    overlap: int = 8,
    cfg_scale: float = 5.0,
    steps: int = 50,
    generator: torch.Generator | None = None,
    fps: float = 30.0,
) -> tuple[MotionGrid, list[int]]:
    """Chain the script into one clip.

    Returns the concatenated motion and the output-frame indices where
    each later segment's new frames begin. Output length is
    sum(frames) - (n - 1) * overlap: the overlap frames are shared, not
    re-emitted, and the decoder caches carry across segments so the clip
    is continuous by construction.
    """
    if overlap % DOWNSAMPLE != 0 or overlap <= 0:
        raise ScriptInvalid("overlap must be a positive multiple of 4")
    if overlap >= min(frames for _, frames in script.entries):
        raise ScriptInvalid("overlap must be shorter than every segment")
    lat_overlap = overlap // DOWNSAMPLE
    state = StreamState()
    chunks: list[Tensor] = []
    boundaries: list[int] = []
    for text, frames in script.entries:
        t_frames = frames // DOWNSAMPLE
        z = sample(
            model,
            t_frames,
            encode_text(text),
            cond_latents=state.last_latents,
            cfg_scale=cfg_scale,
            steps=steps,
            generator=generator,
        )
        new = z if state.last_latents is None else z[lat_overlap:]
        with torch.no_grad():
            decoded, state.decoder_caches = vae.decode(
                stats.denormalize(new).unsqueeze(0), state.decoder_caches
            )
        if state.segments_emitted > 0:
            boundaries.append(state.total_frames)
        chunks.append(decoded[0])
        state.last_latents = z[-lat_overlap:]
        state.segments_emitted += 1
        state.total_frames += decoded.shape[1]
    return MotionGrid(torch.cat(chunks), fps), boundaries


@dataclass
class SelfForcingConfig:
    overlap: int = 8
    rollout_steps: int = 4
    rollout_cfg: float = 1.0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    grad_clip: float = 1.0


def self_forcing_step(
    vae: MotionVae,
    model: FlowModel,
    stats: NormStats,
    batch: list[tuple[MotionGrid, str]],
    opt: torch.optim.Optimizer,
    cfg: SelfForcingConfig,
    generator: torch.Generator | None = None,
    teacher_forcing: bool = False,
) -> float:
    """One update on second-segment flow loss with self-generated conditions.

    Each clip is split in half. Segment 1 is generated from text with a
    reduced-step sampler (no gradient), decoded, and its tail re-encoded
    through the frozen VAE to form the condition; the ground-truth second
    half, translated in the xz plane so its root meets the generated
    condition, supplies the flow targets. With teacher_forcing=True the
    generated first segment is replaced by ground truth, which reduces the
    step to ordinary prefix-conditioned flow matching.
    """
    f = cfg.overlap
    losses = []
    opt.zero_grad()
    for grid, text in batch:
        mid = grid.frames // 2 // DOWNSAMPLE * DOWNSAMPLE
        if mid <= f or grid.frames - mid < 16 - f:
            raise ScriptInvalid("clip too short to split for self-forcing")
        if teacher_forcing:
            first = MotionGrid(grid.data[:mid], grid.fps)
        else:
            z = sample(
                model,
                mid // DOWNSAMPLE,
                encode_text(text),
                cfg_scale=cfg.rollout_cfg,
                steps=cfg.rollout_steps,
                generator=generator,
            )
            with torch.no_grad():
                decoded, _ = vae.decode(stats.denormalize(z).unsqueeze(0), out_frames=mid)
            first = MotionGrid(decoded[0], grid.fps)
        cond = first.data[mid - f : mid]
        tail = MotionGrid(grid.data[mid:], grid.fps)
        shift = cond[-1, 0, [0, 2]] - grid.data[mid - 1, 0, [0, 2]]
        tail = augment_xz(tail, 0.0, shift)
        seg2 = torch.cat([cond, tail.data])
        with torch.no_grad():
            post, _ = vae.encode(seg2.unsqueeze(0))
        z0 = stats.normalize(post.mu)  # condition is baked in with no grad path
        assert not z0.requires_grad
        losses.append(
            flow_loss(
                model,
                z0,
                encode_text(text).unsqueeze(0),
                generator,
                prefix_frames=f // DOWNSAMPLE,
            )
        )
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NonFinite("non-finite self-forcing loss")
    loss.backward()
    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return float(loss.detach())


def measure_drift(
    grid: MotionGrid, skeleton: Skeleton, boundaries: list[int]
) -> dict:
    """Per-segment displacement/speed statistics and boundary pose jumps.

    Mean joint speed dropping toward zero flags degradation to a static
    pose; the boundary jump is the per-joint geodesic rotation change
    summed over joints between the frames straddling each boundary.
    """
    edges = [0, *boundaries, grid.frames]
    pos = forward_kinematics_batch(skeleton, grid.root_pos, grid.rotations)
    speed = (pos[1:] - pos[:-1]).norm(dim=-1).mean(dim=-1) * grid.fps  # (T-1,)
    segments = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        segments.append(
            {
                "frames": hi - lo,
                "root_displacement": float(
                    (grid.root_pos[hi - 1] - grid.root_pos[lo]).norm()
                ),
                "mean_joint_speed": float(speed[lo : hi - 1].mean()) if hi - lo > 1 else 0.0,
            }
        )
    rot = rot6d_to_matrix(grid.rotations)
    jumps = [
        float(geodesic_angle(rot[b - 1], rot[b]).sum()) for b in boundaries
    ]
    return {"segments": segments, "boundary_jumps": jumps}
