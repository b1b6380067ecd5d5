"""Reconstruction, distribution and transition-smoothness metrics.

The distribution metrics (Frechet distance, diversity) run on a fixed
64-dimensional hand-crafted kinematic feature vector per clip, so absolute
values are only comparable within this codebase.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .errors import (
    DegenerateConfiguration,
    ShapeMismatch,
    TooFewSamples,
    WindowOutOfRange,
)
from .kinematics import (
    Skeleton,
    forward_kinematics_batch,
    geodesic_angle,
    rot6d_to_matrix,
)
from .motion_repr import MotionGrid

FEATURE_DIM = 64


def mpjpe(gt: Tensor, pred: Tensor) -> float:
    """Mean per-joint position error in millimeters. Inputs (T, J, 3) meters."""
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"{tuple(gt.shape)} vs {tuple(pred.shape)}")
    return float((gt - pred).norm(dim=-1).mean() * 1000.0)


def pa_mpjpe(gt: Tensor, pred: Tensor) -> float:
    """MPJPE after per-frame similarity Procrustes alignment of pred onto gt."""
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"{tuple(gt.shape)} vs {tuple(pred.shape)}")
    aligned = torch.stack([_procrustes(g, p) for g, p in zip(gt, pred)])
    return mpjpe(gt, aligned)


def _procrustes(gt: Tensor, pred: Tensor) -> Tensor:
    """Optimal rotation + translation + uniform scale mapping pred onto gt."""
    mu_g, mu_p = gt.mean(0), pred.mean(0)
    g, p = gt - mu_g, pred - mu_p
    cov = p.T @ g
    if torch.linalg.matrix_rank(cov.double()) < 2:
        raise DegenerateConfiguration("joints are collinear")
    u, s, vt = torch.linalg.svd(cov)
    d = torch.sign(torch.det(u @ vt))
    flip = torch.diag(torch.tensor([1.0, 1.0, float(d)], dtype=gt.dtype))
    rot = u @ flip @ vt
    denom = (p ** 2).sum()
    scale = (s[:2].sum() + d * s[2]) / denom
    return scale * p @ rot + mu_g


def mpjre(gt_rot6d: Tensor, pred_rot6d: Tensor) -> float:
    """Mean per-joint geodesic rotation error in degrees. Inputs (T, J, 6)."""
    if gt_rot6d.shape != pred_rot6d.shape:
        raise ShapeMismatch(f"{tuple(gt_rot6d.shape)} vs {tuple(pred_rot6d.shape)}")
    ang = geodesic_angle(rot6d_to_matrix(gt_rot6d), rot6d_to_matrix(pred_rot6d))
    return float(ang.mean() * 180.0 / math.pi)


def clip_features(grid: MotionGrid, skeleton: Skeleton) -> Tensor:
    """Fixed 64-dim kinematic descriptor of one clip.

    Layout: per-joint mean and std of angular velocity (2 * 21 = 42),
    root speed stats (mean/std/max, horizontal mean: 4), root height
    stats (2), and a 16-bin histogram of all joint angles.
    """
    rot = rot6d_to_matrix(grid.rotations)  # (T, J, 3, 3)
    ang_vel = geodesic_angle(rot[:-1], rot[1:]) * grid.fps  # (T-1, J)
    joints = ang_vel[:, 1:]  # skip global orientation row
    feats = [joints.mean(0), joints.std(0)]
    speed = grid.root_delta[1:].norm(dim=-1) * grid.fps
    hspeed = grid.root_delta[1:, [0, 2]].norm(dim=-1) * grid.fps
    feats.append(
        torch.stack([speed.mean(), speed.std(), speed.max(), hspeed.mean()])
    )
    feats.append(torch.stack([grid.root_pos[:, 1].mean(), grid.root_pos[:, 1].std()]))
    angles = geodesic_angle(
        rot6d_to_matrix(grid.rotations[:, 1:]),
        torch.eye(3).expand(grid.frames, skeleton.joint_count - 1, 3, 3),
    )
    hist = torch.histc(angles, bins=16, min=0.0, max=math.pi) / angles.numel()
    feats.append(hist)
    out = torch.cat(feats)
    assert out.shape == (FEATURE_DIM,)
    return out


def _mean_cov(x: Tensor) -> tuple[Tensor, Tensor]:
    mu = x.mean(0)
    xc = x - mu
    return mu, xc.T @ xc / x.shape[0]


def _psd_sqrt(m: Tensor) -> Tensor:
    vals, vecs = torch.linalg.eigh((m + m.T) / 2)
    return vecs @ torch.diag(vals.clamp_min(0.0).sqrt()) @ vecs.T


def frechet_distance(feat_a: Tensor, feat_b: Tensor) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) on feature rows."""
    if feat_a.shape[0] < 2 or feat_b.shape[0] < 2:
        raise TooFewSamples("need at least 2 samples per set")
    mu_a, cov_a = _mean_cov(feat_a.double())
    mu_b, cov_b = _mean_cov(feat_b.double())
    root_a = _psd_sqrt(cov_a)
    inner = _psd_sqrt(root_a @ cov_b @ root_a)
    value = (mu_a - mu_b).pow(2).sum() + torch.trace(cov_a + cov_b - 2 * inner)
    return float(value)


def feature_fid(
    set_a: list[MotionGrid], set_b: list[MotionGrid], skeleton: Skeleton
) -> float:
    if len(set_a) < 2 or len(set_b) < 2:
        raise TooFewSamples("need at least 2 clips per set")
    fa = torch.stack([clip_features(g, skeleton) for g in set_a])
    fb = torch.stack([clip_features(g, skeleton) for g in set_b])
    return frechet_distance(fa, fb)


def diversity(
    clips: list[MotionGrid], skeleton: Skeleton, pairs: int = 100, seed: int = 0
) -> float:
    """Mean feature distance over random disjoint clip pairs."""
    if len(clips) < 2:
        raise TooFewSamples("need at least 2 clips")
    feats = torch.stack([clip_features(g, skeleton) for g in clips])
    rng = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(pairs):
        i, j = torch.randperm(len(clips), generator=rng)[:2]
        total += float((feats[i] - feats[j]).norm())
    return total / pairs


def joint_positions(grid: MotionGrid, skeleton: Skeleton) -> Tensor:
    """(T, J, 3) global positions via FK."""
    return forward_kinematics_batch(skeleton, grid.root_pos, grid.rotations)


def jerk_profile(positions: Tensor, fps: float) -> Tensor:
    """Per-frame, per-joint jerk magnitude via 3rd-order central differences.

    positions (T, J, 3); output (T - 4, J) aligned to frames 2..T-3, m/s^3.
    """
    x = positions
    third = (x[4:] - 2 * x[3:-1] + 2 * x[1:-3] - x[:-4]) / 2.0 * fps ** 3
    return third.norm(dim=-1)


def transition_jerk(
    grid: MotionGrid, skeleton: Skeleton, boundaries: list[int], window: int = 15
) -> tuple[float, float]:
    """(peak jerk, area under jerk) averaged over segment boundaries.

    Per boundary b the window covers frames [b - window, b + window]:
    peak is the max jerk magnitude over frames and joints, area is the
    windowed sum of the mean-joint magnitude divided by fps.
    """
    t = grid.frames
    for b in boundaries:
        if not window <= b < t - window:
            raise WindowOutOfRange(f"boundary {b} with window {window} in {t} frames")
    jerk = jerk_profile(joint_positions(grid, skeleton), grid.fps)  # frames 2..T-3
    peaks, areas = [], []
    for b in boundaries:
        lo = max(0, b - window - 2)
        hi = min(jerk.shape[0], b + window - 1)
        win = jerk[lo:hi]
        peaks.append(float(win.max()))
        areas.append(float(win.mean(dim=1).sum() / grid.fps))
    return sum(peaks) / len(peaks), sum(areas) / len(areas)


def metric_report(**values: float) -> dict[str, float]:
    for key, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"non-finite metric {key}")
    return dict(values)
