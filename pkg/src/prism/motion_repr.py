"""The joint-factorized motion grid and its transformations.

A clip of T frames over a J-joint skeleton becomes a (T, K, 6) grid with
K = J + 1 token slots:

  slot 0        root token [p; dp] (absolute position, frame delta)
  slot 1        global orientation, 6D
  slots 2..K-1  per-joint 6D rotations (non-root joints, tree order)

On decode the absolute position wins over dp; dp exists for the loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import EmptyDataset, InvalidRotation, SkeletonMismatch
from .kinematics import (
    Pose,
    Skeleton,
    rot6d_to_matrix,
    rot6d_valid_mask,
    rot_y,
    matrix_to_rot6d,
)

STD_FLOOR = 1e-6


@dataclass
class MotionGrid:
    data: Tensor  # (T, K, 6)
    fps: float = 30.0

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[-1] != 6:
            raise SkeletonMismatch(f"grid shape {tuple(self.data.shape)}, want (T, K, 6)")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def root_pos(self) -> Tensor:  # (T, 3)
        return self.data[:, 0, :3]

    @property
    def root_delta(self) -> Tensor:  # (T, 3)
        return self.data[:, 0, 3:]

    @property
    def rotations(self) -> Tensor:  # (T, J, 6) with row 0 = global orientation
        return self.data[:, 1:, :]

    def clone(self) -> "MotionGrid":
        return MotionGrid(self.data.clone(), self.fps)


def grid_from_arrays(root_pos: Tensor, rotations: Tensor, fps: float = 30.0) -> MotionGrid:
    """Assemble a grid from absolute root positions (T, 3) and per-frame
    rotations (T, J, 6); the root-delta channel is derived (delta_0 = 0)."""
    t = root_pos.shape[0]
    deltas = torch.zeros_like(root_pos)
    if t > 1:
        deltas[1:] = root_pos[1:] - root_pos[:-1]
    root_token = torch.cat([root_pos, deltas], dim=-1).unsqueeze(1)
    return MotionGrid(torch.cat([root_token, rotations], dim=1), fps)


def pose_sequence_to_grid(skeleton: Skeleton, poses: list[Pose], fps: float = 30.0) -> MotionGrid:
    if not poses:
        raise EmptyDataset("need at least one pose")
    j = skeleton.joint_count
    for p in poses:
        if p.joint_rot.shape != (j - 1, 6):
            raise SkeletonMismatch(
                f"pose has {p.joint_rot.shape[0]} joint rotations, skeleton wants {j - 1}"
            )
    root = torch.stack([p.root_pos for p in poses])
    rots = torch.stack([p.rotations() for p in poses])
    return grid_from_arrays(root, rots, fps)


def grid_to_pose_sequence(skeleton: Skeleton, grid: MotionGrid) -> list[Pose]:
    """Inverse of pose_sequence_to_grid; reads absolute p, ignores dp."""
    if grid.tokens != skeleton.token_count:
        raise SkeletonMismatch(
            f"grid has {grid.tokens} tokens, skeleton wants {skeleton.token_count}"
        )
    if not rot6d_valid_mask(grid.rotations).all():
        raise InvalidRotation("degenerate rotation slot in grid")
    return [
        Pose(root_pos=grid.root_pos[i], global_orient=grid.data[i, 1], joint_rot=grid.data[i, 2:])
        for i in range(grid.frames)
    ]


def rollout_trajectory(deltas: Tensor, p0: Tensor) -> Tensor:
    """out_i = p0 + sum_{k<=i} deltas_k. deltas (..., T, 3), p0 (..., 3)."""
    return p0.unsqueeze(-2) + torch.cumsum(deltas, dim=-2)


def augment_xz(grid: MotionGrid, angle: float, offset) -> MotionGrid:
    """Rotate the clip about the y axis and translate it in the xz plane.

    Root position/delta are rotated (position also translated); the global
    orientation is left-multiplied by the same rotation; joint rotations
    are untouched (they are local to their parents).
    """
    r = rot_y(angle).to(grid.data.dtype)
    offset = torch.as_tensor(offset, dtype=grid.data.dtype)
    shift = torch.stack([offset[0], torch.zeros((), dtype=grid.data.dtype), offset[1]])
    data = grid.data.clone()
    data[:, 0, :3] = grid.root_pos @ r.T + shift
    data[:, 0, 3:] = grid.root_delta @ r.T
    orient = rot6d_to_matrix(grid.data[:, 1])
    data[:, 1] = matrix_to_rot6d(r @ orient)
    return MotionGrid(data, grid.fps)


@dataclass
class NormStats:
    """Per-(token slot, channel) latent normalization statistics."""

    mean: Tensor  # (K, D)
    std: Tensor  # (K, D), floored

    def normalize(self, z: Tensor) -> Tensor:
        return (z - self.mean.to(z.dtype)) / self.std.to(z.dtype)

    def denormalize(self, z: Tensor) -> Tensor:
        return z * self.std.to(z.dtype) + self.mean.to(z.dtype)


def compute_latent_stats(latents: list[Tensor]) -> NormStats:
    """Population mean/std over all latent frames, per slot and channel.

    Each element is a (T', K, D) latent grid; at least two frames total.
    """
    if not latents:
        raise EmptyDataset("no latents")
    stacked = torch.cat([z.reshape(-1, *z.shape[-2:]) for z in latents], dim=0)
    if stacked.shape[0] < 2:
        raise EmptyDataset("need at least 2 latent frames for statistics")
    mean = stacked.mean(dim=0)
    std = stacked.std(dim=0, unbiased=False).clamp_min(STD_FLOOR)
    return NormStats(mean=mean, std=std)


def clip_to_json(grid: MotionGrid, text: str, skeleton: Skeleton | str) -> dict:
    return {
        "fps": grid.fps,
        "skeleton": skeleton if isinstance(skeleton, str) else skeleton.to_json(),
        "frames": [
            {
                "p": [float(v) for v in grid.root_pos[i]],
                "rot6d": [[float(v) for v in row] for row in grid.rotations[i]],
            }
            for i in range(grid.frames)
        ],
        "text": text,
    }


def clip_from_json(obj: dict) -> tuple[MotionGrid, str]:
    root = torch.tensor([f["p"] for f in obj["frames"]], dtype=torch.get_default_dtype())
    rots = torch.tensor([f["rot6d"] for f in obj["frames"]], dtype=torch.get_default_dtype())
    return grid_from_arrays(root, rots, float(obj["fps"])), obj.get("text", "")


def save_clip(path, grid: MotionGrid, text: str, skeleton: Skeleton | str, extra: dict | None = None) -> None:
    obj = clip_to_json(grid, text, skeleton)
    if extra:
        obj.update(extra)
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True)


def load_clip(path) -> tuple[MotionGrid, str]:
    with open(path) as f:
        return clip_from_json(json.load(f))
