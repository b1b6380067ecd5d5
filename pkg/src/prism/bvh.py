"""BVH export for generated motion.

Rotation order ZXY in degrees, OFFSET in centimeters; common importer
defaults, documented so importers can be configured to match.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .kinematics import Skeleton, rot6d_to_matrix
from .motion_repr import MotionGrid


def matrix_to_euler_zxy(m: Tensor) -> Tensor:
    """(..., 3, 3) -> (..., 3) intrinsic Z, X, Y angles in radians.

    R = Rz(z) @ Rx(x) @ Ry(y); x is read from m[2, 1] = sin(x).
    """
    sx = m[..., 2, 1].clamp(-1.0, 1.0)
    x = torch.asin(sx)
    near_gimbal = sx.abs() > 1.0 - 1e-7
    y = torch.where(
        near_gimbal,
        torch.atan2(m[..., 0, 2], m[..., 0, 0]),
        torch.atan2(-m[..., 2, 0], m[..., 2, 2]),
    )
    z = torch.where(
        near_gimbal,
        torch.zeros_like(sx),
        torch.atan2(-m[..., 0, 1], m[..., 1, 1]),
    )
    return torch.stack([z, x, y], dim=-1)


def _children(skeleton: Skeleton) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {j: [] for j in range(skeleton.joint_count)}
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            out[p].append(j)
    return out


def _write_joint(lines: list[str], skeleton: Skeleton, children, j: int, depth: int) -> None:
    pad = "  " * depth
    off = skeleton.rest_offsets[j] * 100.0  # meters -> centimeters
    if j == 0:
        lines.append(f"{pad}ROOT {skeleton.names[j]}")
    else:
        lines.append(f"{pad}JOINT {skeleton.names[j]}")
    lines.append(f"{pad}{{")
    lines.append(f"{pad}  OFFSET {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
    if j == 0:
        lines.append(
            f"{pad}  CHANNELS 6 Xposition Yposition Zposition "
            "Zrotation Xrotation Yrotation"
        )
    else:
        lines.append(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation")
    if children[j]:
        for c in children[j]:
            _write_joint(lines, skeleton, children, c, depth + 1)
    else:
        lines.append(f"{pad}  End Site")
        lines.append(f"{pad}  {{")
        lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
        lines.append(f"{pad}  }}")
    lines.append(f"{pad}}}")


def export_bvh(path, grid: MotionGrid, skeleton: Skeleton) -> None:
    lines = ["HIERARCHY"]
    _write_joint(lines, skeleton, _children(skeleton), 0, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {grid.frames}")
    lines.append(f"Frame Time: {1.0 / grid.fps:.8f}")
    euler = matrix_to_euler_zxy(rot6d_to_matrix(grid.rotations)) * (180.0 / math.pi)
    for i in range(grid.frames):
        values = [f"{v * 100.0:.6f}" for v in grid.root_pos[i]]
        for j in range(skeleton.joint_count):
            values.extend(f"{a:.6f}" for a in euler[i, j])
        lines.append(" ".join(values))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
