"""Rotation representations, kinematic tree and forward kinematics.

Rotations travel as 6D vectors: the first two columns of the rotation
matrix, concatenated (a1 then a2). Gram-Schmidt recovers the full matrix.
All functions are pure and accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import DegenerateRotation, SkeletonMismatch

DEGENERACY_EPS = 1e-8

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def rot6d_to_matrix(r: Tensor, strict: bool = True) -> Tensor:
    """(..., 6) -> (..., 3, 3) via Gram-Schmidt on the two raw columns.

    With strict=True a degenerate input (zero first column, or second
    column parallel to the first) raises DegenerateRotation. With
    strict=False degenerate entries produce garbage rows the caller must
    mask out (see rot6d_valid_mask); useful inside training losses.
    """
    if r.shape[-1] != 6:
        raise SkeletonMismatch(f"expected trailing dim 6, got {tuple(r.shape)}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = a1.norm(dim=-1, keepdim=True)
    b1 = a1 / n1.clamp_min(DEGENERACY_EPS)
    proj = (a2 * b1).sum(-1, keepdim=True) * b1
    u2 = a2 - proj
    n2 = u2.norm(dim=-1, keepdim=True)
    if strict:
        bad = (n1.squeeze(-1) <= DEGENERACY_EPS) | (n2.squeeze(-1) <= DEGENERACY_EPS)
        if not torch.isfinite(r).all():
            raise DegenerateRotation("non-finite 6D rotation input")
        if bad.any():
            raise DegenerateRotation("zero or parallel 6D rotation columns")
    b2 = u2 / n2.clamp_min(DEGENERACY_EPS)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def rot6d_valid_mask(r: Tensor) -> Tensor:
    """Boolean mask of entries convertible by rot6d_to_matrix."""
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = a1.norm(dim=-1)
    b1 = a1 / n1.clamp_min(DEGENERACY_EPS).unsqueeze(-1)
    u2 = a2 - (a2 * b1).sum(-1, keepdim=True) * b1
    finite = torch.isfinite(r).all(-1)
    return finite & (n1 > DEGENERACY_EPS) & (u2.norm(dim=-1) > DEGENERACY_EPS)


def matrix_to_rot6d(m: Tensor) -> Tensor:
    """(..., 3, 3) -> (..., 6): first two columns, concatenated."""
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def geodesic_angle(m1: Tensor, m2: Tensor) -> Tensor:
    """Angle of the relative rotation m1^T m2, in [0, pi]."""
    rel = torch.matmul(m1.transpose(-1, -2), m2)
    trace = rel.diagonal(dim1=-2, dim2=-1).sum(-1)
    return torch.acos(((trace - 1.0) / 2.0).clamp(-1.0, 1.0))


def rot_x(angle: float | Tensor) -> Tensor:
    return _axis_rot(angle, 0)


def rot_y(angle: float | Tensor) -> Tensor:
    return _axis_rot(angle, 1)


def rot_z(angle: float | Tensor) -> Tensor:
    return _axis_rot(angle, 2)


def _axis_rot(angle: float | Tensor, axis: int) -> Tensor:
    a = torch.as_tensor(angle, dtype=torch.get_default_dtype())
    c, s = torch.cos(a), torch.sin(a)
    one = torch.ones_like(c)
    zero = torch.zeros_like(c)
    if axis == 0:
        rows = [one, zero, zero, zero, c, -s, zero, s, c]
    elif axis == 1:
        rows = [c, zero, s, zero, one, zero, -s, zero, c]
    else:
        rows = [c, -s, zero, s, c, zero, zero, zero, one]
    return torch.stack(rows, dim=-1).reshape(*a.shape, 3, 3)


def axis_angle_to_matrix(axis: Tensor, angle: Tensor) -> Tensor:
    """Rodrigues formula. axis (..., 3) need not be unit length."""
    axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(DEGENERACY_EPS)
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*x.shape, 3, 3)
    angle = torch.as_tensor(angle, dtype=axis.dtype).reshape(*x.shape, 1, 1)
    eye = torch.eye(3, dtype=axis.dtype).expand(*x.shape, 3, 3)
    return eye + torch.sin(angle) * k + (1 - torch.cos(angle)) * (k @ k)


@dataclass
class Skeleton:
    """Kinematic tree in topological order (parent[j] < j, root parent -1).

    joint_count counts tree nodes including the root. The motion grid has
    K = joint_count + 1 token slots: root translation, root (global)
    orientation, and one rotation per non-root joint.
    """

    parents: list[int]
    rest_offsets: Tensor  # (J, 3) meters
    names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rest_offsets = torch.as_tensor(self.rest_offsets, dtype=torch.get_default_dtype())
        j = len(self.parents)
        if self.rest_offsets.shape != (j, 3):
            raise SkeletonMismatch(
                f"rest_offsets shape {tuple(self.rest_offsets.shape)} vs {j} joints"
            )
        if self.parents[0] != -1:
            raise SkeletonMismatch("root joint must have parent -1")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise SkeletonMismatch(f"parent[{i}]={p} violates topological order")
        if not self.names:
            self.names = [f"joint_{i}" for i in range(j)]

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def token_count(self) -> int:
        """K: root token + orientation token + per-joint rotation tokens."""
        return self.joint_count + 1

    def height(self) -> float:
        """Vertical extent of the rest pose, meters."""
        pos = forward_kinematics_batch(
            self,
            torch.zeros(1, 3),
            torch.tensor(IDENTITY_6D).expand(1, self.joint_count, 6),
        )[0]
        return float(pos[:, 1].max() - pos[:, 1].min())

    def to_json(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "parents": list(self.parents),
            "rest_offsets": [[float(v) for v in row] for row in self.rest_offsets],
            "names": list(self.names),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        order = sorted(range(len(obj["parents"])), key=lambda i: _depth(obj["parents"], i))
        remap = {old: new for new, old in enumerate(order)}
        parents = [obj["parents"][old] for old in order]
        parents = [-1 if p == -1 else remap[p] for p in parents]
        offsets = torch.tensor([obj["rest_offsets"][old] for old in order], dtype=torch.get_default_dtype())
        names = [obj.get("names", [f"joint_{i}" for i in range(len(parents))])[old] for old in order]
        return cls(parents=parents, rest_offsets=offsets, names=names)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Skeleton":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _depth(parents: list[int], i: int) -> tuple:
    chain = []
    while i != -1:
        chain.append(i)
        i = parents[i]
    return (len(chain), tuple(reversed(chain)))


@dataclass
class Pose:
    """Root translation + global orientation + non-root joint rotations."""

    root_pos: Tensor  # (3,)
    global_orient: Tensor  # (6,)
    joint_rot: Tensor  # (J - 1, 6)

    def rotations(self) -> Tensor:
        """(J, 6): global orientation followed by joint rotations."""
        return torch.cat([self.global_orient.unsqueeze(0), self.joint_rot], dim=0)


def forward_kinematics_batch(
    skeleton: Skeleton, root_pos: Tensor, rotations: Tensor, strict: bool = True
) -> Tensor:
    """FK over a batch. root_pos (..., 3), rotations (..., J, 6) where
    row 0 is the global orientation. Returns global positions (..., J, 3).
    """
    j = skeleton.joint_count
    if rotations.shape[-2:] != (j, 6):
        raise SkeletonMismatch(
            f"rotations shape {tuple(rotations.shape)} vs {j} joints"
        )
    local = rot6d_to_matrix(rotations, strict=strict)
    offsets = skeleton.rest_offsets.to(rotations.dtype)
    global_rot = [local[..., 0, :, :]]
    positions = [root_pos.to(rotations.dtype)]
    for i in range(1, j):
        p = skeleton.parents[i]
        positions.append(
            positions[p] + (global_rot[p] @ offsets[i].unsqueeze(-1)).squeeze(-1)
        )
        global_rot.append(global_rot[p] @ local[..., i, :, :])
    return torch.stack(positions, dim=-2)


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> Tensor:
    """Single-pose FK: (J, 3) global joint positions, meters."""
    return forward_kinematics_batch(
        skeleton, pose.root_pos.unsqueeze(0), pose.rotations().unsqueeze(0)
    )[0]


def root_relative(positions: Tensor) -> Tensor:
    """Subtract the root joint position from every joint: (..., J, 3)."""
    return positions - positions[..., 0:1, :]
