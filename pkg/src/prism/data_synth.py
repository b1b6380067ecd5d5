"""Procedural synthetic motion on a 22-joint SMPL-topology skeleton.

Five labeled action families (walk, turn, wave, crouch, idle) provide
ground truth for every training and evaluation run. Generation is
deterministic given (family, params, seed), and the dataset builder is
deterministic given its config seed down to the file bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .errors import UnknownFamily
from .kinematics import IDENTITY_6D, Skeleton, axis_angle_to_matrix, matrix_to_rot6d, rot_y
from .motion_repr import MotionGrid, grid_from_arrays, load_clip, save_clip

FPS = 30.0

# SMPL body topology: (name, parent, rest offset before height normalization)
_JOINTS = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("l_hip", 0, (0.09, -0.07, 0.0)),
    ("r_hip", 0, (-0.09, -0.07, 0.0)),
    ("spine1", 0, (0.0, 0.11, 0.0)),
    ("l_knee", 1, (0.0, -0.38, 0.0)),
    ("r_knee", 2, (0.0, -0.38, 0.0)),
    ("spine2", 3, (0.0, 0.12, 0.0)),
    ("l_ankle", 4, (0.0, -0.40, 0.0)),
    ("r_ankle", 5, (0.0, -0.40, 0.0)),
    ("spine3", 6, (0.0, 0.12, 0.0)),
    ("l_foot", 7, (0.0, -0.06, 0.12)),
    ("r_foot", 8, (0.0, -0.06, 0.12)),
    ("neck", 9, (0.0, 0.14, 0.0)),
    ("l_collar", 9, (0.08, 0.10, 0.0)),
    ("r_collar", 9, (-0.08, 0.10, 0.0)),
    ("head", 12, (0.0, 0.12, 0.0)),
    ("l_shoulder", 13, (0.10, 0.0, 0.0)),
    ("r_shoulder", 14, (-0.10, 0.0, 0.0)),
    ("l_elbow", 16, (0.26, 0.0, 0.0)),
    ("r_elbow", 17, (-0.26, 0.0, 0.0)),
    ("l_wrist", 18, (0.25, 0.0, 0.0)),
    ("r_wrist", 19, (-0.25, 0.0, 0.0)),
]

L_HIP, R_HIP, L_KNEE, R_KNEE = 1, 2, 4, 5
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW = 16, 17, 18, 19


def default_skeleton() -> Skeleton:
    skel = Skeleton(
        parents=[p for _, p, _ in _JOINTS],
        rest_offsets=torch.tensor([o for _, _, o in _JOINTS]),
        names=[n for n, _, _ in _JOINTS],
    )
    skel.rest_offsets = skel.rest_offsets / skel.height()  # rest height == 1
    return skel


def _identity_rotations(frames: int, joints: int) -> Tensor:
    return torch.tensor(IDENTITY_6D).expand(frames, joints, 6).clone()


def _set_axis_angle(rots: Tensor, joint: int, axis, angles: Tensor) -> None:
    axis_t = torch.tensor(axis, dtype=rots.dtype).expand(angles.shape[0], 3)
    rots[:, joint] = matrix_to_rot6d(axis_angle_to_matrix(axis_t, angles))


@dataclass
class ActionFamily:
    name: str
    text: str
    param_ranges: dict[str, tuple[float, float]]
    generator: callable

    def sample_params(self, rng: torch.Generator) -> dict[str, float]:
        return {
            key: lo + float(torch.rand((), generator=rng)) * (hi - lo)
            for key, (lo, hi) in self.param_ranges.items()
        }


def _phase(frames: int, freq: float) -> Tensor:
    t = torch.arange(frames, dtype=torch.get_default_dtype()) / FPS
    return 2 * math.pi * freq * t


def _walk(params: dict, frames: int) -> tuple[Tensor, Tensor]:
    # rotation row index == tree joint index; row 0 is the global orientation
    rots = _identity_rotations(frames, len(_JOINTS))
    ph = _phase(frames, params["freq"])
    amp = params["amplitude"]
    swing = amp * torch.sin(ph)
    _set_axis_angle(rots, L_HIP, (1, 0, 0), swing)
    _set_axis_angle(rots, R_HIP, (1, 0, 0), -swing)
    knee = amp * 0.8 * (1 - torch.cos(ph)).clamp_min(0)
    _set_axis_angle(rots, L_KNEE, (1, 0, 0), knee)
    _set_axis_angle(rots, R_KNEE, (1, 0, 0), amp * 0.8 * (1 + torch.cos(ph)).clamp_min(0))
    arm = 0.5 * amp * torch.sin(ph)
    _set_axis_angle(rots, L_SHOULDER, (1, 0, 0), -arm)
    _set_axis_angle(rots, R_SHOULDER, (1, 0, 0), arm)
    heading = params.get("heading", 0.0)
    direction = torch.tensor([math.cos(heading), 0.0, math.sin(heading)])
    step = torch.arange(frames, dtype=torch.get_default_dtype()).unsqueeze(-1)
    root = direction * params["speed"] * step / FPS
    rots[:, 0] = matrix_to_rot6d(rot_y(torch.full((frames,), -heading)))
    return root, rots


def _turn(params: dict, frames: int) -> tuple[Tensor, Tensor]:
    rots = _identity_rotations(frames, len(_JOINTS))
    t = torch.arange(frames, dtype=torch.get_default_dtype()) / FPS
    yaw = params["rate"] * t
    rots[:, 0] = matrix_to_rot6d(rot_y(yaw))
    return torch.zeros(frames, 3), rots


def _wave(params: dict, frames: int) -> tuple[Tensor, Tensor]:
    rots = _identity_rotations(frames, len(_JOINTS))
    ph = _phase(frames, params["freq"])
    amp = params["amplitude"]
    _set_axis_angle(rots, L_SHOULDER, (0, 0, 1), 1.2 + amp * torch.sin(ph))
    _set_axis_angle(rots, R_SHOULDER, (0, 0, 1), -1.2 - amp * torch.sin(ph))
    _set_axis_angle(rots, L_ELBOW, (0, 0, 1), 0.4 * amp * torch.cos(ph))
    _set_axis_angle(rots, R_ELBOW, (0, 0, 1), -0.4 * amp * torch.cos(ph))
    return torch.zeros(frames, 3), rots


def _crouch(params: dict, frames: int) -> tuple[Tensor, Tensor]:
    rots = _identity_rotations(frames, len(_JOINTS))
    ramp = torch.linspace(0, 1, frames) * params["depth"]
    for hip in (L_HIP, R_HIP):
        _set_axis_angle(rots, hip, (1, 0, 0), -ramp)
    for knee in (L_KNEE, R_KNEE):
        _set_axis_angle(rots, knee, (1, 0, 0), 1.6 * ramp)
    root = torch.zeros(frames, 3)
    root[:, 1] = -0.2 * ramp
    return root, rots


def _idle(params: dict, frames: int) -> tuple[Tensor, Tensor]:
    rots = _identity_rotations(frames, len(_JOINTS))
    amp = params["amplitude"]
    if amp > 0:
        ph = _phase(frames, params["freq"])
        sway = amp * torch.sin(ph)
        _set_axis_angle(rots, L_SHOULDER, (0, 0, 1), sway)
        _set_axis_angle(rots, R_SHOULDER, (0, 0, 1), -sway)
        rots[:, 0] = matrix_to_rot6d(rot_y(0.5 * sway))
    return torch.zeros(frames, 3), rots


FAMILIES: dict[str, ActionFamily] = {
    f.name: f
    for f in [
        ActionFamily(
            "walk",
            "a person walks forward",
            {"speed": (0.6, 1.4), "freq": (0.8, 1.4), "amplitude": (0.3, 0.6),
             "heading": (0.0, 0.0)},
            _walk,
        ),
        ActionFamily("turn", "a person turns around", {"rate": (0.8, 2.2)}, _turn),
        ActionFamily(
            "wave",
            "a person waves their arms",
            {"freq": (0.8, 2.0), "amplitude": (0.3, 0.7)},
            _wave,
        ),
        ActionFamily(
            "crouch", "a person crouches down", {"depth": (0.4, 0.9)}, _crouch
        ),
        ActionFamily(
            "idle",
            "a person stands idle",
            {"amplitude": (0.02, 0.08), "freq": (0.3, 0.8)},
            _idle,
        ),
    ]
}


def generate_clip(
    family: str, params: dict[str, float], frames: int
) -> tuple[MotionGrid, str]:
    if family not in FAMILIES:
        raise UnknownFamily(family)
    if not 16 <= frames <= 360:
        raise ValueError("clip length must be within 16..360 frames")
    fam = FAMILIES[family]
    root, rots = fam.generator(params, frames)
    return grid_from_arrays(root, rots, FPS), fam.text


@dataclass
class DatasetConfig:
    clips_per_family: int = 400
    frames: int = 64
    seed: int = 0


@dataclass
class Dataset:
    skeleton: Skeleton
    clips: list[tuple[MotionGrid, str]]
    splits: list[str]
    families: list[str]

    def subset(self, split: str) -> list[tuple[MotionGrid, str]]:
        return [c for c, s in zip(self.clips, self.splits) if s == split]


def _split_for_index(i: int) -> str:
    # deterministic 80/10/10 by index
    r = i % 10
    return "train" if r < 8 else ("val" if r == 8 else "test")


def build_dataset(cfg: DatasetConfig) -> Dataset:
    rng = torch.Generator().manual_seed(cfg.seed)
    skeleton = default_skeleton()
    clips, splits, families = [], [], []
    names = sorted(FAMILIES)
    total = cfg.clips_per_family * len(names)
    for i in range(total):
        family = names[i % len(names)]
        params = FAMILIES[family].sample_params(rng)
        grid, text = generate_clip(family, params, cfg.frames)
        clips.append((grid, text))
        splits.append(_split_for_index(i))
        families.append(family)
    return Dataset(skeleton=skeleton, clips=clips, splits=splits, families=families)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ((grid, text), split, family) in enumerate(
        zip(dataset.clips, dataset.splits, dataset.families)
    ):
        name = f"clip_{i:05d}.json"
        save_clip(out / name, grid, text, "default", extra={"family": family})
        entries.append({"file": name, "text": text, "split": split, "family": family})
    manifest = {
        "fps": FPS,
        "skeleton": dataset.skeleton.to_json(),
        "clips": entries,
    }
    path = out / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    skeleton = Skeleton.from_json(manifest["skeleton"])
    clips, splits, families = [], [], []
    for entry in manifest["clips"]:
        grid, text = load_clip(manifest_path.parent / entry["file"])
        clips.append((grid, text))
        splits.append(entry["split"])
        families.append(entry["family"])
    return Dataset(skeleton=skeleton, clips=clips, splits=splits, families=families)
