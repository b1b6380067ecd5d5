import json

import pytest
import torch

from prism.errors import UnknownFamily
from prism.data_synth import (
    FAMILIES,
    FPS,
    DatasetConfig,
    build_dataset,
    default_skeleton,
    generate_clip,
    load_dataset,
    save_dataset,
)
from prism.eval_metrics import clip_features
from prism.kinematics import rot6d_valid_mask


class TestSkeleton:
    def test_height_exactly_one(self):
        assert abs(default_skeleton().height() - 1.0) < 1e-6

    def test_tree_shape(self):
        sk = default_skeleton()
        assert sk.joint_count == 22
        assert sk.parents[0] == -1
        assert sk.names[0] == "pelvis"


class TestGenerateClip:
    @pytest.mark.parametrize("family", sorted(FAMILIES))
    def test_valid_rotations_all_families(self, family):
        fam = FAMILIES[family]
        params = {k: (lo + hi) / 2 for k, (lo, hi) in fam.param_ranges.items()}
        grid, text = generate_clip(family, params, 64)
        assert grid.frames == 64
        assert grid.tokens == 23
        assert rot6d_valid_mask(grid.rotations).all()
        assert torch.isfinite(grid.data).all()
        assert text == fam.text

    def test_walk_displacement_closed_form(self):
        # Root advances speed * (T - 1) / fps meters along the heading.
        params = {"speed": 1.0, "freq": 1.0, "amplitude": 0.4, "heading": 0.0}
        grid, _ = generate_clip("walk", params, 64)
        expected = 1.0 * 63 / FPS
        assert abs(float(grid.root_pos[-1, 0]) - expected) < 1e-5
        assert grid.root_pos[:, 1].abs().max() < 1e-6
        assert grid.root_pos[:, 2].abs().max() < 1e-6

    def test_walk_speed_scales_displacement(self):
        base = {"freq": 1.0, "amplitude": 0.4, "heading": 0.0}
        g1, _ = generate_clip("walk", {**base, "speed": 0.7}, 32)
        g2, _ = generate_clip("walk", {**base, "speed": 1.4}, 32)
        d1 = float(g1.root_pos[-1].norm())
        d2 = float(g2.root_pos[-1].norm())
        assert abs(d2 / d1 - 2.0) < 1e-4

    def test_crouch_lowers_root(self):
        grid, _ = generate_clip("crouch", {"depth": 0.8}, 32)
        assert float(grid.root_pos[-1, 1]) < float(grid.root_pos[0, 1]) - 0.1

    def test_idle_stays_near_origin(self):
        grid, _ = generate_clip("idle", {"amplitude": 0.05, "freq": 0.5}, 32)
        assert grid.root_pos.abs().max() < 1e-6

    def test_unknown_family(self):
        with pytest.raises(UnknownFamily):
            generate_clip("backflip", {}, 32)

    def test_frame_bounds(self):
        with pytest.raises(ValueError):
            generate_clip("idle", {"amplitude": 0.05, "freq": 0.5}, 8)
        with pytest.raises(ValueError):
            generate_clip("idle", {"amplitude": 0.05, "freq": 0.5}, 400)


class TestDataset:
    def test_split_fractions(self):
        ds = build_dataset(DatasetConfig(clips_per_family=40, frames=32))
        counts = {s: ds.splits.count(s) for s in ("train", "val", "test")}
        assert counts == {"train": 160, "val": 20, "test": 20}

    def test_split_fractions_default_scale(self):
        # 2000 clips -> exact 80/10/10.
        ds = build_dataset(DatasetConfig(clips_per_family=4, frames=32))
        n = len(ds.clips)
        assert ds.splits.count("train") == n * 8 // 10

    def test_families_balanced(self):
        ds = build_dataset(DatasetConfig(clips_per_family=6, frames=32))
        for name in FAMILIES:
            assert ds.families.count(name) == 6

    def test_deterministic_rebuild(self):
        a = build_dataset(DatasetConfig(clips_per_family=3, frames=32, seed=5))
        b = build_dataset(DatasetConfig(clips_per_family=3, frames=32, seed=5))
        for (ga, ta), (gb, tb) in zip(a.clips, b.clips):
            assert ta == tb
            assert torch.equal(ga.data, gb.data)

    def test_seed_changes_data(self):
        a = build_dataset(DatasetConfig(clips_per_family=3, frames=32, seed=0))
        b = build_dataset(DatasetConfig(clips_per_family=3, frames=32, seed=1))
        assert not torch.equal(a.clips[0][0].data, b.clips[0][0].data)

    def test_save_load_round_trip(self, tmp_path):
        ds = build_dataset(DatasetConfig(clips_per_family=2, frames=32))
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path / "manifest.json")
        assert loaded.splits == ds.splits
        assert loaded.families == ds.families
        for (ga, ta), (gb, tb) in zip(ds.clips, loaded.clips):
            assert ta == tb
            assert (ga.data - gb.data).abs().max() < 1e-6

    def test_load_accepts_directory(self, tmp_path):
        ds = build_dataset(DatasetConfig(clips_per_family=2, frames=32))
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded.clips) == len(ds.clips)

    def test_byte_identical_rebuild(self, tmp_path):
        cfg = DatasetConfig(clips_per_family=2, frames=32, seed=3)
        save_dataset(build_dataset(cfg), tmp_path / "a")
        save_dataset(build_dataset(cfg), tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_manifest_schema(self, tmp_path):
        ds = build_dataset(DatasetConfig(clips_per_family=1, frames=32))
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert set(manifest) == {"fps", "skeleton", "clips"}
        entry = manifest["clips"][0]
        assert set(entry) == {"file", "text", "split", "family"}

    def test_family_features_separable(self):
        # Nearest-centroid classification on clip features should recover the
        # family label for at least 95% of held-out clips.
        ds = build_dataset(DatasetConfig(clips_per_family=20, frames=64))
        sk = ds.skeleton
        feats = torch.stack([clip_features(g, sk) for g, _ in ds.clips])
        names = sorted(FAMILIES)
        train_idx = [i for i, s in enumerate(ds.splits) if s == "train"]
        test_idx = [i for i, s in enumerate(ds.splits) if s != "train"]
        centroids = torch.stack(
            [
                feats[[i for i in train_idx if ds.families[i] == n]].mean(0)
                for n in names
            ]
        )
        correct = 0
        for i in test_idx:
            pred = names[int((centroids - feats[i]).norm(dim=-1).argmin())]
            correct += pred == ds.families[i]
        assert correct / len(test_idx) >= 0.95
