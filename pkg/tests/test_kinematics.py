import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prism.errors import DegenerateRotation, SkeletonMismatch
from prism.kinematics import (
    IDENTITY_6D,
    Pose,
    Skeleton,
    axis_angle_to_matrix,
    forward_kinematics,
    forward_kinematics_batch,
    geodesic_angle,
    matrix_to_rot6d,
    root_relative,
    rot6d_to_matrix,
    rot6d_valid_mask,
    rot_x,
    rot_y,
    rot_z,
)


def random_rotations(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    axis = torch.randn(n, 3, generator=g)
    angle = torch.rand(n, generator=g) * 2 * math.pi
    return axis_angle_to_matrix(axis, angle)


class TestRot6d:
    def test_identity(self):
        m = rot6d_to_matrix(torch.tensor(IDENTITY_6D))
        assert torch.allclose(m, torch.eye(3))

    def test_round_trip(self):
        m = random_rotations(200)
        back = rot6d_to_matrix(matrix_to_rot6d(m))
        assert (back - m).abs().max() < 1e-6

    def test_orthonormal_det_plus_one(self):
        g = torch.Generator().manual_seed(1)
        r = torch.randn(500, 6, generator=g)
        m = rot6d_to_matrix(r)
        eye = m @ m.transpose(-1, -2)
        assert (eye - torch.eye(3)).abs().max() < 1e-5
        assert (torch.det(m) - 1).abs().max() < 1e-5

    def test_gram_schmidt_ignores_scale(self):
        r = matrix_to_rot6d(random_rotations(10))
        scaled = r.clone()
        scaled[..., :3] *= 3.0
        scaled[..., 3:] *= 0.5
        assert torch.allclose(rot6d_to_matrix(scaled), rot6d_to_matrix(r), atol=1e-6)

    def test_degenerate_zero_column_raises(self):
        bad = torch.tensor([0.0, 0, 0, 0, 1, 0])
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix(bad)

    def test_degenerate_parallel_columns_raises(self):
        bad = torch.tensor([1.0, 0, 0, 2, 0, 0])
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix(bad)

    def test_nonfinite_raises(self):
        bad = torch.tensor([float("nan"), 0, 0, 0, 1, 0])
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix(bad)

    def test_nonstrict_does_not_raise(self):
        bad = torch.zeros(4, 6)
        out = rot6d_to_matrix(bad, strict=False)
        assert out.shape == (4, 3, 3)

    def test_valid_mask(self):
        r = torch.stack(
            [
                torch.tensor(IDENTITY_6D),
                torch.zeros(6),
                torch.tensor([1.0, 0, 0, 2, 0, 0]),
                torch.full((6,), float("inf")),
            ]
        )
        assert rot6d_valid_mask(r).tolist() == [True, False, False, False]

    def test_wrong_trailing_dim(self):
        with pytest.raises(SkeletonMismatch):
            rot6d_to_matrix(torch.zeros(5))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        m = random_rotations(4, seed=seed)
        assert (rot6d_to_matrix(matrix_to_rot6d(m)) - m).abs().max() < 1e-5


class TestGeodesic:
    def test_identity_zero(self):
        assert geodesic_angle(torch.eye(3), torch.eye(3)) == 0

    def test_quarter_turn(self):
        ang = geodesic_angle(torch.eye(3), rot_z(math.pi / 2))
        assert abs(float(ang) - math.pi / 2) < 1e-6

    def test_symmetry(self):
        a, b = random_rotations(2, seed=3)
        assert torch.allclose(geodesic_angle(a, b), geodesic_angle(b, a))

    def test_range(self):
        m = random_rotations(100, seed=4)
        ang = geodesic_angle(m[:50], m[50:])
        assert (ang >= 0).all() and (ang <= math.pi + 1e-6).all()


class TestAxisRotations:
    def test_axis_angle_matches_named(self):
        for axis, named in [((1, 0, 0), rot_x), ((0, 1, 0), rot_y), ((0, 0, 1), rot_z)]:
            a = torch.tensor(0.7)
            m = axis_angle_to_matrix(torch.tensor(axis, dtype=torch.float), a)
            assert torch.allclose(m, named(a), atol=1e-6)

    def test_composition(self):
        m = rot_z(0.3) @ rot_z(0.4)
        assert torch.allclose(m, rot_z(0.7), atol=1e-6)


def two_bone_chain():
    return Skeleton(
        parents=[-1, 0, 1],
        rest_offsets=torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]]),
    )


class TestForwardKinematics:
    def test_identity_prefix_sums(self, skeleton):
        rots = torch.tensor(IDENTITY_6D).expand(skeleton.joint_count, 6)
        pose = Pose(torch.zeros(3), rots[0], rots[1:])
        pos = forward_kinematics(skeleton, pose)
        expected = torch.zeros(skeleton.joint_count, 3)
        for j in range(1, skeleton.joint_count):
            expected[j] = expected[skeleton.parents[j]] + skeleton.rest_offsets[j]
        assert torch.allclose(pos, expected, atol=1e-6)

    def test_two_bone_quarter_turn(self):
        # Root local rotation 90 degrees about z turns the whole (1,0,0)+(1,0,0)
        # chain into (0,1,0)+(0,1,0): end effector lands at (0,2,0).
        sk = two_bone_chain()
        rots = torch.tensor(IDENTITY_6D).repeat(3, 1)
        rots[0] = matrix_to_rot6d(rot_z(math.pi / 2))
        pose = Pose(torch.zeros(3), rots[0], rots[1:])
        pos = forward_kinematics(sk, pose)
        assert torch.allclose(pos[2], torch.tensor([0.0, 2.0, 0.0]), atol=1e-6)

    def test_small_angle_arc_length(self):
        # 1 degree at the root of a chain of total length 2 moves the end
        # effector by about L * pi / 180.
        sk = two_bone_chain()
        rots = torch.tensor(IDENTITY_6D).repeat(3, 1)
        rots[0] = matrix_to_rot6d(rot_z(math.pi / 180))
        pose = Pose(torch.zeros(3), rots[0], rots[1:])
        moved = forward_kinematics(sk, pose)[2]
        rest = torch.tensor([2.0, 0.0, 0.0])
        disp = float((moved - rest).norm())
        assert abs(disp - 2 * math.pi / 180) / (2 * math.pi / 180) < 0.05

    def test_y_rotation_equivariance(self, skeleton):
        g = torch.Generator().manual_seed(5)
        rots = matrix_to_rot6d(random_rotations(skeleton.joint_count, seed=6))
        root = torch.randn(3, generator=g)
        pose = Pose(root, rots[0], rots[1:])
        pos = forward_kinematics(skeleton, pose)
        r = rot_y(1.1)
        rot_pose = Pose(
            root @ r.T, matrix_to_rot6d(r @ rot6d_to_matrix(rots[0])), rots[1:]
        )
        rot_pos = forward_kinematics(skeleton, rot_pose)
        assert (rot_pos - pos @ r.T).abs().max() < 1e-6

    def test_translation_equivariance(self, skeleton):
        rots = matrix_to_rot6d(random_rotations(skeleton.joint_count, seed=7))
        v = torch.tensor([1.5, -0.25, 3.0])
        a = forward_kinematics(skeleton, Pose(torch.zeros(3), rots[0], rots[1:]))
        b = forward_kinematics(skeleton, Pose(v, rots[0], rots[1:]))
        assert (b - (a + v)).abs().max() < 1e-6

    def test_batched_matches_loop(self, skeleton):
        g = torch.Generator().manual_seed(8)
        t = 5
        rots = matrix_to_rot6d(
            random_rotations(t * skeleton.joint_count, seed=9)
        ).reshape(t, skeleton.joint_count, 6)
        root = torch.randn(t, 3, generator=g)
        batched = forward_kinematics_batch(skeleton, root, rots)
        singles = torch.stack(
            [
                forward_kinematics(skeleton, Pose(root[i], rots[i, 0], rots[i, 1:]))
                for i in range(t)
            ]
        )
        assert torch.allclose(batched, singles, atol=1e-6)

    def test_shape_check(self, skeleton):
        with pytest.raises(SkeletonMismatch):
            forward_kinematics_batch(skeleton, torch.zeros(1, 3), torch.zeros(1, 3, 6))


class TestRootRelative:
    def test_root_zeroed(self):
        pos = torch.randn(4, 5, 3)
        rel = root_relative(pos)
        assert torch.equal(rel[..., 0, :], torch.zeros(4, 3))

    def test_translation_invariance(self):
        pos = torch.randn(4, 5, 3)
        diff = root_relative(pos + 2.5) - root_relative(pos)
        assert diff.abs().max() < 1e-6

    def test_root_at_origin_identity(self):
        pos = torch.tensor([[0.0, 0, 0], [1.0, 2, 3]])
        assert torch.equal(root_relative(pos), pos)


class TestSkeleton:
    def test_default_height_is_one(self, skeleton):
        assert abs(skeleton.height() - 1.0) < 1e-6

    def test_token_count(self, skeleton):
        assert skeleton.joint_count == 22
        assert skeleton.token_count == 23

    def test_json_round_trip(self, skeleton, tmp_path):
        skeleton.save(tmp_path / "sk.json")
        loaded = Skeleton.load(tmp_path / "sk.json")
        assert loaded.parents == skeleton.parents
        assert loaded.names == skeleton.names
        assert torch.allclose(loaded.rest_offsets, skeleton.rest_offsets)

    def test_loader_resorts_topologically(self):
        # Same chain stored child-first; loader must re-sort and remap parents.
        obj = {
            "parents": [1, 2, -1],
            "rest_offsets": [[2.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]],
            "names": ["tip", "mid", "root"],
        }
        sk = Skeleton.from_json(obj)
        assert sk.parents == [-1, 0, 1]
        assert sk.names == ["root", "mid", "tip"]
        assert sk.rest_offsets[2].tolist() == [2.0, 0.0, 0.0]

    def test_bad_parent_order_rejected(self):
        with pytest.raises(SkeletonMismatch):
            Skeleton(parents=[-1, 2, 1], rest_offsets=torch.zeros(3, 3))

    def test_root_parent_must_be_minus_one(self):
        with pytest.raises(SkeletonMismatch):
            Skeleton(parents=[0, 0], rest_offsets=torch.zeros(2, 3))
