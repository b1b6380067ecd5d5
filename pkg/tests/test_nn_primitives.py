
import pytest
import torch

from prism.errors import OutOfRange, ShapeMismatch
from prism.nn_primitives import (
    AdaLayerNorm,
    CausalConv1d,
    JointAttention,
    TimestepEmbedder,
    grad_check,
    rope2d_rotate,
    sinusoidal_features,
    strided_causal_downsample,
)


class TestCausalConv:
    def test_output_length(self):
        conv = CausalConv1d(4, 8, 3)
        y, cache = conv(torch.randn(2, 10, 4))
        assert y.shape == (2, 10, 8)
        assert cache.shape == (2, 2, 4)

    def test_strided_output_length(self):
        conv = CausalConv1d(4, 8, 3, stride=2)
        y, _ = conv(torch.randn(2, 10, 4))
        assert y.shape == (2, 5, 8)

    def test_partial_window_repeat_pads(self):
        conv = CausalConv1d(1, 1, 3, stride=2)
        y, _ = conv(torch.randn(1, 7, 1))
        assert y.shape == (1, 4, 1)

    def test_causality_impulse_exhaustive(self):
        # Output frame j of a stride-s layer reads inputs <= (j+1)*s - 1.
        torch.manual_seed(0)
        for stride in (1, 2):
            conv = CausalConv1d(1, 1, 3, stride=stride).double()
            t = 32
            base, _ = conv(torch.zeros(1, t, 1, dtype=torch.float64))
            for i in range(t):
                x = torch.zeros(1, t, 1, dtype=torch.float64)
                x[0, i, 0] = 1.0
                y, _ = conv(x)
                changed = (y != base).squeeze()
                first = int(changed.nonzero().min()) if changed.any() else t
                assert (first + 1) * stride - 1 >= i, (stride, i, first)

    def test_streaming_equivalence(self):
        torch.manual_seed(1)
        conv = CausalConv1d(4, 4, 3, stride=2)
        x = torch.randn(1, 48, 4)
        full, _ = conv(x)
        cache = None
        parts = []
        for lo in range(0, 48, 16):
            y, cache = conv(x[:, lo : lo + 16], cache)
            parts.append(y)
        assert (torch.cat(parts, dim=1) - full).abs().max() == 0.0

    def test_pad_never_enters_cache(self):
        conv = CausalConv1d(1, 1, 3, stride=2)
        x = torch.arange(5.0).reshape(1, 5, 1)
        _, cache = conv(x)
        assert torch.equal(cache.squeeze(), torch.tensor([3.0, 4.0]))

    def test_shape_check(self):
        conv = CausalConv1d(4, 4, 3)
        with pytest.raises(ShapeMismatch):
            conv(torch.randn(2, 10, 5))


class TestStridedDownsample:
    def test_exact(self):
        x = torch.arange(8.0).unsqueeze(-1)
        assert strided_causal_downsample(x, 2).squeeze().tolist() == [1, 3, 5, 7]

    def test_partial_repeats_last(self):
        x = torch.arange(7.0).unsqueeze(-1)
        assert strided_causal_downsample(x, 2).squeeze().tolist() == [1, 3, 5, 6]


class TestJointAttention:
    def test_shape(self):
        attn = JointAttention(32, 4)
        x = torch.randn(3, 23, 32)
        assert attn(x).shape == (3, 23, 32)

    def test_permutation_equivariance(self):
        torch.manual_seed(2)
        attn = JointAttention(16, 2)
        x = torch.randn(1, 7, 16)
        perm = torch.randperm(7)
        assert (attn(x[:, perm]) - attn(x)[:, perm]).abs().max() < 1e-5

    def test_dim_head_mismatch(self):
        with pytest.raises(ShapeMismatch):
            JointAttention(30, 4)


class TestRope:
    def test_identity_at_origin(self):
        x = torch.randn(2, 5, 16)
        zero = torch.zeros(5)
        out = rope2d_rotate(x, zero, zero)
        assert (out - x).abs().max() < 1e-6

    def test_norm_preserved(self):
        x = torch.randn(2, 6, 16)
        t = torch.arange(6).float()
        j = torch.arange(6).float()
        out = rope2d_rotate(x, t, j)
        assert (out.norm(dim=-1) - x.norm(dim=-1)).abs().max() < 1e-5

    def test_relative_shift_invariance(self):
        # Dot products between rotated vectors depend only on position deltas.
        torch.manual_seed(3)
        q = torch.randn(1, 2, 16, dtype=torch.float64)
        t = torch.tensor([3.0, 7.0], dtype=torch.float64)
        j = torch.tensor([1.0, 4.0], dtype=torch.float64)
        a = rope2d_rotate(q, t, j)
        b = rope2d_rotate(q, t + 11, j + 5)
        dot_a = (a[0, 0] * a[0, 1]).sum()
        dot_b = (b[0, 0] * b[0, 1]).sum()
        assert abs(float(dot_a - dot_b)) < 1e-9

    def test_axes_independent(self):
        # The time half ignores the joint index and vice versa.
        x = torch.randn(1, 1, 16)
        t = torch.tensor([2.0])
        a = rope2d_rotate(x, t, torch.tensor([0.0]))
        b = rope2d_rotate(x, t, torch.tensor([9.0]))
        assert torch.equal(a[..., :8], b[..., :8])
        assert not torch.equal(a[..., 8:], b[..., 8:])

    def test_bad_head_dim(self):
        with pytest.raises(ShapeMismatch):
            rope2d_rotate(torch.randn(1, 2, 6), torch.zeros(2), torch.zeros(2))


class TestSinusoidal:
    def test_zero_timestep(self):
        f = sinusoidal_features(torch.zeros(1), 8)
        assert torch.equal(f[0, :4], torch.zeros(4))
        assert torch.equal(f[0, 4:], torch.ones(4))

    def test_range_check(self):
        with pytest.raises(OutOfRange):
            sinusoidal_features(torch.tensor([1.5]), 8)
        with pytest.raises(OutOfRange):
            sinusoidal_features(torch.tensor([-0.1]), 8)

    def test_distinguishes_timesteps(self):
        f = sinusoidal_features(torch.tensor([0.0, 0.5, 1.0]), 64)
        assert (f[0] - f[1]).abs().max() > 0.1
        assert (f[1] - f[2]).abs().max() > 0.1

    def test_embedder_shape(self):
        emb = TimestepEmbedder(32)
        assert emb(torch.rand(2, 5)).shape == (2, 5, 32)


class TestAdaLayerNorm:
    def test_zero_init_identity(self):
        ada = AdaLayerNorm(8, 4)
        x = torch.randn(2, 3, 8)
        emb = torch.randn(2, 3, 4)
        out = ada(x, emb, lambda h: h + 1.0)
        assert torch.equal(out, x)  # gate starts at zero

    def test_modulation_after_training_signal(self):
        ada = AdaLayerNorm(8, 4)
        with torch.no_grad():
            ada.mod.bias.fill_(0.5)
        x = torch.randn(2, 3, 8)
        emb = torch.randn(2, 3, 4)
        out = ada(x, emb, lambda h: h)
        assert not torch.allclose(out, x)

    def test_row_alignment_check(self):
        ada = AdaLayerNorm(8, 4)
        with pytest.raises(ShapeMismatch):
            ada.modulate(torch.randn(2, 3, 8), torch.randn(2, 4, 4))


class TestGradCheck:
    def test_quadratic_exact(self, f64):
        p = torch.randn(3, dtype=torch.float64, requires_grad=True)
        err = grad_check(lambda: (p ** 2).sum(), [p])
        assert err < 1e-7

    def test_detects_wrong_gradient(self, f64):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g.new_zeros(3)

        p = torch.randn(3, dtype=torch.float64, requires_grad=True) + 1.0
        err = grad_check(lambda: Wrong.apply(p), [p])
        assert err > 0.1
