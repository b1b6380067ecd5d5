"""Differentiable building blocks shared by the VAE and the DiT.

Everything temporal is strictly causal: output frame i never sees input
frames > i. Streaming works by carrying a per-layer cache of the trailing
kernel_size - 1 input frames; chunked application with carried caches is
elementwise identical to a single full pass (chunk lengths must be
multiples of the stride for strided layers).
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import NonFinite, OutOfRange, ShapeMismatch

ROPE_TIME_BASE = 10000.0
ROPE_JOINT_BASE = 100.0


class CausalConv1d(nn.Module):
    """1D convolution over time with left-only receptive field.

    Input (B, T, C_in) -> output (B, ceil(T / stride), C_out). Output
    frame j is computed from input frames <= (j + 1) * stride - 1. A
    partial final window is right-padded by repeating the last frame;
    pad frames never enter the streaming cache.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size)

    def forward(self, x: Tensor, cache: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.conv.in_channels:
            raise ShapeMismatch(
                f"expected (B, T, {self.conv.in_channels}), got {tuple(x.shape)}"
            )
        b, t, _ = x.shape
        k, s = self.kernel_size, self.stride
        if cache is None:
            cache = x.new_zeros(b, k - 1, x.shape[-1])
        ext = torch.cat([cache, x], dim=1) if k > 1 else x
        new_cache = ext[:, ext.shape[1] - (k - 1):] if k > 1 else x.new_zeros(b, 0, x.shape[-1])
        if t % s != 0:
            pad = ext[:, -1:].expand(b, s - t % s, ext.shape[-1])
            ext = torch.cat([ext, pad], dim=1)
        y = self.conv(ext.transpose(1, 2)).transpose(1, 2)
        if s > 1:
            y = y[:, s - 1 :: s]
        return y, new_cache


def strided_causal_downsample(x: Tensor, stride: int) -> Tensor:
    """Keep the last frame of each stride-window: (T, C) -> (ceil(T/s), C).

    Output frame j reads input frame min(T - 1, (j + 1) * s - 1), i.e. a
    partial final window repeats the last frame.
    """
    t = x.shape[0]
    out_len = -(-t // stride)
    idx = torch.arange(out_len) * stride + stride - 1
    return x[idx.clamp_max(t - 1)]


class JointAttention(nn.Module):
    """Multi-head self-attention over the K joint tokens of one frame.

    No positional term: slot identity comes from learned per-slot
    embeddings added upstream, so the layer itself is permutation
    equivariant.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, k, c = x.shape
        q, kk, v = self.qkv(x).chunk(3, dim=-1)
        q, kk, v = (
            t.reshape(b, k, self.heads, c // self.heads).transpose(1, 2) for t in (q, kk, v)
        )
        attn = torch.softmax(q @ kk.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, k, c)
        return self.out(y)


def _rope_angles(pos: Tensor, dim: int, base: float, dtype: torch.dtype) -> Tensor:
    # dim counts rotation pairs; frequencies are log-spaced in the base
    freqs = base ** (-torch.arange(dim, dtype=dtype) / dim)
    return pos.to(dtype).unsqueeze(-1) * freqs


def _rotate_pairs(x: Tensor, angles: Tensor) -> Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles), torch.sin(angles)
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def rope2d_rotate(
    x: Tensor,
    time_index: Tensor,
    joint_index: Tensor,
    time_base: float = ROPE_TIME_BASE,
    joint_base: float = ROPE_JOINT_BASE,
) -> Tensor:
    """Rotary embedding over two axes.

    x: (..., N, d_head) with d_head divisible by 4. The first half of the
    head dim rotates with the temporal position, the second half with the
    joint index. Position (0, 0) is the identity; dot products depend only
    on per-axis position differences.
    """
    d = x.shape[-1]
    if d % 4 != 0:
        raise ShapeMismatch(f"d_head {d} must be divisible by 4")
    n = x.shape[-2]
    if time_index.shape[-1] != n or joint_index.shape[-1] != n:
        raise ShapeMismatch("position index length mismatch")
    half = d // 2
    t_ang = _rope_angles(time_index, half // 2, time_base, x.dtype)
    j_ang = _rope_angles(joint_index, half // 2, joint_base, x.dtype)
    return torch.cat(
        [_rotate_pairs(x[..., :half], t_ang), _rotate_pairs(x[..., half:], j_ang)], dim=-1
    )


def sinusoidal_features(t: Tensor, dim: int, max_freq: float = 1000.0) -> Tensor:
    """sin/cos(t * w_i) with log-spaced w in [1, max_freq]; t in [0, 1]."""
    if ((t < 0) | (t > 1)).any():
        raise OutOfRange("timestep outside [0, 1]")
    half = dim // 2
    exponents = torch.arange(half, dtype=t.dtype) / max(half - 1, 1)
    omega = max_freq ** exponents
    ang = t.unsqueeze(-1) * omega
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal projection of a scalar timestep followed by a 2-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_features(t, self.freq_dim))


class AdaLayerNorm(nn.Module):
    """Per-token (scale, shift, gate) modulation around a residual sub-block.

    y = x + gate * f(LN(x) * (1 + scale) + shift), with LN affine-free and
    the modulation projection zero-initialized so fresh blocks are
    identity maps.
    """

    def __init__(self, dim: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.mod = nn.Linear(emb_dim, 3 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def modulate(self, x: Tensor, emb: Tensor) -> tuple[Tensor, Tensor]:
        if emb.shape[:-1] != x.shape[:-1]:
            raise ShapeMismatch("embedding rows must align with token rows")
        scale, shift, gate = self.mod(emb).chunk(3, dim=-1)
        return self.norm(x) * (1 + scale) + shift, gate

    def forward(self, x: Tensor, emb: Tensor, f) -> Tensor:
        h, gate = self.modulate(x, emb)
        return x + gate * f(h)


def grad_check(fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn() must return a scalar computed from the (f64, requires_grad)
    tensors in params. Error per element: |ga - gfd| / max(1, |ga|, |gfd|).
    """
    out = fn()
    if not torch.isfinite(out):
        raise NonFinite("non-finite output in grad_check")
    analytic = torch.autograd.grad(out, params, allow_unused=False)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.detach().reshape(-1)
        ga = ga.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gfd = (hi - lo) / (2 * eps)
            if not math.isfinite(gfd):
                raise NonFinite("non-finite finite difference")
            denom = max(1.0, abs(ga[i].item()), abs(gfd))
            worst = max(worst, abs(ga[i].item() - gfd) / denom)
    return worst
