"""Flow-matching transformer over the latent motion grid.

The model predicts the velocity of the rectified linear path
z_t = (1 - t) z0 + t z1 (z1 Gaussian noise, target velocity z1 - z0).
Every token carries its own timestep: conditioning tokens sit at t = 0 and
are never noised or denoised, which is what lets one model cover
text-to-motion, pose-conditioned generation and autoregressive chaining.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NonFinite, ShapeMismatch
from .motion_repr import MotionGrid, NormStats
from .motion_vae import DOWNSAMPLE, MotionVae
from .nn_primitives import AdaLayerNorm, TimestepEmbedder, rope2d_rotate
from .text_cond import EMBED_DIM, encode_text, null_embedding


@dataclass
class DitConfig:
    token_count: int = 23
    latent_dim: int = 16
    width: int = 256
    heads: int = 4
    blocks: int = 4
    text_dim: int = EMBED_DIM

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise ShapeMismatch("width must be divisible by heads")
        if (self.width // self.heads) % 4 != 0:
            raise ShapeMismatch("head dim must be divisible by 4 for 2D RoPE")

    def to_dict(self) -> dict:
        return {
            "token_count": self.token_count,
            "latent_dim": self.latent_dim,
            "width": self.width,
            "heads": self.heads,
            "blocks": self.blocks,
            "text_dim": self.text_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DitConfig":
        return cls(**{k: d[k] for k in (
            "token_count", "latent_dim", "width", "heads", "blocks", "text_dim")})


class DitBlock(nn.Module):
    """Self-attention (2D RoPE) + cross-attention to text + MLP, each wrapped
    in per-token adaLN modulation driven by the token's timestep embedding."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        w, h = cfg.width, cfg.heads
        self.heads = h
        self.attn_mod = AdaLayerNorm(w, w)
        self.qkv = nn.Linear(w, 3 * w)
        self.attn_out = nn.Linear(w, w)
        self.cross_mod = AdaLayerNorm(w, w)
        self.q_proj = nn.Linear(w, w)
        self.kv_proj = nn.Linear(cfg.text_dim, 2 * w)
        self.cross_out = nn.Linear(w, w)
        self.mlp_mod = AdaLayerNorm(w, w)
        self.mlp = nn.Sequential(nn.Linear(w, 4 * w), nn.GELU(), nn.Linear(4 * w, w))

    def forward(
        self,
        x: Tensor,
        emb: Tensor,
        text: Tensor,
        text_mask: Tensor | None,
        time_index: Tensor,
        joint_index: Tensor,
    ) -> Tensor:
        b, n, c = x.shape
        d = c // self.heads

        h, gate = self.attn_mod.modulate(x, emb)
        q, k, v = self.qkv(h).reshape(b, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        q = rope2d_rotate(q, time_index, joint_index)
        k = rope2d_rotate(k, time_index, joint_index)
        attn = F.scaled_dot_product_attention(q, k, v)
        x = x + gate * self.attn_out(attn.transpose(1, 2).reshape(b, n, c))

        h, gate = self.cross_mod.modulate(x, emb)
        q = self.q_proj(h).reshape(b, n, self.heads, d).transpose(1, 2)
        kk, vv = self.kv_proj(text).reshape(b, text.shape[1], 2, self.heads, d).permute(2, 0, 3, 1, 4)
        mask = None
        if text_mask is not None:
            mask = text_mask[:, None, None, :]
        cross = F.scaled_dot_product_attention(q, kk, vv, attn_mask=mask)
        x = x + gate * self.cross_out(cross.transpose(1, 2).reshape(b, n, c))

        h, gate = self.mlp_mod.modulate(x, emb)
        return x + gate * self.mlp(h)


class FlowModel(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, cfg.width)
        self.t_embed = TimestepEmbedder(cfg.width)
        self.blocks = nn.ModuleList(DitBlock(cfg) for _ in range(cfg.blocks))
        self.final_mod = AdaLayerNorm(cfg.width, cfg.width)
        self.out_proj = nn.Linear(cfg.width, cfg.latent_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(
        self, z_t: Tensor, t: Tensor, text: Tensor, text_mask: Tensor | None = None
    ) -> Tensor:
        """Velocity field. z_t (B, T', K, D), t (B, T', K), text (B, L, E)."""
        if z_t.shape[:-1] != t.shape:
            raise ShapeMismatch(f"z_t {tuple(z_t.shape)} vs t {tuple(t.shape)}")
        b, tp, k, _ = z_t.shape
        n = tp * k
        x = self.in_proj(z_t).reshape(b, n, -1)
        emb = self.t_embed(t.reshape(b, n))
        time_index = torch.arange(tp).repeat_interleave(k)
        joint_index = torch.arange(k).repeat(tp)
        for block in self.blocks:
            x = block(x, emb, text, text_mask, time_index, joint_index)
        h, _ = self.final_mod.modulate(x, emb)
        return self.out_proj(h).reshape(b, tp, k, -1)


def build_timestep_grid(
    batch: int, t_frames: int, tokens: int, t_star: Tensor, prefix_frames: Tensor
) -> Tensor:
    """(B, T', K) grid: t_star everywhere, exact 0 on the per-sample prefix."""
    t = t_star.reshape(batch, 1, 1).expand(batch, t_frames, tokens).clone()
    frame = torch.arange(t_frames).reshape(1, -1, 1)
    t[(frame < prefix_frames.reshape(batch, 1, 1)).expand_as(t)] = 0.0
    return t


def flow_loss(
    model: FlowModel,
    z0: Tensor,
    text: Tensor,
    generator: torch.Generator | None = None,
    prefix_frames: int | Tensor = 0,
    text_mask: Tensor | None = None,
) -> Tensor:
    """Velocity-matching loss with a shared t* over the free tokens.

    z0 (B, T', K, D) must already be normalized. Prefix latent frames ride
    at t = 0 with z_t = z0 there and are excluded from the loss; the noise
    drawn at those positions is multiplied by t = 0 and never contributes.
    """
    b, tp, k, _ = z0.shape
    prefix = torch.as_tensor(prefix_frames).expand(b)
    if (prefix >= tp).any() or (prefix < 0).any():
        raise ShapeMismatch("prefix must satisfy 0 <= prefix < T'")
    t_star = 1.0 - torch.rand(b, generator=generator, dtype=z0.dtype)  # (0, 1]
    t = build_timestep_grid(b, tp, k, t_star, prefix)
    z1 = torch.empty_like(z0).normal_(generator=generator)
    tt = t.unsqueeze(-1)
    z_t = (1.0 - tt) * z0 + tt * z1
    v = model(z_t, t, text, text_mask)
    sq = ((v - (z1 - z0)) ** 2).sum(-1)
    mask = t > 0
    return sq[mask].mean()


def sample(
    model: FlowModel,
    t_frames: int,
    text: Tensor,
    cond_latents: Tensor | None = None,
    cfg_scale: float = 5.0,
    steps: int = 50,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Euler integration of the velocity field from t=1 to t=0.

    cond_latents (T'_c, K, D), already normalized, occupy the first T'_c
    latent frames at t = 0 for the whole trajectory and are returned
    bitwise. Guidance: v = v_uncond + s * (v_cond - v_uncond); s = 0 and
    s = 1 short-circuit to the pure branches so the identities are exact.
    """
    if steps < 1:
        raise ShapeMismatch("steps must be >= 1")
    k = model.cfg.token_count
    d = model.cfg.latent_dim
    prefix = 0 if cond_latents is None else cond_latents.shape[0]
    if prefix >= t_frames:
        raise ShapeMismatch("condition must be shorter than the generation target")
    z = torch.empty(1, t_frames, k, d).normal_(generator=generator)
    if cond_latents is not None:
        z[0, :prefix] = cond_latents
    text = text.unsqueeze(0)
    null = null_embedding().unsqueeze(0)
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            tau = 1.0 - i * dt
            t = torch.full((1, t_frames, k), tau)
            t[0, :prefix] = 0.0
            if cfg_scale == 1.0:
                v = model(z, t, text)
            elif cfg_scale == 0.0:
                v = model(z, t, null)
            else:
                v_c = model(z, t, text)
                v_u = model(z, t, null)
                v = v_u + cfg_scale * (v_c - v_u)
            z = z - dt * v
            if cond_latents is not None:
                z[0, :prefix] = cond_latents
    return z[0]


def encode_condition(
    vae: MotionVae, stats: NormStats, cond: MotionGrid
) -> Tensor:
    """Normalized latent prefix for pose conditioning: (ceil(k/4), K, D).

    The encoder repeat-pads partial windows, so a condition shorter than a
    multiple of 4 frames is effectively held through the last window.
    """
    return stats.normalize(vae.encode_grid(cond))


def generate_motion(
    vae: MotionVae,
    model: FlowModel,
    stats: NormStats,
    text: str,
    frames: int,
    cond: MotionGrid | None = None,
    cfg_scale: float = 5.0,
    steps: int = 50,
    generator: torch.Generator | None = None,
    fps: float = 30.0,
) -> MotionGrid:
    """Text-to-motion, optionally conditioned on the first k poses."""
    if cond is not None and cond.frames >= frames:
        raise ShapeMismatch("condition must be shorter than the requested clip")
    t_frames = -(-frames // DOWNSAMPLE)
    cond_latents = None if cond is None else encode_condition(vae, stats, cond)
    z = sample(
        model,
        t_frames,
        encode_text(text),
        cond_latents=cond_latents,
        cfg_scale=cfg_scale,
        steps=steps,
        generator=generator,
    )
    with torch.no_grad():
        recon, _ = vae.decode(stats.denormalize(z).unsqueeze(0), out_frames=frames)
    return MotionGrid(recon[0], fps)


@dataclass
class DitTrainConfig:
    steps: int = 400
    batch_size: int = 8
    batch_frames: int = 64
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    grad_clip: float = 1.0
    text_dropout: float = 0.1
    prefix_prob: float = 0.5
    max_prefix: int = 3
    log_every: int = 25


def batch_text(texts: list[str]) -> tuple[Tensor, Tensor]:
    """Stack variable-length embeddings with a boolean key mask."""
    embs = [encode_text(t) for t in texts]
    l = max(e.shape[0] for e in embs)
    out = torch.zeros(len(embs), l, embs[0].shape[1])
    mask = torch.zeros(len(embs), l, dtype=torch.bool)
    for i, e in enumerate(embs):
        out[i, : e.shape[0]] = e
        mask[i, : e.shape[0]] = True
    return out, mask


def train_dit(
    vae: MotionVae,
    dataset: list[tuple[MotionGrid, str]],
    stats: NormStats,
    cfg: DitConfig,
    train_cfg: DitTrainConfig,
    seed: int = 0,
    model: FlowModel | None = None,
    log=None,
) -> tuple[FlowModel, list[dict]]:
    """Flow-matching training against a frozen VAE.

    Per sample: encode, normalize, draw the conditioning prefix (0 latent
    frames with probability prefix_prob, else 1..max_prefix), and drop the
    text for the CFG unconditional branch with probability text_dropout.
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    if model is None:
        model = FlowModel(cfg)
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
    rng = torch.Generator().manual_seed(seed)
    history: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())
    for step in range(train_cfg.steps):
        idx = torch.randint(len(dataset), (train_cfg.batch_size,), generator=rng)
        t_batch = min(
            min(dataset[i][0].frames for i in idx), train_cfg.batch_frames
        ) // DOWNSAMPLE * DOWNSAMPLE
        grids, texts = [], []
        for i in idx:
            g, txt = dataset[i]
            start = int(torch.randint(g.frames - t_batch + 1, (1,), generator=rng))
            grids.append(g.data[start : start + t_batch])
            drop = float(torch.rand((), generator=rng)) < train_cfg.text_dropout
            texts.append("" if drop else txt)
        batch = torch.stack(grids)
        with torch.no_grad():
            post, _ = vae.encode(batch)
        z0 = stats.normalize(post.mu)
        tp = z0.shape[1]
        prefix = torch.zeros(train_cfg.batch_size, dtype=torch.long)
        for b in range(train_cfg.batch_size):
            if float(torch.rand((), generator=rng)) >= train_cfg.prefix_prob:
                hi = min(train_cfg.max_prefix, tp - 1)
                if hi >= 1:
                    prefix[b] = 1 + int(torch.randint(hi, (1,), generator=rng))
        text, mask = batch_text(texts)
        loss = flow_loss(model, z0, text, rng, prefix, mask)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise NonFinite(f"non-finite loss at step {step}; restored last checkpoint")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            last_good = copy.deepcopy(model.state_dict())
            entry = {"step": step, "loss": float(loss.detach())}
            history.append(entry)
            if log:
                log(entry)
    return model, history


def compute_dataset_stats(vae: MotionVae, clips: list[MotionGrid]) -> NormStats:
    from .motion_repr import compute_latent_stats

    return compute_latent_stats([vae.encode_grid(g) for g in clips])
