"""Causal joint-factorized motion VAE.

Encoder: three residual blocks alternating strictly causal temporal
convolutions (each joint slot is an independent time series) with joint
self-attention within a frame. Two stride-2 transitions give a temporal
compression of 4, so T frames become T' = ceil(T / 4) latent frames of
D channels per token slot. The decoder mirrors the encoder with
nearest-repeat upsampling followed by causal convolutions, which keeps
decoding strictly causal as well.

Both directions accept per-layer streaming caches; chunked processing
with carried caches matches a one-shot pass (chunk lengths must be
multiples of 4 on the encoder side).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import NonFinite, ShapeMismatch
from .kinematics import Skeleton, forward_kinematics_batch, rot6d_valid_mask, root_relative
from .motion_repr import MotionGrid, augment_xz, rollout_trajectory
from .nn_primitives import CausalConv1d, JointAttention

LOGVAR_MIN, LOGVAR_MAX = -20.0, 10.0
DOWNSAMPLE = 4


@dataclass
class VaeConfig:
    token_count: int = 23
    latent_dim: int = 16
    widths: tuple[int, ...] = (64, 128, 128)
    heads: int = 4
    kernel: int = 3
    # Internal scale for the root displacement channels. Displacements are
    # centimeter-sized while absolute positions span meters; scaling them
    # to per-second units inside the network keeps the speed signal from
    # drowning in the shared root token.
    delta_scale: float = 30.0

    def to_dict(self) -> dict:
        return {
            "token_count": self.token_count,
            "latent_dim": self.latent_dim,
            "widths": list(self.widths),
            "heads": self.heads,
            "kernel": self.kernel,
            "delta_scale": self.delta_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        return cls(
            token_count=d["token_count"],
            latent_dim=d["latent_dim"],
            widths=tuple(d["widths"]),
            heads=d["heads"],
            kernel=d["kernel"],
            delta_scale=d.get("delta_scale", 30.0),
        )


@dataclass
class VaeLossWeights:
    param: float = 1.0
    joints: float = 1.0
    traj: float = 1.0
    kl: float = 1e-4

    def __post_init__(self) -> None:
        if min(self.param, self.joints, self.traj, self.kl) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.param == 0 and self.joints == 0 and self.traj == 0:
            raise ValueError("at least one reconstruction weight must be positive")


@dataclass
class Posterior:
    mu: Tensor  # (B, T', K, D)
    logvar: Tensor

    def __post_init__(self) -> None:
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class CacheList:
    """Threads per-conv streaming caches through a forward pass in layer order."""

    def __init__(self, stored: list[Tensor] | None = None):
        self.stored = stored
        self.next: list[Tensor] = []
        self._i = 0

    def run(self, conv: CausalConv1d, x: Tensor) -> Tensor:
        cache = None if self.stored is None else self.stored[self._i]
        self._i += 1
        y, new_cache = conv(x, cache)
        self.next.append(new_cache)
        return y


class SlotLinear(nn.Module):
    """Per-slot linear map: each of the K token slots has its own weights.

    Slot 0 carries meter-scale root position and deltas while the other
    slots carry unit-scale rotation entries; a shared projection serves
    those regimes poorly, so input and output projections are per slot.
    """

    def __init__(self, slots: int, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(slots, in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(slots, out_features))
        nn.init.normal_(self.weight, std=in_features ** -0.5)

    def forward(self, x: Tensor) -> Tensor:
        return torch.einsum("btki,kio->btko", x, self.weight) + self.bias


class ResBlock(nn.Module):
    """Causal temporal conv residual + joint-attention residual.

    Per-slot identity embeddings are added before attention; attention
    alone is permutation equivariant and slot k must always mean the same
    body joint.
    """

    def __init__(self, width: int, heads: int, kernel: int, token_count: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.tconv = CausalConv1d(width, width, kernel)
        self.proj = nn.Linear(width, width)
        self.slot_emb = nn.Parameter(torch.zeros(token_count, width))
        nn.init.normal_(self.slot_emb, std=0.02)
        self.norm2 = nn.LayerNorm(width)
        self.attn = JointAttention(width, heads)
        self.act = nn.GELU()

    def forward(self, x: Tensor, caches: CacheList) -> Tensor:
        b, t, k, c = x.shape
        h = self.norm1(x).permute(0, 2, 1, 3).reshape(b * k, t, c)
        h = caches.run(self.tconv, h)
        h = self.proj(self.act(h))
        x = x + h.reshape(b, k, t, c).permute(0, 2, 1, 3)
        h = (self.norm2(x) + self.slot_emb).reshape(b * t, k, c)
        return x + self.attn(h).reshape(b, t, k, c)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.stem = SlotLinear(cfg.token_count, 6, w[0])
        self.block1 = ResBlock(w[0], cfg.heads, cfg.kernel, cfg.token_count)
        self.down1 = CausalConv1d(w[0], w[1], cfg.kernel, stride=2)
        self.block2 = ResBlock(w[1], cfg.heads, cfg.kernel, cfg.token_count)
        self.down2 = CausalConv1d(w[1], w[2], cfg.kernel, stride=2)
        self.block3 = ResBlock(w[2], cfg.heads, cfg.kernel, cfg.token_count)
        self.out_norm = nn.LayerNorm(w[2])
        self.head = SlotLinear(cfg.token_count, w[2], 2 * cfg.latent_dim)
        # Start the posterior sharp (sigma ~ exp(-3)). With a unit-variance
        # init the sampled latents are pure noise early in training and the
        # decoder learns to ignore them, which stalls reconstruction.
        with torch.no_grad():
            self.head.bias[:, cfg.latent_dim :] = -6.0

    def forward(self, x: Tensor, caches: CacheList) -> Tensor:
        b, t, k, _ = x.shape
        x = self.stem(x)
        x = self.block1(x, caches)
        x = self._down(self.down1, x, caches)
        x = self.block2(x, caches)
        x = self._down(self.down2, x, caches)
        x = self.block3(x, caches)
        return self.head(self.out_norm(x))

    @staticmethod
    def _down(conv: CausalConv1d, x: Tensor, caches: CacheList) -> Tensor:
        b, t, k, c = x.shape
        h = x.permute(0, 2, 1, 3).reshape(b * k, t, c)
        h = caches.run(conv, h)
        return h.reshape(b, k, h.shape[1], -1).permute(0, 2, 1, 3)


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.stem = SlotLinear(cfg.token_count, cfg.latent_dim, w[2])
        self.block1 = ResBlock(w[2], cfg.heads, cfg.kernel, cfg.token_count)
        self.up1 = CausalConv1d(w[2], w[1], cfg.kernel)
        self.block2 = ResBlock(w[1], cfg.heads, cfg.kernel, cfg.token_count)
        self.up2 = CausalConv1d(w[1], w[0], cfg.kernel)
        self.block3 = ResBlock(w[0], cfg.heads, cfg.kernel, cfg.token_count)
        self.out_norm = nn.LayerNorm(w[0])
        self.head = SlotLinear(cfg.token_count, w[0], 6)
        # Rotation slots start at the identity 6D. A head that starts near
        # zero columns decodes to near-degenerate rotations, and a sign
        # flip of the first column is a slow 180-degree trap to escape.
        with torch.no_grad():
            self.head.bias[1:, 0] = 1.0
            self.head.bias[1:, 4] = 1.0
        # Root velocity is linearly decodable from the root latent; a
        # direct path keeps the trunk from parking the displacement output
        # at zero when the data is diverse. Latent frame j only touches
        # output frames 4j..4j+3, so decoder causality is unchanged.
        self.delta_skip = nn.Linear(cfg.latent_dim, 3)

    def forward(self, z: Tensor, caches: CacheList) -> Tensor:
        x = self.stem(z)
        x = self.block1(x, caches)
        x = self._up(self.up1, x, caches)
        x = self.block2(x, caches)
        x = self._up(self.up2, x, caches)
        x = self.block3(x, caches)
        x = self.head(self.out_norm(x))
        skip = self.delta_skip(z[:, :, 0]).repeat_interleave(DOWNSAMPLE, dim=1)
        root = torch.cat([x[:, :, 0, :3], x[:, :, 0, 3:] + skip], dim=-1)
        return torch.cat([root.unsqueeze(2), x[:, :, 1:]], dim=2)

    @staticmethod
    def _up(conv: CausalConv1d, x: Tensor, caches: CacheList) -> Tensor:
        b, t, k, c = x.shape
        x = x.repeat_interleave(2, dim=1)  # nearest-repeat keeps causality
        h = x.permute(0, 2, 1, 3).reshape(b * k, 2 * t, c)
        h = caches.run(conv, h)
        return h.reshape(b, k, 2 * t, -1).permute(0, 2, 1, 3)


class MotionVae(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(
        self, x: Tensor, caches: list[Tensor] | None = None
    ) -> tuple[Posterior, list[Tensor]]:
        """x: (B, T, K, 6) -> posterior over (B, ceil(T/4), K, D)."""
        if x.ndim != 4 or x.shape[2] != self.cfg.token_count or x.shape[3] != 6:
            raise ShapeMismatch(
                f"expected (B, T, {self.cfg.token_count}, 6), got {tuple(x.shape)}"
            )
        # Latents are translation invariant in the ground plane: absolute
        # xz is dropped from the input (height stays, it is meaningful),
        # and the trajectory is recovered from the integrated
        # displacements on decode. The displacement channels are scaled to
        # per-second units so the speed signal is not drowned out by the
        # meter-scale entries sharing the root token.
        x = x.clone()
        x[:, :, 0, 0] = 0.0
        x[:, :, 0, 2] = 0.0
        x[:, :, 0, 3:] = x[:, :, 0, 3:] * self.cfg.delta_scale
        cl = CacheList(caches)
        out = self.encoder(x, cl)
        mu, logvar = out.chunk(2, dim=-1)
        return Posterior(mu=mu, logvar=logvar), cl.next

    def decode(
        self, z: Tensor, caches: list[Tensor] | None = None, out_frames: int | None = None
    ) -> tuple[Tensor, list[Tensor]]:
        """z: (B, T', K, D) -> grid tensor (B, 4*T', K, 6), trimmed to
        out_frames when given.

        The root position is emitted as the causal integral of the
        predicted frame-to-frame displacements. A fresh decode anchors the
        integral at the head's absolute frame-0 estimate; with carried
        caches the running position continues from the previous chunk, so
        chunked decoding stays elementwise identical to one-shot decoding.
        The last cache entry is the integrator state.
        """
        if z.ndim != 4 or z.shape[2] != self.cfg.token_count:
            raise ShapeMismatch(f"expected (B, T', {self.cfg.token_count}, D), got {tuple(z.shape)}")
        carry = None
        conv_caches = None
        if caches is not None:
            conv_caches = caches[:-1]
            carry = caches[-1]
        cl = CacheList(conv_caches)
        x = self.decoder(z, cl)
        deltas = x[:, :, 0, 3:] / self.cfg.delta_scale
        # The position readout is detached: the deltas are already trained
        # directly and through the trajectory rollout term, and a second
        # gradient path through this cumulative sum (amplified by sequence
        # length) destabilizes them.
        run = deltas.detach()
        if carry is None:
            anchor = x[:, 0, 0, :3] - run[:, 0]
        else:
            anchor = carry
        pos = anchor.unsqueeze(1) + torch.cumsum(run, dim=1)
        x = torch.cat([torch.cat([pos, deltas], dim=-1).unsqueeze(2), x[:, :, 1:]], dim=2)
        new_caches = cl.next + [pos[:, -1]]
        if out_frames is not None:
            x = x[:, :out_frames]
        return x, new_caches

    def encode_grid(self, grid: MotionGrid) -> Tensor:
        """Deterministic latents (posterior mean) for one clip: (T', K, D)."""
        with torch.no_grad():
            post, _ = self.encode(grid.data.unsqueeze(0))
        return post.mu[0]

    def reconstruct(self, grid: MotionGrid) -> MotionGrid:
        with torch.no_grad():
            post, _ = self.encode(grid.data.unsqueeze(0))
            recon, _ = self.decode(post.mu, out_frames=grid.frames)
        return MotionGrid(recon[0], grid.fps)


def reparameterize(post: Posterior, generator: torch.Generator | None = None) -> Tensor:
    eps = torch.empty_like(post.mu).normal_(generator=generator)
    return post.mu + torch.exp(0.5 * post.logvar) * eps


def vae_loss(
    gt: Tensor,
    recon: Tensor,
    post: Posterior,
    skeleton: Skeleton,
    weights: VaeLossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted four-term loss over batched grids (B, T, K, 6).

    param: L1 over every token entry. joints: mean L2 distance between
    root-relative FK positions of recon and gt (frames with degenerate
    reconstructed rotations are masked out and contribute through the
    param term only). traj: mean L2 between the cumsum rollout of the
    reconstructed deltas (anchored at the gt first-frame position) and
    the gt positions. kl: closed-form KL to the unit Gaussian.
    """
    if gt.shape != recon.shape:
        raise ShapeMismatch(f"gt {tuple(gt.shape)} vs recon {tuple(recon.shape)}")
    l_param = (recon - gt).abs().mean()

    rot_gt = gt[..., 1:, :]
    rot_rc = recon[..., 1:, :]
    valid = rot6d_valid_mask(rot_rc).all(dim=-1)  # (B, T)
    if valid.any():
        pos_gt = forward_kinematics_batch(
            skeleton, torch.zeros_like(gt[..., 0, :3]), rot_gt, strict=False
        )
        pos_rc = forward_kinematics_batch(
            skeleton, torch.zeros_like(gt[..., 0, :3]), rot_rc, strict=False
        )
        dist = (root_relative(pos_rc) - root_relative(pos_gt)).norm(dim=-1)  # (B, T, J)
        l_joints = dist[valid].mean()
    else:
        l_joints = gt.new_zeros(())

    p0 = gt[:, 0, 0, :3]
    traj = rollout_trajectory(recon[:, :, 0, 3:], p0)
    l_traj = (traj - gt[:, :, 0, :3]).norm(dim=-1).mean()

    l_kl = 0.5 * (torch.exp(post.logvar) + post.mu ** 2 - 1.0 - post.logvar).mean()

    total = (
        weights.param * l_param
        + weights.joints * l_joints
        + weights.traj * l_traj
        + weights.kl * l_kl
    )
    terms = {
        "param": float(l_param.detach()),
        "joints": float(l_joints.detach()),
        "traj": float(l_traj.detach()),
        "kl": float(l_kl.detach()),
        "total": float(total.detach()),
    }
    return total, terms


@dataclass
class VaeTrainConfig:
    steps: int = 200
    batch_size: int = 8
    batch_frames: int = 64
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    grad_clip: float = 1.0
    weights: VaeLossWeights = field(default_factory=VaeLossWeights)
    augment: bool = True
    warmup_steps: int = 100
    final_lr_frac: float = 0.02
    ema_decay: float = 0.999  # 0 disables weight averaging
    log_every: int = 25


def lr_at(step: int, cfg: "VaeTrainConfig") -> float:
    """Linear warmup to cfg.lr, then cosine decay to final_lr_frac * lr.

    The trajectory term backpropagates through a cumulative sum, which
    makes the root-delta gradients ill conditioned; without decay the
    root drift bounces around a noise floor proportional to the rate.
    """
    warmup = min(cfg.warmup_steps, cfg.steps)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(cfg.steps - warmup, 1)
    frac = (step - warmup) / span
    lo = cfg.lr * cfg.final_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def train_vae(
    clips: list[MotionGrid],
    skeleton: Skeleton,
    cfg: VaeConfig,
    train_cfg: VaeTrainConfig,
    seed: int = 0,
    log=None,
) -> tuple[MotionVae, list[dict]]:
    """Mini-batch Adam training with xz augmentation per sample.

    Returns the exponential moving average of the weights when
    train_cfg.ema_decay > 0; root drift integrates per-frame displacement
    noise over the whole clip, so point-in-time weights are much noisier
    in evaluation than their running average. Aborts on non-finite loss,
    restoring the last finite parameter state.
    """
    if not clips:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    model = MotionVae(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
    rng = torch.Generator().manual_seed(seed)
    history: list[dict] = []
    ema = None
    if train_cfg.ema_decay > 0:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    last_good = copy.deepcopy(model.state_dict())
    for step in range(train_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, train_cfg)
        batch = _sample_batch(clips, train_cfg, rng)
        loss, terms = vae_loss(
            batch, *_forward(model, batch, rng), skeleton, train_cfg.weights
        )
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise NonFinite(f"non-finite loss at step {step}; restored last checkpoint")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    ema[k].mul_(train_cfg.ema_decay).add_(v, alpha=1 - train_cfg.ema_decay)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            last_good = copy.deepcopy(model.state_dict())
            entry = {"step": step, **terms}
            history.append(entry)
            if log:
                log(entry)
    if ema is not None:
        model.load_state_dict(ema)
    return model, history


def _forward(model: MotionVae, batch: Tensor, rng: torch.Generator):
    post, _ = model.encode(batch)
    z = reparameterize(post, rng)
    recon, _ = model.decode(z, out_frames=batch.shape[1])
    return recon, post


def _sample_batch(clips: list[MotionGrid], train_cfg: VaeTrainConfig, rng: torch.Generator) -> Tensor:
    idx = torch.randint(len(clips), (train_cfg.batch_size,), generator=rng)
    samples = []
    t_batch = min(min(clips[i].frames for i in idx), train_cfg.batch_frames)
    for i in idx:
        g = clips[i]
        start = int(torch.randint(g.frames - t_batch + 1, (1,), generator=rng))
        window = MotionGrid(g.data[start : start + t_batch], g.fps)
        if train_cfg.augment:
            angle = float(torch.rand((), generator=rng)) * 2 * math.pi
            offset = (torch.rand(2, generator=rng) * 10 - 5).tolist()
            window = augment_xz(window, angle, offset)
        samples.append(window.data)
    return torch.stack(samples)
