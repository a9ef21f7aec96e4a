"""Miniature video diffusion transformer.

Per block: self-attention over the video latent tokens, then cross-attention
against conditioning tokens, then a feed-forward, all residual. Timestep
conditioning uses adaptive layer-norm shift/scale computed per block from the
timestep embedding; positions enter through 3D rotary embeddings over the
(f', h', w') token layout. Output projections initialize small (residual
scaling) and the pose patch embedding initializes to exact zero; zeroing any
block's output projections makes that block an exact identity, which the
contract tests rely on.

Token layout: a latent [f, c, h, w] is patch-embedded with kernel = stride =
(1, 2, 2), giving L = f * (h/2) * (w/2) tokens ordered (f, h/2, w/2)
row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import MissingCondition, ShapeError
from .nn import (
    Attention,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    layer_norm,
    no_grad,
)


@dataclass(frozen=True)
class BackboneConfig:
    c_m: int = 256                 # hidden width (paper scale: 5120)
    num_blocks: int = 8            # paper scale: 40
    num_heads: int = 4             # paper scale: 40
    ffn_mult: float = 4.0
    patch_size: tuple[int, int, int] = (1, 2, 2)
    qk_norm: bool = True
    eps: float = 1e-6
    freq_dim: int = 256
    in_channels: int = 32          # noisy latent + first-frame conditioning latent
    out_channels: int = 16
    pose_channels: int = 0         # 96 when the pose-injection path is built

    def __post_init__(self):
        if self.c_m % self.num_heads:
            raise ShapeError("c_m must be divisible by num_heads")
        if self.patch_size != (1, 2, 2):
            raise ShapeError("patch size is fixed at (1, 2, 2)")


def token_count(f: int, h: int, w: int) -> int:
    """L = f * (h/2) * (w/2) for even spatial dims."""
    if h % 2 or w % 2:
        raise ShapeError(f"odd latent spatial dims ({h},{w}) cannot be patched (1,2,2)")
    return f * (h // 2) * (w // 2)


@dataclass
class HiddenState:
    """Token array plus the layout it was flattened from."""

    tokens: Tensor          # [B, L, c_m]
    layout: tuple[int, int, int]   # (f', h', w') with L = f'*h'*w'

    def __post_init__(self):
        f, h, w = self.layout
        if self.tokens.shape[-2] != f * h * w:
            raise ShapeError(f"L={self.tokens.shape[-2]} != layout product {f * h * w}")


def timestep_embedding(t: np.ndarray, freq_dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, [B, freq_dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = freq_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


@lru_cache(maxsize=64)
def rope_tables(layout: tuple[int, int, int], dim_head: int) -> tuple[np.ndarray, np.ndarray]:
    """Axial rotary tables over (f', h', w'): cos/sin of shape [L, rot/2].

    Each axis gets an even share of the head dim; leftover channels pass
    through unrotated.
    """
    f, h, w = layout
    per_axis = 2 * ((dim_head // 3) // 2)
    rot_half = 3 * per_axis // 2
    ff, hh, ww = np.meshgrid(np.arange(f), np.arange(h), np.arange(w), indexing="ij")
    positions = [ff.reshape(-1), hh.reshape(-1), ww.reshape(-1)]
    angles = []
    for pos in positions:
        half = per_axis // 2
        freqs = 1.0 / (10000.0 ** (np.arange(half) / max(1, half)))
        angles.append(pos[:, None] * freqs[None, :])
    ang = np.concatenate(angles, axis=1) if rot_half else np.zeros((f * h * w, 0))
    return np.cos(ang), np.sin(ang)


class TimestepMLP(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.freq_dim = cfg.freq_dim
        self.w1 = Linear(cfg.freq_dim, cfg.c_m, rng)
        self.w2 = Linear(cfg.c_m, cfg.c_m, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        feats = as_tensor(timestep_embedding(t, self.freq_dim))
        return self.w2(self.w1(feats).silu())


class DiTBlock(Module):
    """Self-attention + cross-attention + FFN with adaLN timestep modulation."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.eps = cfg.eps
        res_scale = 0.5 / np.sqrt(cfg.num_blocks)
        self.self_attn = Attention(cfg.c_m, cfg.num_heads, rng, qk_norm=cfg.qk_norm,
                                   out_scale=res_scale)
        self.cross_attn = Attention(cfg.c_m, cfg.num_heads, rng, qk_norm=cfg.qk_norm,
                                    out_scale=res_scale)
        self.cross_norm = LayerNorm(cfg.c_m, eps=cfg.eps, affine=True)
        self.ffn = FeedForward(cfg.c_m, cfg.ffn_mult, rng, out_scale=res_scale)
        self.mod = Linear(cfg.c_m, 4 * cfg.c_m, rng, scale=0.02)

    def forward(self, h: Tensor, cond: Tensor | None, t_emb: Tensor,
                rope: tuple[np.ndarray, np.ndarray] | None) -> Tensor:
        B, L, c = h.shape
        mod = self.mod(t_emb.silu()).reshape(B, 1, 4 * c)
        shift1, scale1 = mod[:, :, 0:c], mod[:, :, c:2 * c]
        shift2, scale2 = mod[:, :, 2 * c:3 * c], mod[:, :, 3 * c:4 * c]

        u = layer_norm(h, eps=self.eps) * (scale1 + 1.0) + shift1
        h = h + self.self_attn(u, rope=rope)
        if cond is not None and cond.shape[-2] > 0:
            h = h + self.cross_attn(self.cross_norm(h), kv=cond)
        u = layer_norm(h, eps=self.eps) * (scale2 + 1.0) + shift2
        h = h + self.ffn(u)
        return h


class Denoiser(Module):
    """Epsilon-prediction network over video latents.

    Input channels: noisy latent concatenated with the (temporally
    zero-padded) first-frame conditioning latent; when built with
    pose_channels > 0, the dense pose features enter through their own
    zero-initialized patch embedding added to the main one.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size[1] * cfg.patch_size[2]
        self.patch = Linear(cfg.in_channels * p, cfg.c_m, rng)
        self.pose_patch = (Linear(cfg.pose_channels * p, cfg.c_m, rng, zero_init=True)
                           if cfg.pose_channels else None)
        self.t_mlp = TimestepMLP(cfg, rng)
        self.blocks = [DiTBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.head_mod = Linear(cfg.c_m, 2 * cfg.c_m, rng, scale=0.02)
        self.head = Linear(cfg.c_m, cfg.out_channels * p, rng, scale=0.05)

    # -- patching -------------------------------------------------------------

    def _fold(self, x: Tensor) -> Tensor:
        """[B, f, c, h, w] -> [B, f*(h/2)*(w/2), c*4]"""
        B, f, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"odd latent spatial dims ({h},{w})")
        y = x.reshape(B, f, c, h // 2, 2, w // 2, 2)
        y = y.transpose((0, 1, 3, 5, 2, 4, 6))
        return y.reshape(B, f * (h // 2) * (w // 2), c * 4)

    def patchify(self, latent: Tensor) -> HiddenState:
        B, f, c, h, w = latent.shape
        tokens = self.patch(self._fold(latent))
        return HiddenState(tokens, (f, h // 2, w // 2))

    def unpatchify(self, state: HiddenState, channels: int) -> Tensor:
        f, h2, w2 = state.layout
        B = state.tokens.shape[0]
        y = state.tokens.reshape(B, f, h2, w2, channels, 2, 2)
        y = y.transpose((0, 1, 4, 2, 5, 3, 6))
        return y.reshape(B, f, channels, h2 * 2, w2 * 2)

    # -- forward ----------------------------------------------------------------

    def dit_block(self, index: int, state: HiddenState, cond: Tensor | None,
                  t_emb: Tensor) -> HiddenState:
        rope = rope_tables(state.layout, self.cfg.c_m // self.cfg.num_heads)
        out = self.blocks[index](state.tokens, cond, t_emb, rope)
        return HiddenState(out, state.layout)

    def forward_t(self, z_t: Tensor, cond_latent: Tensor | None,
                  cond_tokens: Tensor | None, pose_feat: Tensor | None,
                  t: np.ndarray) -> Tensor:
        """Tensor-in tensor-out epsilon prediction; all leading dims batched."""
        B, f, c, h, w = z_t.shape
        if cond_latent is None:
            cond_latent = Tensor(np.zeros((B, f, self.cfg.in_channels - c, h, w)))
        if cond_latent.shape[0] != B or cond_latent.shape[1] != f \
                or cond_latent.shape[3] != h or cond_latent.shape[4] != w:
            raise ShapeError(f"cond latent {cond_latent.shape} incompatible with z {z_t.shape}")
        x = concat([z_t, cond_latent], axis=2)
        if x.shape[2] != self.cfg.in_channels:
            raise ShapeError(f"{x.shape[2]} input channels, model built for {self.cfg.in_channels}")

        if self.pose_patch is not None:
            if pose_feat is None:
                raise MissingCondition("this model requires pose features")
            if pose_feat.shape[1] != f or pose_feat.shape[3] != h or pose_feat.shape[4] != w:
                raise ShapeError(f"pose features {pose_feat.shape} incompatible with latent grid")
            if pose_feat.shape[2] != self.cfg.pose_channels:
                raise ShapeError(f"pose features have {pose_feat.shape[2]} channels, "
                                 f"expected {self.cfg.pose_channels}")
        elif pose_feat is not None:
            raise MissingCondition("model was built without a pose path")

        state = self.patchify(x)
        if self.pose_patch is not None:
            pose_tokens = self.pose_patch(self._fold(pose_feat))
            state = HiddenState(state.tokens + pose_tokens, state.layout)

        t_emb = self.t_mlp(t if np.ndim(t) else np.full(B, t))
        rope = rope_tables(state.layout, self.cfg.c_m // self.cfg.num_heads)
        tokens = state.tokens
        for block in self.blocks:
            tokens = block(tokens, cond_tokens, t_emb, rope)

        mod = self.head_mod(t_emb.silu()).reshape(B, 1, 2 * self.cfg.c_m)
        shift, scale = mod[:, :, :self.cfg.c_m], mod[:, :, self.cfg.c_m:]
        tokens = layer_norm(tokens, eps=self.cfg.eps) * (scale + 1.0) + shift
        tokens = self.head(tokens)
        return self.unpatchify(HiddenState(tokens, state.layout), self.cfg.out_channels)

    def denoise(self, z_t: np.ndarray, cond_latent: np.ndarray | None = None,
                cond_tokens: np.ndarray | None = None,
                pose_feat: np.ndarray | None = None, t: int | np.ndarray = 0) -> np.ndarray:
        """Numpy convenience wrapper; accepts unbatched [f,c,h,w] inputs."""
        z_t = np.asarray(z_t, dtype=np.float64)
        squeeze = z_t.ndim == 4

        def lift(a, batched_ndim):
            if a is None:
                return None
            a = np.asarray(a, dtype=np.float64)
            if a.ndim == batched_ndim - 1:
                a = a[None]
            return as_tensor(a)

        with no_grad():
            out = self.forward_t(
                lift(z_t, 5),
                lift(cond_latent, 5),
                lift(cond_tokens, 3),
                lift(pose_feat, 5),
                t,
            ).data
        return out[0] if squeeze else out


def pad_first_frame(first: np.ndarray, f: int) -> np.ndarray:
    """Zero-pad a first-frame latent [.., 1, c, h, w] to f latent frames."""
    first = np.asarray(first, dtype=np.float64)
    if first.ndim == 4:
        one, c, h, w = first.shape
        if one != 1:
            raise ShapeError(f"first-frame latent must have 1 frame, got {one}")
        out = np.zeros((f, c, h, w))
        out[0] = first[0]
        return out
    B, one, c, h, w = first.shape
    if one != 1:
        raise ShapeError(f"first-frame latent must have 1 frame, got {one}")
    out = np.zeros((B, f, c, h, w))
    out[:, 0] = first[:, 0]
    return out
