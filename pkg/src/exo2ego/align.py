"""First-frame view alignment.

A spatiotemporal transformer maps the first-frame latents of the V exocentric
views, concatenated per view with their ray maps at latent resolution, to a
prediction of the first egocentric frame latent. The view axis plays the role
of time: each block runs attention across the spatial grid within every view,
then across the V views at every grid position, then a feed-forward. View
order information enters only through a depthwise position-encoding conv over
the view axis (PEG, non-causal); with it disabled the module is exactly
view-permutation invariant.

The output head is a learned query attending over the view axis per grid
position, projected to c_dim + 6 channels; the 6 trailing channels mirror the
ray-map layout and are emitted but not supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ViewCountMismatch
from .nn import (
    Attention,
    DepthwiseConv1d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    no_grad,
    softmax,
)


@dataclass(frozen=True)
class AlignConfig:
    dim: int = 512
    heads: int = 8
    num_blocks: int = 8
    dim_head: int = 64
    ffn_mult: float = 4.0
    c_dim: int = 16
    out_channels: int = 22
    dropout: float = 0.0
    use_peg: bool = True
    views: int = 4
    eps: float = 1e-6

    def __post_init__(self):
        if self.out_channels != self.c_dim + 6:
            raise ShapeError(f"out_channels must be c_dim+6, got {self.out_channels} != {self.c_dim}+6")
        if self.views < 1:
            raise ShapeError("views must be >= 1")
        if self.dropout != 0.0:
            raise ShapeError("dropout is fixed at 0.0 at desk scale")

    @staticmethod
    def small(**overrides) -> "AlignConfig":
        """CPU-friendly preset used by the training checks."""
        base = dict(dim=64, heads=4, num_blocks=2, dim_head=16, ffn_mult=2.0)
        base.update(overrides)
        return AlignConfig(**base)


@dataclass
class AlignInput:
    """One conditioning sample: V first-frame latents and their ray maps."""

    exo_first_latents: np.ndarray   # [V, c_dim, h, w]
    exo_pluckers: np.ndarray        # [V, 6, h, w]

    def __post_init__(self):
        a, b = self.exo_first_latents, self.exo_pluckers
        if a.ndim != 4 or b.ndim != 4 or b.shape[1] != 6:
            raise ShapeError(f"bad align input shapes {a.shape}, {b.shape}")
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"latents {a.shape} and ray maps {b.shape} disagree")


class AlignBlock(Module):
    def __init__(self, cfg: AlignConfig, rng: np.random.Generator):
        self.cfg = cfg
        res_scale = 0.5 / np.sqrt(cfg.num_blocks)
        self.peg = DepthwiseConv1d(cfg.dim, rng) if cfg.use_peg else None
        self.norm_s = LayerNorm(cfg.dim, eps=cfg.eps)
        self.attn_s = Attention(cfg.dim, cfg.heads, rng, dim_head=cfg.dim_head,
                                out_scale=res_scale)
        self.norm_t = LayerNorm(cfg.dim, eps=cfg.eps)
        self.attn_t = Attention(cfg.dim, cfg.heads, rng, dim_head=cfg.dim_head,
                                out_scale=res_scale)
        self.norm_f = LayerNorm(cfg.dim, eps=cfg.eps)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult, rng, out_scale=res_scale)

    def forward(self, x: Tensor) -> Tensor:
        """x: [B, V, P, d] with P the flattened spatial grid."""
        B, V, P, d = x.shape
        if self.peg is not None:
            x = x + self.peg(x.swapaxes(1, 2)).swapaxes(1, 2)
        x = x + self.attn_s(self.norm_s(x))                       # over P per view
        xt = x.swapaxes(1, 2)                                     # [B, P, V, d]
        xt = xt + self.attn_t(self.norm_t(xt))                    # over V per position
        x = xt.swapaxes(1, 2)
        x = x + self.ffn(self.norm_f(x))
        return x


class ViewAligner(Module):
    """Predicts the first ego-frame latent from V exo first frames + ray maps."""

    def __init__(self, cfg: AlignConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.c_dim + 6, cfg.dim, rng)
        self.blocks = [AlignBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.pool_query = Parameter(rng.normal(scale=1.0 / np.sqrt(cfg.dim), size=cfg.dim))
        self.pool_key = Linear(cfg.dim, cfg.dim, rng)
        self.pool_value = Linear(cfg.dim, cfg.dim, rng)
        self.out_norm = LayerNorm(cfg.dim, eps=cfg.eps)
        self.head = Linear(cfg.dim, cfg.out_channels, rng, scale=0.02)

    def forward_t(self, latents: Tensor, pluckers: Tensor) -> tuple[Tensor, Tensor]:
        """[B,V,c,h,w] + [B,V,6,h,w] -> predicted latent [B,1,c,h,w], aux [B,6,h,w]."""
        from .nn import concat

        B, V, c, h, w = latents.shape
        if V != self.cfg.views:
            raise ViewCountMismatch(f"model built for {self.cfg.views} views, got {V}")
        if c != self.cfg.c_dim:
            raise ShapeError(f"latents have {c} channels, config says {self.cfg.c_dim}")
        x = concat([latents, pluckers], axis=2)                   # [B, V, c+6, h, w]
        x = x.reshape(B, V, c + 6, h * w).swapaxes(2, 3)          # [B, V, P, c+6]
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        xt = x.swapaxes(1, 2)                                     # [B, P, V, d]
        k = self.pool_key(xt)
        v = self.pool_value(xt)
        q = self.pool_query.reshape(1, 1, 1, self.cfg.dim)
        scores = (k * q).sum(axis=-1, keepdims=True).swapaxes(-1, -2) * (1.0 / np.sqrt(self.cfg.dim))
        attn = softmax(scores, axis=-1)                           # [B, P, 1, V]
        pooled = (attn @ v).reshape(B, h * w, self.cfg.dim)
        out = self.head(self.out_norm(pooled))                    # [B, P, c+6]
        out = out.swapaxes(1, 2).reshape(B, self.cfg.out_channels, h, w)
        pred = out[:, :c].reshape(B, 1, c, h, w)
        aux = out[:, c:]
        return pred, aux

    def predict(self, inp: AlignInput) -> np.ndarray:
        """Inference on one sample; returns [1, c_dim, h, w]."""
        with no_grad():
            pred, _ = self.forward_t(as_tensor(inp.exo_first_latents[None]),
                                     as_tensor(inp.exo_pluckers[None]))
        return pred.data[0]


def align_forward(model: ViewAligner, inp: AlignInput) -> np.ndarray:
    """Spec-surface convenience: predicted first-frame latent [1, c_dim, h, w]."""
    return model.predict(inp)


def align_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def align_loss_t(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()
