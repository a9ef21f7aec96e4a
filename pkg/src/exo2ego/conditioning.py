"""The three conditioning pathways into the denoiser.

MultiExoCon: the V exo-video latents are concatenated along channels, patch
embedded with a 3D conv of kernel = stride = (1, 2, 2), and flattened into a
token stream of length f*h*w/4 that every block cross-attends to (this stream
replaces text tokens).

PoseInj: per-frame ray maps [F, 6, H, W] are pooled to an H/8 x W/8 grid and
run through a stack of causal temporal convolutions whose strided final layer
lands on the latent frame count, giving dense pose features [f, 96, H/8, W/8]
that are added to the denoiser input through a zero-initialized patch embed.

VAWAN: the baseline pathway concatenates all V exo latents with the noisy
latent along channels, with no token stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ViewCountMismatch
from .nn import CausalConv1d, Linear, Module, Tensor, as_tensor, no_grad


@dataclass
class ExoBundle:
    """The V exocentric clips, their fixed poses, and cached latents."""

    videos: np.ndarray          # [V, F, C, H, W]
    poses: list                 # V CameraPose (fixed per clip)
    latents: np.ndarray | None = None   # [V, f, c_dim, h, w] once encoded

    def __post_init__(self):
        v = np.asarray(self.videos)
        if v.ndim != 5:
            raise ShapeError(f"exo videos must be [V,F,C,H,W], got {v.shape}")
        if len(self.poses) != v.shape[0]:
            raise ViewCountMismatch(f"{len(self.poses)} poses for {v.shape[0]} videos")

    @property
    def num_views(self) -> int:
        return self.videos.shape[0]


class MultiExoCon(Module):
    """Patch embed over channel-stacked view latents, flattened to tokens."""

    def __init__(self, views: int, c_dim: int, c_m: int, rng: np.random.Generator):
        self.views = views
        self.c_dim = c_dim
        self.embed = Linear(views * c_dim * 4, c_m, rng)

    def forward_t(self, latents: Tensor) -> Tensor:
        """[B, V, f, c_dim, h, w] -> tokens [B, f*h*w/4, c_m]"""
        B, V, f, c, h, w = latents.shape
        if V != self.views:
            raise ViewCountMismatch(f"patch embed built for {self.views} views, got {V}")
        if c != self.c_dim:
            raise ShapeError(f"{c} latent channels, expected {self.c_dim}")
        if h % 2 or w % 2:
            raise ShapeError(f"odd latent dims ({h},{w})")
        x = latents.swapaxes(1, 2).reshape(B, f, V * c, h, w)
        y = x.reshape(B, f, V * c, h // 2, 2, w // 2, 2)
        y = y.transpose((0, 1, 3, 5, 2, 4, 6))
        y = y.reshape(B, f * (h // 2) * (w // 2), V * c * 4)
        return self.embed(y)

    def tokens(self, latents: np.ndarray) -> np.ndarray:
        """Numpy convenience for a single bundle: [V,f,c,h,w] -> [L_c, c_m]."""
        with no_grad():
            return self.forward_t(as_tensor(np.asarray(latents)[None])).data[0]


def multiexocon_tokens(embed: MultiExoCon, bundle: ExoBundle) -> np.ndarray:
    if bundle.latents is None:
        raise ShapeError("bundle latents not cached; encode the videos first")
    return embed.tokens(bundle.latents)


class PoseInj(Module):
    """Causal temporal compression of per-frame ray maps into dense features.

    Spatial 8x8 average pooling, then kernel-3 causal convs 6 -> 32 -> 64 -> 96
    per grid location, and a final stride that anchors output frame j at input
    frame j*c_f. Output frame j therefore depends only on input frames <= j*c_f
    (the last RGB frame aggregated into latent frame j).
    """

    def __init__(self, rng: np.random.Generator, c_f: int = 4,
                 channels: tuple[int, ...] = (6, 32, 64, 96), spatial_factor: int = 8):
        self.c_f = c_f
        self.spatial_factor = spatial_factor
        self.convs = [CausalConv1d(channels[i], channels[i + 1], 3, rng)
                      for i in range(len(channels) - 1)]
        self.out_channels = channels[-1]

    def forward_t(self, pooled: Tensor) -> Tensor:
        """[B, F, 6, S] (S flattened grid) -> [B, f, 96, S]"""
        B, F, c, S = pooled.shape
        if (F - 1) % self.c_f:
            raise ShapeError(f"frame count {F} violates F = 1 (mod {self.c_f})")
        x = pooled.transpose((0, 3, 1, 2)).reshape(B * S, F, c)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.gelu()
        x = x[:, ::self.c_f, :]                       # anchor frame 0, stride c_f
        f = 1 + (F - 1) // self.c_f
        x = x.reshape(B, S, f, self.out_channels).transpose((0, 2, 3, 1))
        return x

    def features(self, pluckers: np.ndarray) -> np.ndarray:
        """Numpy wrapper: [F,6,H,W] -> [f,96,H/8,W/8]."""
        with no_grad():
            return self.features_t(as_tensor(prepare_pose_grid(pluckers, self.spatial_factor)[None])).data[0]

    def features_t(self, pooled: Tensor) -> Tensor:
        """[B, F, 6, H8, W8] -> [B, f, 96, H8, W8]"""
        B, F, c, H8, W8 = pooled.shape
        flat = pooled.reshape(B, F, c, H8 * W8)
        out = self.forward_t(flat)
        return out.reshape(B, out.shape[1], self.out_channels, H8, W8)


def prepare_pose_grid(pluckers: np.ndarray, factor: int = 8) -> np.ndarray:
    """Average-pool a ray map [F,6,H,W] to the [F,6,H/f,W/f] grid."""
    p = np.asarray(pluckers, dtype=np.float64)
    if p.ndim != 4 or p.shape[1] != 6:
        raise ShapeError(f"ray map must be [F,6,H,W], got {p.shape}")
    F, c, H, W = p.shape
    if H % factor or W % factor:
        raise ShapeError(f"spatial dims ({H},{W}) not divisible by {factor}")
    return p.reshape(F, c, H // factor, factor, W // factor, factor).mean(axis=(3, 5))


def poseinj_features(stack: PoseInj, pluckers: np.ndarray) -> np.ndarray:
    return stack.features(pluckers)


def inject_pose(precursor: np.ndarray, pose_feat: np.ndarray) -> np.ndarray:
    """Channel-concatenate dense pose features onto a pre-patchify precursor.

    [f, c, h, w] + [f, 96, h, w] -> [f, c+96, h, w]; the denoiser realizes the
    same computation with its zero-initialized pose patch embedding, which
    keeps the extra input exactly neutral at stage-2 start.
    """
    a = np.asarray(precursor, dtype=np.float64)
    b = np.asarray(pose_feat, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("expected [f,c,h,w] arrays")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"pose features {b.shape} do not align with precursor {a.shape}")
    return np.concatenate([a, b], axis=1)


def vawan_condition(bundle: ExoBundle, z_t: np.ndarray) -> np.ndarray:
    """Baseline conditioning: concat the noisy latent with all view latents.

    [f, c, h, w] + [V, f, c_dim, h, w] -> [f, c + V*c_dim, h, w]
    """
    if bundle.latents is None:
        raise ShapeError("bundle latents not cached; encode the videos first")
    z = np.asarray(z_t, dtype=np.float64)
    lat = np.asarray(bundle.latents, dtype=np.float64)
    if z.ndim != 4 or lat.ndim != 5:
        raise ShapeError("expected z [f,c,h,w] and latents [V,f,c,h,w]")
    if lat.shape[1] != z.shape[0] or lat.shape[3:] != z.shape[2:]:
        raise ShapeError(f"view latents {lat.shape} do not align with z {z.shape}")
    V, f, c, h, w = lat.shape
    stacked = lat.transpose(1, 0, 2, 3, 4).reshape(f, V * c, h, w)
    return np.concatenate([z, stacked], axis=1)


def vawan_latents(latents: np.ndarray) -> np.ndarray:
    """[.., V, f, c, h, w] -> channel-stacked [.., f, V*c, h, w] (batched ok)."""
    lat = np.asarray(latents, dtype=np.float64)
    if lat.ndim == 5:
        V, f, c, h, w = lat.shape
        return lat.transpose(1, 0, 2, 3, 4).reshape(f, V * c, h, w)
    B, V, f, c, h, w = lat.shape
    return lat.transpose(0, 2, 1, 3, 4, 5).reshape(B, f, V * c, h, w)
