"""Spatiotemporal video codec standing in for a pretrained 3D VAE.

Shape law (both modes): a video [F, C, H, W] with F = 1 + n*c_f maps to a
latent [f, c_dim, h, w] with f = 1 + (F-1)/c_f, h = H/c_h, w = W/c_w. The
first frame is encoded alone; every following group of c_f frames becomes one
latent frame.

Deterministic mode is the default and is exactly invertible in the direction
the diffusion stack needs: each latent channel is the mean over one cell of a
fixed partition of the (time, channel, y, x) group block, and decode replicates
cell values back. Cells have power-of-two sizes, so means of replicated
constants are exact in IEEE float and encode(decode(l)) == l bit-for-bit for
any latent within the video value range. decode(encode(v)) is the band-limited
projection of v onto piecewise-constant cells.

Learned mode is a small strided-conv codec with the same shape law whose
weights initialize at the deterministic partition maps, plus a zero-initialized
3x3 spatial refinement on the decoder output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import Linear, Module, Parameter, Tensor, as_tensor, no_grad
from .nn.modules import lecun_normal
from .nn.optim import Adam

Cell = tuple[int, tuple[int, int], tuple[int, int], tuple[int, int]]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CodecConfig:
    c_f: int = 4
    c_h: int = 8
    c_w: int = 8
    c_dim: int = 16
    channels: int = 3
    mode: str = "deterministic"

    def __post_init__(self):
        if min(self.c_f, self.c_h, self.c_w) < 1:
            raise ShapeError("compression factors must be >= 1")
        if self.mode not in ("deterministic", "learned"):
            raise ShapeError(f"unknown codec mode {self.mode!r}")
        if self.mode == "deterministic":
            per_frame = self.channels * self.c_h * self.c_w
            if per_frame % self.c_dim != 0:
                raise ShapeError(
                    f"deterministic mode needs c_dim to divide C*c_h*c_w "
                    f"({per_frame} % {self.c_dim} != 0)")
            if not all(_is_pow2(x) for x in (self.c_f, self.c_h, self.c_w)):
                raise ShapeError("deterministic mode needs power-of-two factors")
            if self.c_dim < self.channels:
                raise ShapeError("deterministic mode needs c_dim >= channel count")

    def latent_frames(self, F: int) -> int:
        if F < 1 or (F - 1) % self.c_f != 0:
            raise ShapeError(f"frame count {F} violates F = 1 (mod c_f={self.c_f})")
        return 1 + (F - 1) // self.c_f

    def latent_shape(self, F: int, H: int, W: int) -> tuple[int, int, int, int]:
        if H % self.c_h or W % self.c_w:
            raise ShapeError(f"spatial size ({H},{W}) not divisible by ({self.c_h},{self.c_w})")
        return (self.latent_frames(F), self.c_dim, H // self.c_h, W // self.c_w)

    def video_frames(self, f: int) -> int:
        return 1 + (f - 1) * self.c_f


def check_video(v: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 4:
        raise ShapeError(f"video must be [F,C,H,W], got {v.shape}")
    F, C, H, W = v.shape
    if C != cfg.channels:
        raise ShapeError(f"expected {cfg.channels} channels, got {C}")
    cfg.latent_shape(F, H, W)
    return v


def _partition(T: int, C: int, c_h: int, c_w: int, c_dim: int) -> list[Cell]:
    """Fixed partition of a (T, C, c_h, c_w) block into c_dim cells.

    Starts with one cell per channel, repeatedly halves the largest cell along
    its longest axis (spatial before temporal on ties). All extents stay powers
    of two. Layout order is (channel, t, y, x) lexicographic.
    """
    cells: list[Cell] = [(c, (0, T), (0, c_h), (0, c_w)) for c in range(C)]
    while len(cells) < c_dim:
        sizes = [(t[1] - t[0]) * (y[1] - y[0]) * (x[1] - x[0]) for _, t, y, x in cells]
        order = sorted(range(len(cells)), key=lambda i: (-sizes[i], cells[i]))
        i = order[0]
        c, t, y, x = cells[i]
        et, ey, ex = t[1] - t[0], y[1] - y[0], x[1] - x[0]
        if max(et, ey, ex) == 1:
            raise ShapeError("c_dim exceeds the number of elements in a group block")
        # split priority: y, then x, then t (keep temporal detail coarsest)
        if ey >= ex and ey >= et and ey > 1:
            mid = y[0] + ey // 2
            a, b = (c, t, (y[0], mid), x), (c, t, (mid, y[1]), x)
        elif ex >= et and ex > 1:
            mid = x[0] + ex // 2
            a, b = (c, t, y, (x[0], mid)), (c, t, y, (mid, x[1]))
        else:
            mid = t[0] + et // 2
            a, b = (c, (t[0], mid), y, x), (c, (mid, t[1]), y, x)
        cells[i:i + 1] = [a, b]
    return sorted(cells)


class _DeterministicMaps:
    """Precomputed per-config partition cells for the two group kinds."""

    _cache: dict[tuple, "_DeterministicMaps"] = {}

    def __init__(self, cfg: CodecConfig):
        self.first = _partition(1, cfg.channels, cfg.c_h, cfg.c_w, cfg.c_dim)
        self.group = _partition(cfg.c_f, cfg.channels, cfg.c_h, cfg.c_w, cfg.c_dim)

    @classmethod
    def get(cls, cfg: CodecConfig) -> "_DeterministicMaps":
        key = (cfg.c_f, cfg.c_h, cfg.c_w, cfg.c_dim, cfg.channels)
        if key not in cls._cache:
            cls._cache[key] = cls(cfg)
        return cls._cache[key]


def _exact_mean(cell: np.ndarray) -> np.ndarray:
    """Mean over all but the (h, w) axes of a [T', h, ys, w, xs] cell slice.

    Pairwise power-of-two folding: for cells holding replicated values every
    addition pairs equal numbers, so the result is exact in IEEE float. Cell
    sizes are powers of two by construction.
    """
    a = np.ascontiguousarray(cell.transpose(1, 3, 0, 2, 4))
    h, w = a.shape[:2]
    a = a.reshape(h, w, -1)
    n = a.shape[-1]
    while a.shape[-1] > 1:
        a = a[..., 0::2] + a[..., 1::2]
    return a[..., 0] / n


def _group_view(v: np.ndarray, cfg: CodecConfig, j: int) -> np.ndarray:
    """Frames of latent group j as [T, C, h, c_h, w, c_w]."""
    F, C, H, W = v.shape
    if j == 0:
        frames = v[0:1]
    else:
        lo = 1 + (j - 1) * cfg.c_f
        frames = v[lo:lo + cfg.c_f]
    T = frames.shape[0]
    return frames.reshape(T, C, H // cfg.c_h, cfg.c_h, W // cfg.c_w, cfg.c_w)


def encode(v: np.ndarray, cfg: CodecConfig, learned: "LearnedCodec | None" = None) -> np.ndarray:
    """Video [F,C,H,W] -> latent [f,c_dim,h,w]."""
    v = check_video(v, cfg)
    if cfg.mode == "learned":
        if learned is None:
            raise ShapeError("learned mode requires a LearnedCodec instance")
        return learned.encode(v)
    F, C, H, W = v.shape
    f, c_dim, h, w = cfg.latent_shape(F, H, W)
    maps = _DeterministicMaps.get(cfg)
    out = np.empty((f, c_dim, h, w))
    for j in range(f):
        block = _group_view(v, cfg, j)  # [T, C, h, c_h, w, c_w]
        cells = maps.first if j == 0 else maps.group
        for i, (c, (t0, t1), (y0, y1), (x0, x1)) in enumerate(cells):
            out[j, i] = _exact_mean(block[t0:t1, c, :, y0:y1, :, x0:x1])
    return out


def decode(l: np.ndarray, cfg: CodecConfig, learned: "LearnedCodec | None" = None) -> np.ndarray:
    """Latent [f,c_dim,h,w] -> video [F,C,H,W], clamped to [-1, 1]."""
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 4:
        raise ShapeError(f"latent must be [f,c_dim,h,w], got {l.shape}")
    f, c_dim, h, w = l.shape
    if c_dim != cfg.c_dim:
        raise ShapeError(f"latent has {c_dim} channels, config says {cfg.c_dim}")
    if cfg.mode == "learned":
        if learned is None:
            raise ShapeError("learned mode requires a LearnedCodec instance")
        return learned.decode(l)
    F = cfg.video_frames(f)
    H, W = h * cfg.c_h, w * cfg.c_w
    maps = _DeterministicMaps.get(cfg)
    out = np.empty((F, cfg.channels, H, W))
    blocked = out.reshape(F, cfg.channels, h, cfg.c_h, w, cfg.c_w)
    for j in range(f):
        cells = maps.first if j == 0 else maps.group
        if j == 0:
            target = blocked[0:1]
        else:
            lo = 1 + (j - 1) * cfg.c_f
            target = blocked[lo:lo + cfg.c_f]
        for i, (c, (t0, t1), (y0, y1), (x0, x1)) in enumerate(cells):
            target[t0:t1, c, :, y0:y1, :, x0:x1] = l[j, i][None, :, None, :, None]
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# learned mode
# ---------------------------------------------------------------------------

class LearnedCodec(Module):
    """Codec with a strided-conv encoder (kernel == stride, the deterministic
    partition as its initialization) and a decoder that lifts cells back to
    pixels followed by a small nonlinear 3x3 refinement stack whose last layer
    starts at zero, so training begins exactly at the linear codec."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator,
                 refine_width: int = 24):
        base = CodecConfig(cfg.c_f, cfg.c_h, cfg.c_w, cfg.c_dim, cfg.channels, "deterministic") \
            if _learnable_from_deterministic(cfg) else None
        self.cfg = cfg
        C, c_f, c_h, c_w, c_dim = cfg.channels, cfg.c_f, cfg.c_h, cfg.c_w, cfg.c_dim
        self.enc_first = Linear(C * c_h * c_w, c_dim, rng)
        self.enc_group = Linear(C * c_f * c_h * c_w, c_dim, rng)
        self.dec_first = Linear(c_dim, C * c_h * c_w, rng)
        self.dec_group = Linear(c_dim, C * c_f * c_h * c_w, rng)
        self.refine_in = Parameter(lecun_normal(rng, 9 * C, (9, C, refine_width)))
        self.refine_in_bias = Parameter(np.zeros(refine_width))
        self.refine_out = Parameter(np.zeros((9, refine_width, C)))
        self.refine_out_bias = Parameter(np.zeros(C))
        if base is not None:
            self._init_from_deterministic(base)

    def _init_from_deterministic(self, base: CodecConfig):
        maps = _DeterministicMaps.get(base)
        self._fill(maps.first, 1, self.enc_first, self.dec_first)
        self._fill(maps.group, base.c_f, self.enc_group, self.dec_group)

    def _fill(self, cells: list[Cell], T: int, enc: Linear, dec: Linear):
        C = self.cfg.channels
        c_h, c_w = self.cfg.c_h, self.cfg.c_w
        enc.weight.data[:] = 0.0
        dec.weight.data[:] = 0.0
        for i, (c, (t0, t1), (y0, y1), (x0, x1)) in enumerate(cells):
            size = (t1 - t0) * (y1 - y0) * (x1 - x0)
            for t in range(t0, t1):
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        flat = ((t * C + c) * c_h + y) * c_w + x
                        enc.weight.data[flat, i] = 1.0 / size
                        dec.weight.data[i, flat] = 1.0
        enc.bias.data[:] = 0.0
        dec.bias.data[:] = 0.0

    # flattening order within a block: (t, C, c_h, c_w), matching _fill

    def encode(self, v: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.encode_t(as_tensor(v)).data

    def decode(self, l: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.clip(self.decode_t(as_tensor(l)).data, -1.0, 1.0)

    def encode_t(self, v: Tensor) -> Tensor:
        cfg = self.cfg
        F, C, H, W = v.shape
        f = cfg.latent_frames(F)
        h, w = H // cfg.c_h, W // cfg.c_w
        outs = []
        for j in range(f):
            if j == 0:
                frames, enc, T = v[0:1], self.enc_first, 1
            else:
                lo = 1 + (j - 1) * cfg.c_f
                frames, enc, T = v[lo:lo + cfg.c_f], self.enc_group, cfg.c_f
            blocks = _blocks_t(frames, cfg)            # [h*w, T*C*c_h*c_w]
            lat = enc(blocks)                          # [h*w, c_dim]
            outs.append(lat.swapaxes(0, 1).reshape(1, cfg.c_dim, h, w))
        from .nn import concat
        return concat(outs, axis=0)

    def decode_t(self, l: Tensor) -> Tensor:
        cfg = self.cfg
        f, c_dim, h, w = l.shape
        from .nn import concat
        outs = []
        for j in range(f):
            dec = self.dec_first if j == 0 else self.dec_group
            T = 1 if j == 0 else cfg.c_f
            lat = l[j].reshape(c_dim, h * w).swapaxes(0, 1)   # [h*w, c_dim]
            flat = dec(lat)                                    # [h*w, T*C*chw]
            outs.append(_unblocks_t(flat, T, h, w, cfg))
        video = concat(outs, axis=0)
        hidden = _conv3x3_t(video, self.refine_in, self.refine_in_bias).gelu()
        residual = _conv3x3_t(hidden, self.refine_out, self.refine_out_bias)
        return video + residual

    def reconstruct(self, v: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(v))


def _learnable_from_deterministic(cfg: CodecConfig) -> bool:
    per_frame = cfg.channels * cfg.c_h * cfg.c_w
    return (per_frame % cfg.c_dim == 0 and cfg.c_dim >= cfg.channels
            and all(_is_pow2(x) for x in (cfg.c_f, cfg.c_h, cfg.c_w)))


def _blocks_t(frames: Tensor, cfg: CodecConfig) -> Tensor:
    T, C, H, W = frames.shape
    c_h, c_w = cfg.c_h, cfg.c_w
    h, w = H // c_h, W // c_w
    x = frames.reshape(T, C, h, c_h, w, c_w)
    x = x.transpose((2, 4, 0, 1, 3, 5))
    return x.reshape(h * w, T * C * c_h * c_w)


def _unblocks_t(flat: Tensor, T: int, h: int, w: int, cfg: CodecConfig) -> Tensor:
    C, c_h, c_w = cfg.channels, cfg.c_h, cfg.c_w
    x = flat.reshape(h, w, T, C, c_h, c_w)
    x = x.transpose((2, 3, 0, 4, 1, 5))
    return x.reshape(T, C, h * c_h, w * c_w)


def _conv3x3_t(video: Tensor, taps: Parameter, bias: Parameter) -> Tensor:
    """Zero-padded 3x3 spatial conv: [F, Cin, H, W] x [9, Cin, Cout] -> [F, Cout, H, W]."""
    from .nn import pad_axis
    F, C, H, W = video.shape
    padded = pad_axis(pad_axis(video, 2, 1, 1, "constant"), 3, 1, 1, "constant")
    out = None
    k = 0
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, :, dy:dy + H, dx:dx + W]           # [F, Cin, H, W]
            term = patch.transpose((0, 2, 3, 1)) @ taps[k]       # [F, H, W, Cout]
            out = term if out is None else out + term
            k += 1
    return (out + bias).transpose((0, 3, 1, 2))


def train_learned_codec(codec: LearnedCodec, videos: list[np.ndarray], steps: int,
                        lr: float = 3e-3, batch: int = 2,
                        rng: np.random.Generator | None = None) -> list[float]:
    """MSE reconstruction training; returns the loss curve."""
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(list(codec.named_parameters()), lr=lr, weight_decay=0.0)
    curve = []
    for step in range(steps):
        idx = rng.integers(0, len(videos), size=batch)
        codec.zero_grad()
        total = None
        for i in idx:
            v = as_tensor(videos[i])
            rec = codec.decode_t(codec.encode_t(v))
            err = ((rec - v) ** 2).mean() * (1.0 / batch)
            total = err if total is None else total + err
        total.backward()
        opt.step()
        curve.append(total.item())
    return curve
