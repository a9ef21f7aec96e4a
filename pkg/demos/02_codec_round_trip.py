"""Latent codec walkthrough.

The deterministic codec compresses a video [F, 3, H, W] to a latent
[1+(F-1)/4, 16, H/8, W/8] by blockwise cell means; decoding replicates the
cells back. Latent -> video -> latent is bit-exact, which keeps every
diffusion-side test free of codec error.
"""

import numpy as np

from exo2ego.codec import CodecConfig, decode, encode

cfg = CodecConfig()
print("compression factors:", (cfg.c_f, cfg.c_h, cfg.c_w), "latent channels:", cfg.c_dim)

# shape law
video = np.random.default_rng(0).uniform(-1, 1, size=(9, 3, 64, 64))
latent = encode(video, cfg)
print("video", video.shape, "-> latent", latent.shape)

# exact round trip in the latent -> video -> latent direction
lat = np.random.default_rng(1).uniform(-1, 1, size=(3, 16, 8, 8))
back = encode(decode(lat, cfg), cfg)
print("encode(decode(latent)) bit-exact:", np.array_equal(back, lat))

# video -> latent -> video is a band-limited projection (idempotent)
proj = decode(encode(video, cfg), cfg)
proj2 = decode(encode(proj, cfg), cfg)
print("projection idempotent:", np.array_equal(proj, proj2))

# smooth content survives projection well; white noise does not
yy, xx = np.meshgrid(np.linspace(-1, 1, 64), np.linspace(-1, 1, 64), indexing="ij")
smooth = np.stack([np.stack([yy * 0.5, xx * 0.5, (yy + xx) * 0.25])] * 9)
for name, v in (("white noise", video), ("smooth gradient", smooth)):
    rec = decode(encode(v, cfg), cfg)
    mse = ((rec - v) ** 2).mean()
    print(f"{name:16s} projection MSE = {mse:.5f}")

# the first frame is encoded alone, later frames in groups of four
v13 = np.random.default_rng(2).uniform(-1, 1, size=(13, 3, 16, 16))
l13 = encode(v13, cfg)
dropped = np.concatenate([v13[0:1], v13[5:]], axis=0)   # remove one group
print("temporal shift law holds:", np.array_equal(encode(dropped, cfg)[1:], l13[2:]))
