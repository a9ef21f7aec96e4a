import numpy as np
import pytest

from exo2ego.codec import CodecConfig
from exo2ego.synthdata import DatasetConfig, generate_split


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def codec_cfg():
    return CodecConfig()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 samples at 32px: enough for every pipeline test, rendered once."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = DatasetConfig(seed=7, resolution=32, frames=9)
    manifest = generate_split(12, cfg, root)
    return manifest


def gradcheck(fn, params, eps=1e-6, max_entries=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    fn() must rebuild the scalar loss from scratch on every call. When
    max_entries is set, a random subset of each parameter is probed.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(1234)
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.zeros(len(idxs))
        for j, i in enumerate(idxs):
            old = flat[i]
            flat[i] = old + eps
            f1 = fn().item()
            flat[i] = old - eps
            f0 = fn().item()
            flat[i] = old
            num[j] = (f1 - f0) / (2 * eps)
        ana_sel = ana.reshape(-1)[idxs]
        scale = max(np.abs(ana_sel).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana_sel - num).max(initial=0.0) / scale))
    return worst
