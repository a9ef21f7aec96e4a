"""Forward noising, epsilon-regression losses, and the ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCondition, ShapeError, StepOutOfRange
from .nn import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule with precomputed cumulative products."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise StepOutOfRange("schedule needs T >= 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        if not ((betas > 0).all() and (betas < 1).all()):
            raise StepOutOfRange("betas must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise StepOutOfRange(f"t={t} outside [0, {self.T})")
        return t


@dataclass(frozen=True)
class DiffusionSample:
    """Noisy latent, the noise that produced it, and the step index."""

    z_t: np.ndarray
    eps: np.ndarray
    t: int


def add_noise(z0: np.ndarray, t: int, rng: np.random.Generator,
              schedule: NoiseSchedule) -> DiffusionSample:
    """Closed-form q(z_t | z0) draw; returns the noise for supervision."""
    t = schedule.check_t(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return DiffusionSample(z_t=z_t, eps=eps, t=t)


def mse_loss_t(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error as a tape node (training path)."""
    return ((eps_hat - eps) ** 2).mean()


def loss_stage1(model, sample: DiffusionSample, cond_latent: np.ndarray,
                cond_tokens: np.ndarray) -> float:
    """First-stage objective: epsilon regression with the first-frame latent
    concatenated and the multi-view token stream cross-attended."""
    if cond_latent is None:
        raise MissingCondition("stage-1 loss requires the first-frame conditioning latent")
    if cond_tokens is None:
        raise MissingCondition("stage-1 loss requires conditioning tokens")
    eps_hat = model.denoise(sample.z_t, cond_latent, cond_tokens, None, sample.t)
    return float(((eps_hat - sample.eps) ** 2).mean())


def loss_stage2(model, sample: DiffusionSample, cond_latent: np.ndarray,
                cond_tokens: np.ndarray, pose_feat: np.ndarray) -> float:
    """Second-stage objective: same regression with dense pose features."""
    if pose_feat is None:
        raise MissingCondition("stage-2 loss requires pose features")
    if cond_latent is None or cond_tokens is None:
        raise MissingCondition("stage-2 loss requires stage-1 conditioning too")
    eps_hat = model.denoise(sample.z_t, cond_latent, cond_tokens, pose_feat, sample.t)
    return float(((eps_hat - sample.eps) ** 2).mean())


def sample_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided descending timestep subset."""
    if steps < 1 or steps > T:
        raise StepOutOfRange(f"steps={steps} outside [1, T={T}]")
    if steps == 1:
        return np.array([T - 1])
    ts = np.round(np.linspace(T - 1, 0, steps)).astype(int)
    # rounding collisions are impossible for steps <= T but keep it strict
    ts = np.array(sorted(set(ts.tolist()), reverse=True))
    return ts


def sample(model, cond_latent: np.ndarray | None, cond_tokens: np.ndarray | None,
           pose_feat: np.ndarray | None, shape: tuple[int, int, int, int],
           steps: int, rng: np.random.Generator, schedule: NoiseSchedule,
           guidance: float = 1.0) -> np.ndarray:
    """DDPM ancestral sampling over a strided timestep subset.

    guidance != 1 mixes the conditional prediction with one whose token stream
    is dropped (zeroed, matching the training-time drop flag): eps = eps_drop
    + g * (eps_cond - eps_drop). The first-frame latent is never dropped (it
    carries the viewpoint).
    """
    z = rng.standard_normal(shape)
    ts = sample_timesteps(schedule.T, steps)
    ab = schedule.alpha_bar
    for i, t in enumerate(ts):
        eps_hat = model.denoise(z, cond_latent, cond_tokens, pose_feat, int(t))
        if guidance != 1.0 and cond_tokens is not None:
            eps_drop = model.denoise(z, cond_latent, np.zeros_like(cond_tokens),
                                     pose_feat, int(t))
            eps_hat = eps_drop + guidance * (eps_hat - eps_drop)
        abt = ab[t]
        x0 = (z - np.sqrt(1.0 - abt) * eps_hat) / np.sqrt(abt)
        if i + 1 == len(ts):
            z = x0
            break
        tp = ts[i + 1]
        abp = ab[tp]
        var = (1.0 - abp) / (1.0 - abt) * (1.0 - abt / abp)
        var = max(float(var), 0.0)
        mean = np.sqrt(abp) * x0 + np.sqrt(max(1.0 - abp - var, 0.0)) * eps_hat
        z = mean + np.sqrt(var) * rng.standard_normal(shape)
    if not np.isfinite(z).all():
        raise ShapeError("sampler produced non-finite values")
    return z
