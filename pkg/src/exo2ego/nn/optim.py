"""Adam with decoupled weight decay, cosine schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from .modules import Parameter


class Adam:
    """Tracks first/second moments per parameter; decay is decoupled (applied
    to weights directly, not folded into the gradient)."""

    def __init__(self, params: list[tuple[str, Parameter]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        state = {"step_count": self.step_count}
        for name, _ in self.params:
            state[f"m::{name}"] = self.m[name].copy()
            state[f"v::{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        for name, _ in self.params:
            self.m[name] = np.array(state[f"m::{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v::{name}"], dtype=np.float64)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for _, p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def cosine_lr(step: int, base_lr: float, total_steps: int,
              warmup: int = 200, min_factor: float = 0.5) -> float:
    """Linear warmup then cosine decay to base_lr * min_factor."""
    if total_steps <= 0:
        return base_lr
    if step < warmup:
        return base_lr * (step + 1) / max(1, warmup)
    span = max(1, total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    lo = base_lr * min_factor
    return lo + 0.5 * (base_lr - lo) * (1.0 + np.cos(np.pi * frac))
