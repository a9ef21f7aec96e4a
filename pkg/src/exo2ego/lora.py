"""Low-rank adapters on the self-attention projections.

attach() wraps the q/k/v/out projections of every self-attention module with
an additive low-rank branch and freezes the wrapped base weights; the up
projection starts at zero so attachment is exactly a no-op. merge() folds the
adapters back into plain layers. Cross-attention is never targeted: it is
trained in full during stage 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import TargetNotFound
from .nn import Linear, Module, Parameter, Tensor

SELF_ATTENTION_QKV_OUT = "self_attention_qkv_out"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8            # paper scale: 128
    alpha: float | None = None   # defaults to rank (paper: 128)
    target: str = SELF_ATTENTION_QKV_OUT

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.target != SELF_ATTENTION_QKV_OUT:
            raise TargetNotFound(f"unsupported adapter target {self.target!r}")

    @property
    def scaling(self) -> float:
        return (self.alpha if self.alpha is not None else self.rank) / self.rank


class LoraLinear(Module):
    """base(x) + scaling * (x @ down) @ up with frozen base weights."""

    def __init__(self, base: Linear, cfg: LoraConfig, rng: np.random.Generator):
        self.base = base
        self.scaling = cfg.scaling
        self.down = Parameter(rng.normal(0.0, 1.0 / np.sqrt(base.d_in), size=(base.d_in, cfg.rank)))
        self.up = Parameter(np.zeros((cfg.rank, base.d_out)))
        base.weight.requires_grad = False
        if base.bias is not None:
            base.bias.requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + ((x @ self.down) @ self.up) * self.scaling


def _self_attention_modules(model: Module) -> list[tuple[str, Module]]:
    # self-attention modules are the ones models name {...}self_attn / attn_s / attn_t
    hits = []
    for name, mod in model.named_modules():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("self_attn", "attn_s", "attn_t") and hasattr(mod, "wq"):
            hits.append((name, mod))
    return hits


def attach(model: Module, cfg: LoraConfig, rng: np.random.Generator) -> list[str]:
    """Wrap the q/k/v/out projections of every self-attention module.

    Returns the list of adapted projection paths; raises TargetNotFound when
    the model has no self-attention layers.
    """
    attention_modules = _self_attention_modules(model)
    if not attention_modules:
        raise TargetNotFound("model has no self-attention projections to adapt")
    adapted = []
    for name, attn in attention_modules:
        for proj in ("wq", "wk", "wv", "wo"):
            layer = getattr(attn, proj)
            if isinstance(layer, LoraLinear):
                continue
            setattr(attn, proj, LoraLinear(layer, cfg, rng))
            adapted.append(f"{name}.{proj}")
    return adapted


def merge(model: Module) -> list[str]:
    """Fold every adapter into its base layer and restore plain projections."""
    merged = []
    for name, mod in model.named_modules():
        for key, val in list(vars(mod).items()):
            if isinstance(val, LoraLinear):
                base = val.base
                base.weight.data = base.weight.data + val.scaling * (val.down.data @ val.up.data)
                base.weight.requires_grad = True
                if base.bias is not None:
                    base.bias.requires_grad = True
                setattr(mod, key, base)
                merged.append(f"{name}.{key}" if name else key)
    return merged


def adapter_parameter_names(model: Module) -> list[str]:
    return [n for n, _ in model.named_parameters()
            if n.endswith(".down") or n.endswith(".up")]


def adapter_state_dict(model: Module) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()
            if n.endswith(".down") or n.endswith(".up")}


def trainable_parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters() if p.requires_grad)


def save_adapter_checkpoint(path, model: Module, step: int = 0,
                            config: dict | None = None):
    """Adapter-only checkpoint: the down/up arrays plus a hash of the base
    weights they were trained against."""
    from .checkpoint import save_checkpoint

    state = adapter_state_dict(model)
    if not state:
        raise TargetNotFound("model has no adapters to checkpoint")
    return save_checkpoint(path, kind="lora_adapter", config=config or {},
                           step=step, params=state,
                           extra={"base_hash": base_weight_hash(model)})


def load_adapter_checkpoint(path, model: Module) -> int:
    """Load adapter arrays into an attached model; returns the stored step.

    Refuses to load when the target model's base weights do not match the
    hash the adapters were trained against.
    """
    from .checkpoint import load_checkpoint
    from .errors import MissingPrerequisite

    ckpt = load_checkpoint(path)
    if ckpt.kind != "lora_adapter":
        raise MissingPrerequisite(f"{path} is a {ckpt.kind!r} checkpoint, not adapters")
    if ckpt.extra.get("base_hash") != base_weight_hash(model):
        raise MissingPrerequisite("adapter checkpoint was trained against different base weights")
    own = dict(model.named_parameters())
    for name, arr in ckpt.params.items():
        if name not in own:
            raise MissingPrerequisite(f"model has no adapter parameter {name}")
        own[name].data = np.array(arr, dtype=np.float64)
    return ckpt.step


def base_weight_hash(model: Module) -> str:
    """Content hash over all non-adapter parameters.

    Names are normalized (the '.base' segment the wrapper introduces is
    stripped) so the hash is identical before and after attach().
    """
    entries = []
    for name, p in model.named_parameters():
        if name.endswith(".down") or name.endswith(".up"):
            continue
        entries.append((name.replace(".base.", "."), p))
    h = hashlib.sha256()
    for name, p in sorted(entries):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
