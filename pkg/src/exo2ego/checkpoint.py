"""Single-file checkpoint container.

An .npz holding named weight arrays plus a JSON header with a format version,
the config needed to rebuild the module tree, the step counter, and the RNG
state. Optimizer moments ride along under their own prefix so training resumes
bit-identically. Adapter-only checkpoints store just the adapter arrays keyed
to a hash of the base weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IOFailure

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    rng_state: dict | None
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, kind: str, config: dict, step: int,
                    params: dict[str, np.ndarray],
                    optimizer: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
        "param_names": sorted(params),
        "optimizer_scalars": {},
    }
    arrays = {}
    for name, arr in params.items():
        arrays[f"param::{name}"] = np.asarray(arr)
    if optimizer:
        for name, val in optimizer.items():
            if np.isscalar(val):
                header["optimizer_scalars"][name] = float(val)
            else:
                arrays[f"opt::{name}"] = np.asarray(val)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format_version") != FORMAT_VERSION:
                raise IOFailure(f"unsupported checkpoint version in {path}")
            params, optim = {}, {}
            for key in z.files:
                if key.startswith("param::"):
                    params[key[len("param::"):]] = z[key]
                elif key.startswith("opt::"):
                    optim[key[len("opt::"):]] = z[key]
    except (OSError, ValueError, KeyError) as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    optim.update(header.get("optimizer_scalars", {}))
    return Checkpoint(kind=header["kind"], config=header["config"], step=header["step"],
                      rng_state=header["rng_state"], params=params,
                      optimizer=optim, extra=header.get("extra", {}))


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    try:
        with Path(path).open("rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as e:
        raise IOFailure(f"cannot hash {path}: {e}") from e
    return h.hexdigest()


def state_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()
