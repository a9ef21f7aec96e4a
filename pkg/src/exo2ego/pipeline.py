"""Config-driven orchestration of the three training stages, sampling,
evaluation, ablations, and experiment manifests.

Stage protocol:
  align             trains the first-frame view aligner (L1 on latents).
  stage1_multiexocon trains the denoiser conditioned on the token stream from
                    the V exo-video latents. Trainable: cross-attention (full),
                    the token patch embed, the desk-scale i/o plumbing (patch
                    embed, timestep MLP, modulation and output heads), and
                    low-rank adapters on self-attention. Self-attention and
                    FFN cores stay frozen (they stand in for the pretrained
                    backbone; adapters carry their adaptation).
  stage2_poseinj    continues from the stage-1 checkpoint with the dense pose
                    pathway added (zero-initialized, so step 0 reproduces the
                    stage-1 model exactly). Trainable: adapters, the pose conv
                    stack, and the pose patch embed.

All randomness is derived per (seed, purpose, step), so a resumed run
continues bit-identically without serializing generator state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffusion
from .align import AlignConfig, AlignInput, ViewAligner, align_loss_t
from .backbone import BackboneConfig, Denoiser, pad_first_frame
from .checkpoint import Checkpoint, file_hash, load_checkpoint, save_checkpoint
from .codec import CodecConfig, decode, encode
from .conditioning import MultiExoCon, PoseInj, prepare_pose_grid, vawan_latents
from .errors import ConfigError, MissingPrerequisite, NonFiniteLoss, ShapeError
from .geometry import downsample_plucker, plucker_embed, ray_pose
from .lora import LoraConfig, attach
from .metrics import MetricReport, evaluate_videos
from .nn import Module, as_tensor, no_grad
from .nn.optim import Adam, clip_grad_norm, cosine_lr
from .synthdata import SamplePair, load_manifest, load_sample

STAGES = ("align", "stage1_multiexocon", "stage2_poseinj")


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Independent stream keyed by (seed, tags...)."""
    ints = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        h = hashlib.sha256(str(tag).encode()).digest()
        ints.append(int.from_bytes(h[:4], "big"))
    return np.random.default_rng(np.random.SeedSequence(ints))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stage configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"c_m", "num_blocks", "num_heads", "ffn_mult", "qk_norm"}
_ALIGN_KEYS = {"dim", "heads", "num_blocks", "dim_head", "ffn_mult", "use_peg"}
_LORA_KEYS = {"rank", "alpha"}


@dataclass
class StageConfig:
    stage: str
    data_manifest: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup: int = 200
    min_lr_factor: float = 0.5
    grad_clip: float = 1.0
    eval_every: int = 0
    # diffusion stages
    timesteps: int = 1000
    cond_drop_prob: float = 0.0
    # ablation flags
    use_align: bool = True
    use_pose: bool = True
    views: int = 4
    gt_first_frame: bool = False
    train_whole: bool = False
    conditioning: str = "tokens"     # "tokens" (ours) or "vawan" (baseline)
    # prerequisites
    align_checkpoint: str = ""
    init_checkpoint: str = ""
    # sub-model dims
    model: dict = field(default_factory=lambda: {"c_m": 256, "num_blocks": 8,
                                                 "num_heads": 4, "ffn_mult": 4.0,
                                                 "qk_norm": True})
    align_model: dict = field(default_factory=lambda: {"dim": 512, "heads": 8,
                                                       "num_blocks": 8, "dim_head": 64,
                                                       "ffn_mult": 4.0, "use_peg": True})
    lora: dict = field(default_factory=lambda: {"rank": 8, "alpha": 8})

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.conditioning not in ("tokens", "vawan"):
            raise ConfigError(f"conditioning must be 'tokens' or 'vawan', got {self.conditioning!r}")
        if self.views not in (1, 4):
            raise ConfigError(f"views must be 1 or 4, got {self.views}")
        unknown = set(self.model) - _MODEL_KEYS
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        unknown = set(self.align_model) - _ALIGN_KEYS
        if unknown:
            raise ConfigError(f"unknown align_model keys: {sorted(unknown)}")
        unknown = set(self.lora) - _LORA_KEYS
        if unknown:
            raise ConfigError(f"unknown lora keys: {sorted(unknown)}")

    @staticmethod
    def from_dict(raw: dict, path: str = "config") -> "StageConfig":
        known = {f.name for f in StageConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        if "stage" not in raw:
            raise ConfigError(f"{path}: missing required key 'stage'")
        coerced = dict(raw)
        if "betas" in coerced:
            coerced["betas"] = tuple(coerced["betas"])
        try:
            return StageConfig(**coerced)
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def paper_preset(stage: str) -> "StageConfig":
        """Paper-scale hyperparameters (not runnable at desk scale)."""
        cfg = StageConfig(stage=stage, steps=100_000, lr=1e-4, warmup=200,
                          min_lr_factor=0.5, weight_decay=1e-4,
                          batch_size=128 if stage == "align" else 3,
                          model={"c_m": 5120, "num_blocks": 40, "num_heads": 40,
                                 "ffn_mult": 2.7, "qk_norm": True},
                          align_model={"dim": 512, "heads": 8, "num_blocks": 8,
                                       "dim_head": 64, "ffn_mult": 4.0, "use_peg": True},
                          lora={"rank": 128, "alpha": 128})
        return cfg


def load_config_file(path: str | Path) -> StageConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return StageConfig.from_dict(raw, path=str(path))


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

class GenerativeModel(Module):
    """Denoiser plus its conditioning submodules, checkpointable as one tree."""

    def __init__(self, arch: dict, rng: np.random.Generator):
        self.arch = dict(arch)
        c_dim = arch.get("c_dim", 16)
        views = arch.get("views", 4)
        mk = arch.get("model", {})
        if arch["conditioning"] == "vawan":
            in_channels = c_dim + views * c_dim
        else:
            in_channels = 2 * c_dim
        bcfg = BackboneConfig(c_m=mk.get("c_m", 256), num_blocks=mk.get("num_blocks", 8),
                              num_heads=mk.get("num_heads", 4), ffn_mult=mk.get("ffn_mult", 4.0),
                              qk_norm=mk.get("qk_norm", True), in_channels=in_channels,
                              out_channels=c_dim,
                              pose_channels=96 if arch.get("use_pose") else 0)
        self.denoiser = Denoiser(bcfg, rng)
        self.cond_embed = (MultiExoCon(views, c_dim, bcfg.c_m, rng)
                           if arch["conditioning"] == "tokens" else None)
        self.pose_stack = PoseInj(rng) if arch.get("use_pose") else None
        if arch.get("lora"):
            lcfg = LoraConfig(rank=arch["lora"].get("rank", 8), alpha=arch["lora"].get("alpha"))
            attach(self.denoiser, lcfg, rng_for(arch.get("lora_seed", 0), "lora-init"))

    def denoise(self, z_t, cond_latent=None, cond_tokens=None, pose_feat=None, t=0):
        return self.denoiser.denoise(z_t, cond_latent, cond_tokens, pose_feat, t)


def build_model(arch: dict, rng: np.random.Generator) -> GenerativeModel:
    return GenerativeModel(arch, rng)


def model_from_checkpoint(ckpt: Checkpoint) -> GenerativeModel:
    model = build_model(ckpt.config["arch"], rng_for(ckpt.config.get("seed", 0), "model-init"))
    model.load_state_dict(ckpt.params)
    return model


def load_partial(model: Module, state: dict[str, np.ndarray]) -> tuple[list[str], list[str]]:
    """Load the intersection of state into model; returns (missing, unexpected)."""
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    for name in set(own) & set(state):
        if own[name].data.shape != state[name].shape:
            raise ShapeError(f"parameter {name}: {state[name].shape} != {own[name].data.shape}")
        own[name].data = np.array(state[name], dtype=np.float64)
    return missing, unexpected


# ---------------------------------------------------------------------------
# trainable-set declaration and enforcement
# ---------------------------------------------------------------------------

def trainable_patterns(cfg: StageConfig) -> list[str]:
    """Name prefixes / fragments of the parameters a stage trains."""
    if cfg.stage == "align":
        return [""]  # the whole align model
    new_plumbing = ["denoiser.patch.", "denoiser.t_mlp.", "denoiser.head",
                    "denoiser.blocks.*.mod."]
    if cfg.stage == "stage1_multiexocon":
        pats = list(new_plumbing)
        if cfg.conditioning == "tokens":
            pats += ["cond_embed.", "denoiser.blocks.*.cross_attn.",
                     "denoiser.blocks.*.cross_norm."]
        if cfg.train_whole:
            pats += ["denoiser.blocks.*.self_attn.", "denoiser.blocks.*.ffn."]
        else:
            pats += ["denoiser.blocks.*.self_attn.*.down", "denoiser.blocks.*.self_attn.*.up"]
        return pats
    # stage2_poseinj
    pats = ["pose_stack.", "denoiser.pose_patch."]
    if cfg.train_whole:
        pats += ["denoiser.blocks.*.self_attn."]
    else:
        pats += ["denoiser.blocks.*.self_attn.*.down", "denoiser.blocks.*.self_attn.*.up"]
    return pats


def _matches(name: str, pattern: str) -> bool:
    if pattern == "":
        return True
    parts = pattern.split("*")
    pos = 0
    if not name.startswith(parts[0]):
        return False
    pos = len(parts[0])
    for part in parts[1:]:
        idx = name.find(part, pos)
        if idx < 0:
            return False
        pos = idx + len(part)
    return True


def apply_trainable_set(model: Module, patterns: list[str]) -> list[str]:
    """Freeze everything outside the declared set; returns trainable names."""
    trainable = []
    for name, p in model.named_parameters():
        if any(_matches(name, pat) for pat in patterns):
            p.requires_grad = True
            trainable.append(name)
        else:
            p.requires_grad = False
    return trainable


# ---------------------------------------------------------------------------
# dataset preparation (latents, ray maps, conditioning caches)
# ---------------------------------------------------------------------------

@dataclass
class PreparedSplit:
    ids: list[str]
    categories: list[str]
    exo_latents: np.ndarray       # [N, V, f, c, h, w]
    ego_latents: np.ndarray       # [N, f, c, h, w]
    align_pluckers: np.ndarray    # [N, V, 6, h, w] (first-frame, latent res)
    pose_grids: np.ndarray        # [N, F, 6, H/8, W/8]
    cond_first: np.ndarray | None = None   # [N, 1, c, h, w] once chosen


_PREP_CACHE: dict[tuple, PreparedSplit] = {}


def prepare_split(manifest_path: str | Path, split: str, codec: CodecConfig,
                  views: int = 4, view_seed: int = 0,
                  limit: int | None = None) -> PreparedSplit:
    """Encode every sample of a split and cache everything training needs.

    Results are memoized per (manifest, split, codec, views, seed); callers
    get a shallow copy whose fields may be reassigned, but the underlying
    arrays are shared and must not be mutated in place.
    """
    key = (str(Path(manifest_path).resolve()), split, codec, views, view_seed, limit)
    if key in _PREP_CACHE:
        import dataclasses
        return dataclasses.replace(_PREP_CACHE[key])
    prep = _prepare_split_uncached(manifest_path, split, codec, views, view_seed, limit)
    _PREP_CACHE[key] = prep
    import dataclasses
    return dataclasses.replace(prep)


def _prepare_split_uncached(manifest_path, split, codec, views, view_seed,
                            limit) -> PreparedSplit:
    recs = [r for r in load_manifest(manifest_path) if r["split"] == split]
    if limit is not None:
        recs = recs[:limit]
    if not recs:
        raise MissingPrerequisite(f"no '{split}' samples in {manifest_path}")
    ids, cats = [], []
    exo_l, ego_l, apl, pgr = [], [], [], []
    for rec in recs:
        s = load_sample(manifest_path, rec)
        if views == 1:
            pick = int(rng_for(view_seed, "view-pick", rec["sample_id"]).integers(0, s.exo.num_views))
            videos = s.exo.videos[pick:pick + 1]
            poses = [s.exo.poses[pick]]
        elif views == s.exo.num_views:
            videos, poses = s.exo.videos, s.exo.poses
        else:
            raise ShapeError(f"dataset has {s.exo.num_views} views, config wants {views}")
        exo_l.append(np.stack([encode(v, codec) for v in videos]))
        ego_l.append(encode(s.ego_video, codec))
        pl = []
        for pose in poses:
            rp = ray_pose(s.ego_poses[0], pose)
            pm = plucker_embed(rp, s.intrinsics, 1)
            pl.append(downsample_plucker(pm, codec.c_h)[0])
        apl.append(np.stack(pl))
        ref = poses[0]
        frame_poses = [ray_pose(p, ref) for p in s.ego_poses]
        pm = plucker_embed(frame_poses, s.intrinsics, len(frame_poses))
        pgr.append(prepare_pose_grid(pm, 8))
        ids.append(s.sample_id)
        cats.append(s.category)
    return PreparedSplit(ids=ids, categories=cats,
                         exo_latents=np.stack(exo_l), ego_latents=np.stack(ego_l),
                         align_pluckers=np.stack(apl), pose_grids=np.stack(pgr))


def first_frame_conditions(prep: PreparedSplit, cfg: StageConfig,
                           aligner: ViewAligner | None) -> np.ndarray:
    """Choose the first-frame conditioning latents for a split."""
    N, V, f, c, h, w = prep.exo_latents.shape
    if cfg.gt_first_frame:
        return prep.ego_latents[:, 0:1].copy()
    if not cfg.use_align:
        return np.zeros((N, 1, c, h, w))
    if aligner is None:
        raise MissingPrerequisite("use_align=true requires an align checkpoint")
    out = np.empty((N, 1, c, h, w))
    with no_grad():
        chunk = 32
        for lo in range(0, N, chunk):
            hi = min(N, lo + chunk)
            pred, _ = aligner.forward_t(as_tensor(prep.exo_latents[lo:hi, :, 0]),
                                        as_tensor(prep.align_pluckers[lo:hi]))
            out[lo:hi] = pred.data
    return out


# ---------------------------------------------------------------------------
# align stage
# ---------------------------------------------------------------------------

def _align_val_loss(model: ViewAligner, prep: PreparedSplit, cond: np.ndarray) -> float:
    total, n = 0.0, 0
    with no_grad():
        chunk = 32
        N = len(prep.ids)
        for lo in range(0, N, chunk):
            hi = min(N, lo + chunk)
            pred, _ = model.forward_t(as_tensor(prep.exo_latents[lo:hi, :, 0]),
                                      as_tensor(prep.align_pluckers[lo:hi]))
            total += float(np.abs(pred.data - cond[lo:hi]).sum())
            n += cond[lo:hi].size
    return total / n


def run_align_stage(cfg: StageConfig, codec: CodecConfig | None = None,
                    shuffle_poses: bool = False) -> dict:
    """Train the view aligner; returns {checkpoint, curve, val_init, val_final}."""
    if cfg.stage != "align":
        raise ConfigError("run_align_stage needs an 'align' stage config")
    codec = codec or CodecConfig()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = prepare_split(cfg.data_manifest, "train", codec, cfg.views, cfg.seed)
    val = prepare_split(cfg.data_manifest, "val", codec, cfg.views, cfg.seed)
    if shuffle_poses:
        perm_rng = rng_for(cfg.seed, "pose-shuffle")
        train.align_pluckers = train.align_pluckers[perm_rng.permutation(len(train.ids))]
        val.align_pluckers = val.align_pluckers[perm_rng.permutation(len(val.ids))]

    am = cfg.align_model
    acfg = AlignConfig(dim=am.get("dim", 512), heads=am.get("heads", 8),
                       num_blocks=am.get("num_blocks", 8), dim_head=am.get("dim_head", 64),
                       ffn_mult=am.get("ffn_mult", 4.0), use_peg=am.get("use_peg", True),
                       c_dim=codec.c_dim, out_channels=codec.c_dim + 6, views=cfg.views)
    model = ViewAligner(acfg, rng_for(cfg.seed, "align-init"))
    params = [(n, p) for n, p in model.named_parameters()]
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)

    targets = train.ego_latents[:, 0:1]
    val_targets = val.ego_latents[:, 0:1]
    val_init = _align_val_loss(model, val, val_targets)
    N = len(train.ids)
    curve = []
    val_curve = [(0, val_init)]
    for step in range(cfg.steps):
        idx = rng_for(cfg.seed, "batch", step).integers(0, N, size=cfg.batch_size)
        model.zero_grad()
        pred, _ = model.forward_t(as_tensor(train.exo_latents[idx, :, 0]),
                                  as_tensor(train.align_pluckers[idx]))
        loss = align_loss_t(pred, as_tensor(targets[idx]))
        val_now = loss.item()
        if not np.isfinite(val_now):
            raise NonFiniteLoss(f"align loss {val_now} at step {step}")
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr=cosine_lr(step, cfg.lr, cfg.steps, cfg.warmup, cfg.min_lr_factor))
        curve.append(val_now)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            val_curve.append((step + 1, _align_val_loss(model, val, val_targets)))
    val_final = _align_val_loss(model, val, val_targets)
    val_curve.append((cfg.steps, val_final))

    ckpt_path = out / "align.npz"
    save_checkpoint(ckpt_path, kind="align",
                    config={"align": asdict(acfg), "stage": cfg.to_dict(),
                            "codec": asdict(codec)},
                    step=cfg.steps, params=model.state_dict(),
                    optimizer=opt.state_dict(), rng_state={"seed": cfg.seed},
                    extra={"loss_curve": curve[-200:], "val_curve": val_curve,
                           "val_init": val_init, "val_final": val_final})
    return {"checkpoint": str(ckpt_path), "curve": curve, "val_curve": val_curve,
            "val_init": val_init, "val_final": val_final}


def aligner_from_checkpoint(path: str | Path) -> ViewAligner:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "align":
        raise MissingPrerequisite(f"{path} is a {ckpt.kind!r} checkpoint, not 'align'")
    acfg = AlignConfig(**ckpt.config["align"])
    model = ViewAligner(acfg, rng_for(0, "align-init"))
    model.load_state_dict(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# diffusion stages
# ---------------------------------------------------------------------------

def _arch_for(cfg: StageConfig, codec: CodecConfig) -> dict:
    return {
        "conditioning": cfg.conditioning,
        "views": cfg.views,
        "c_dim": codec.c_dim,
        "model": dict(cfg.model),
        "use_pose": cfg.stage == "stage2_poseinj" and cfg.use_pose,
        "lora": None if cfg.train_whole else dict(cfg.lora),
        "lora_seed": cfg.seed,
        "seed": cfg.seed,
    }


def _diffusion_batch_loss(model: GenerativeModel, cfg: StageConfig,
                          prep: PreparedSplit, idx: np.ndarray,
                          schedule: diffusion.NoiseSchedule, step: int,
                          train: bool = True):
    """Build one batch and return the scalar loss tensor."""
    z0 = prep.ego_latents[idx]
    B, f, c, h, w = z0.shape
    t = rng_for(cfg.seed, "t", step).integers(0, schedule.T, size=B)
    eps = rng_for(cfg.seed, "noise", step).standard_normal(z0.shape)
    ab = schedule.alpha_bar[t][:, None, None, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    if cfg.conditioning == "vawan":
        cond_latent = as_tensor(vawan_latents(prep.exo_latents[idx]))
        tokens = None
    else:
        cond_latent = as_tensor(pad_first_frame(prep.cond_first[idx], f))
        tokens = model.cond_embed.forward_t(as_tensor(prep.exo_latents[idx]))
        if cfg.cond_drop_prob > 0 and train:
            drop = rng_for(cfg.seed, "drop", step).uniform(size=B) < cfg.cond_drop_prob
            keep = np.ones((B, 1, 1))
            keep[drop] = 0.0
            tokens = tokens * keep

    pose_feat = None
    if model.pose_stack is not None:
        pose_feat = model.pose_stack.features_t(as_tensor(prep.pose_grids[idx]))

    eps_hat = model.denoiser.forward_t(as_tensor(z_t), cond_latent, tokens, pose_feat, t)
    return diffusion.mse_loss_t(eps_hat, eps)


def _val_diffusion_loss(model: GenerativeModel, cfg: StageConfig, prep: PreparedSplit,
                        schedule: diffusion.NoiseSchedule, batches: int = 4) -> float:
    losses = []
    with no_grad():
        for k in range(batches):
            idx = rng_for(cfg.seed, "val-batch", k).integers(0, len(prep.ids),
                                                             size=min(cfg.batch_size, len(prep.ids)))
            loss = _diffusion_batch_loss(model, cfg, prep, idx, schedule,
                                         step=10_000_000 + k, train=False)
            losses.append(loss.item())
    return float(np.mean(losses))


def run_diffusion_stage(cfg: StageConfig, codec: CodecConfig | None = None,
                        resume_from: str | Path | None = None) -> dict:
    """Train stage 1 or stage 2; returns paths and the loss curves."""
    if cfg.stage not in ("stage1_multiexocon", "stage2_poseinj"):
        raise ConfigError(f"not a diffusion stage: {cfg.stage}")
    codec = codec or CodecConfig()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    aligner = None
    if cfg.conditioning == "tokens" and not cfg.gt_first_frame and cfg.use_align:
        if not cfg.align_checkpoint:
            raise MissingPrerequisite("stage needs align_checkpoint "
                                      "(or gt_first_frame / use_align=false)")
        aligner = aligner_from_checkpoint(cfg.align_checkpoint)

    train = prepare_split(cfg.data_manifest, "train", codec, cfg.views, cfg.seed)
    val = prepare_split(cfg.data_manifest, "val", codec, cfg.views, cfg.seed)
    if cfg.conditioning == "tokens":
        train.cond_first = first_frame_conditions(train, cfg, aligner)
        val.cond_first = first_frame_conditions(val, cfg, aligner)

    arch = _arch_for(cfg, codec)
    model = build_model(arch, rng_for(cfg.seed, "model-init"))

    start_step = 0
    schedule = diffusion.NoiseSchedule(T=cfg.timesteps)
    if cfg.stage == "stage2_poseinj":
        if not cfg.init_checkpoint:
            raise MissingPrerequisite("stage2 requires init_checkpoint from stage1")
        prev = load_checkpoint(cfg.init_checkpoint)
        missing, unexpected = load_partial(model, prev.params)
        bad = [m for m in missing if not (m.startswith("pose_stack.")
                                          or m.startswith("denoiser.pose_patch."))]
        if bad or unexpected:
            raise MissingPrerequisite(f"stage1 checkpoint mismatch: missing={bad}, "
                                      f"unexpected={unexpected}")

    patterns = trainable_patterns(cfg)
    trainable = apply_trainable_set(model, patterns)
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)
    curve = []
    if resume_from is not None:
        prev = load_checkpoint(resume_from)
        model.load_state_dict(prev.params)
        opt.load_state_dict(prev.optimizer)
        start_step = prev.step
        curve = list(prev.extra.get("loss_curve_full", []))[:start_step]

    val_init = _val_diffusion_loss(model, cfg, val, schedule)
    val_curve = [(start_step, val_init)]
    for step in range(start_step, cfg.steps):
        idx = rng_for(cfg.seed, "batch", step).integers(0, len(train.ids), size=cfg.batch_size)
        model.zero_grad()
        loss = _diffusion_batch_loss(model, cfg, train, idx, schedule, step)
        val_now = loss.item()
        if not np.isfinite(val_now):
            raise NonFiniteLoss(f"{cfg.stage} loss {val_now} at step {step} "
                                f"(lr={cosine_lr(step, cfg.lr, cfg.steps, cfg.warmup, cfg.min_lr_factor):.2e})")
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr=cosine_lr(step, cfg.lr, cfg.steps, cfg.warmup, cfg.min_lr_factor))
        curve.append(val_now)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            val_curve.append((step + 1, _val_diffusion_loss(model, cfg, val, schedule)))
    val_final = _val_diffusion_loss(model, cfg, val, schedule)
    val_curve.append((cfg.steps, val_final))

    ckpt_path = out / f"{cfg.stage}.npz"
    save_checkpoint(ckpt_path, kind=cfg.stage,
                    config={"arch": arch, "stage": cfg.to_dict(), "codec": asdict(codec),
                            "seed": cfg.seed},
                    step=cfg.steps, params=model.state_dict(), optimizer=opt.state_dict(),
                    rng_state={"seed": cfg.seed},
                    extra={"loss_curve": curve[-200:], "loss_curve_full": curve,
                           "val_curve": val_curve, "val_init": val_init,
                           "val_final": val_final, "trainable": trainable})
    return {"checkpoint": str(ckpt_path), "curve": curve, "val_curve": val_curve,
            "val_init": val_init, "val_final": val_final, "trainable": trainable}


def run_stage(cfg: StageConfig, codec: CodecConfig | None = None,
              resume_from: str | Path | None = None) -> dict:
    if cfg.stage == "align":
        return run_align_stage(cfg, codec)
    return run_diffusion_stage(cfg, codec, resume_from)


# ---------------------------------------------------------------------------
# sampling and evaluation
# ---------------------------------------------------------------------------

def _conditioning_for_sample(model: GenerativeModel, ckpt_cfg: dict,
                             sample: SamplePair, codec: CodecConfig,
                             aligner: ViewAligner | None):
    stage_cfg = ckpt_cfg["stage"]
    views = stage_cfg["views"]
    if views == 1:
        pick = int(rng_for(stage_cfg["seed"], "view-pick", sample.sample_id)
                   .integers(0, sample.exo.num_views))
        videos = sample.exo.videos[pick:pick + 1]
        poses = [sample.exo.poses[pick]]
    else:
        videos, poses = sample.exo.videos, sample.exo.poses
    exo_lat = np.stack([encode(v, codec) for v in videos])
    f = exo_lat.shape[1]

    if stage_cfg["conditioning"] == "vawan":
        cond_latent = vawan_latents(exo_lat)
        tokens = None
    else:
        if stage_cfg["gt_first_frame"]:
            first = encode(sample.ego_video, codec)[0:1]
        elif stage_cfg["use_align"]:
            if aligner is None:
                raise MissingPrerequisite("checkpoint was trained with use_align; "
                                          "pass the align checkpoint to sampling")
            pl = []
            for pose in poses:
                rp = ray_pose(sample.ego_poses[0], pose)
                pm = plucker_embed(rp, sample.intrinsics, 1)
                pl.append(downsample_plucker(pm, codec.c_h)[0])
            first = aligner.predict(AlignInput(exo_lat[:, 0], np.stack(pl)))
        else:
            c, h, w = exo_lat.shape[2], exo_lat.shape[3], exo_lat.shape[4]
            first = np.zeros((1, c, h, w))
        cond_latent = pad_first_frame(first, f)
        tokens = model.cond_embed.tokens(exo_lat)

    pose_feat = None
    if model.pose_stack is not None:
        ref = poses[0]
        frame_poses = [ray_pose(p, ref) for p in sample.ego_poses]
        pm = plucker_embed(frame_poses, sample.intrinsics, len(frame_poses))
        pose_feat = model.pose_stack.features(pm)
    return cond_latent, tokens, pose_feat


@dataclass
class SamplerContext:
    """A loaded generative checkpoint ready to sample dataset items."""

    model: GenerativeModel
    codec: CodecConfig
    stage_cfg: dict
    aligner: ViewAligner | None
    ckpt_config: dict

    @staticmethod
    def load(checkpoint_path: str | Path,
             align_checkpoint: str | Path | None = None) -> "SamplerContext":
        ckpt = load_checkpoint(checkpoint_path)
        codec = CodecConfig(**ckpt.config["codec"])
        model = model_from_checkpoint(ckpt)
        stage_cfg = ckpt.config["stage"]
        aligner = None
        if (stage_cfg["conditioning"] == "tokens" and stage_cfg["use_align"]
                and not stage_cfg["gt_first_frame"]):
            path = align_checkpoint or stage_cfg.get("align_checkpoint")
            if not path:
                raise MissingPrerequisite("need an align checkpoint to sample this model")
            aligner = aligner_from_checkpoint(path)
        return SamplerContext(model=model, codec=codec, stage_cfg=stage_cfg,
                              aligner=aligner, ckpt_config=ckpt.config)

    def sample(self, sample: SamplePair, steps: int = 40, guidance: float = 1.0,
               seed: int = 0) -> np.ndarray:
        cond_latent, tokens, pose_feat = _conditioning_for_sample(
            self.model, self.ckpt_config, sample, self.codec, self.aligner)
        z_shape = self.codec.latent_shape(*sample.ego_video.shape[:1],
                                          *sample.ego_video.shape[2:])
        rng = rng_for(seed, "sample", sample.sample_id)
        schedule = diffusion.NoiseSchedule(T=self.stage_cfg.get("timesteps", 1000))
        lat = diffusion.sample(self.model, cond_latent, tokens, pose_feat, z_shape,
                               steps=steps, rng=rng, schedule=schedule, guidance=guidance)
        return decode(lat, self.codec)


def sample_video(checkpoint_path: str | Path, sample: SamplePair,
                 steps: int = 40, guidance: float = 1.0, seed: int = 0,
                 align_checkpoint: str | Path | None = None) -> np.ndarray:
    """Generate the ego clip for one dataset sample; returns [F, C, H, W]."""
    ctx = SamplerContext.load(checkpoint_path, align_checkpoint)
    return ctx.sample(sample, steps=steps, guidance=guidance, seed=seed)


def evaluate_split(checkpoint_path: str | Path, manifest_path: str | Path,
                   split: str = "test", steps: int = 40, guidance: float = 1.0,
                   seed: int = 0, align_checkpoint: str | Path | None = None,
                   predictions_dir: str | Path | None = None,
                   limit: int | None = None, lpips_fn=None) -> MetricReport:
    """Sample every split item (or read supplied predictions) and report
    PSNR/SSIM against ground truth."""
    recs = [r for r in load_manifest(manifest_path) if r["split"] == split]
    if limit is not None:
        recs = recs[:limit]
    if not recs:
        raise MissingPrerequisite(f"no '{split}' samples in {manifest_path}")
    ctx = None
    if predictions_dir is None:
        ctx = SamplerContext.load(checkpoint_path, align_checkpoint)
    pairs = []
    for rec in recs:
        sample = load_sample(manifest_path, rec)
        if predictions_dir is not None:
            from .synthdata import load_clip
            pred = load_clip(Path(predictions_dir) / rec["sample_id"])
        else:
            pred = ctx.sample(sample, steps=steps, guidance=guidance, seed=seed)
        pairs.append((rec["sample_id"], rec["category"], pred, sample.ego_video))
    chash = config_hash({"checkpoint": str(checkpoint_path), "split": split,
                         "steps": steps, "guidance": guidance, "seed": seed})
    return evaluate_videos(pairs, config_hash=chash, seed=seed, lpips_fn=lpips_fn)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_AXES = ("use_align", "use_pose", "views", "train_whole", "conditioning",
                 "gt_first_frame")


def run_ablation_grid(base: StageConfig, axes: dict[str, list], codec: CodecConfig | None = None,
                      eval_split: str = "val", eval_steps: int = 10,
                      eval_limit: int | None = 8) -> dict:
    """Cartesian product over ablation axes; one full (short) pipeline per cell.

    Returns {"rows": [...], "table": str}; each row carries the axis values,
    final validation loss, and metric aggregates in the report schema.
    """
    for key in axes:
        if key not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {key!r}")
    names = sorted(axes)
    grids = [{}]
    for key in names:
        grids = [dict(g, **{key: v}) for g in grids for v in axes[key]]
    rows = []
    for cell in grids:
        cfg_dict = base.to_dict()
        cfg_dict.update(cell)
        cfg_dict["out_dir"] = str(Path(base.out_dir) / config_hash(cell))
        cfg = StageConfig.from_dict(cfg_dict)
        result = run_stage(cfg, codec)
        report = evaluate_split(result["checkpoint"], cfg.data_manifest,
                                split=eval_split, steps=eval_steps, seed=cfg.seed,
                                align_checkpoint=cfg.align_checkpoint or None,
                                limit=eval_limit)
        rows.append({"axes": cell, "val_loss": result["val_final"],
                     "aggregates": report.aggregates,
                     "checkpoint": result["checkpoint"]})
    header = names + ["val_loss", "psnr", "ssim"]
    lines = ["\t".join(header)]
    for row in rows:
        agg = row["aggregates"].get("all", {})
        lines.append("\t".join(
            [str(row["axes"].get(k, "-")) for k in names]
            + [f"{row['val_loss']:.4f}",
               f"{agg.get('psnr', {}).get('mean', float('nan')):.3f}",
               f"{agg.get('ssim', {}).get('mean', float('nan')):.4f}"]))
    return {"rows": rows, "table": "\n".join(lines)}


# ---------------------------------------------------------------------------
# experiment manifest
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = 1


@dataclass
class ExperimentManifest:
    config_hash: str
    dataset_manifest_hash: str
    checkpoint_hashes: dict[str, str]
    report_paths: list[str]
    wall_clock_s: float
    schema_version: int = MANIFEST_SCHEMA

    def content_dict(self) -> dict:
        """Everything except wall clock (which can never reproduce)."""
        return {"schema_version": self.schema_version, "config_hash": self.config_hash,
                "dataset_manifest_hash": self.dataset_manifest_hash,
                "checkpoint_hashes": self.checkpoint_hashes,
                "report_paths": sorted(self.report_paths)}

    def content_hash(self) -> str:
        return config_hash(self.content_dict())

    def save(self, path: str | Path):
        d = self.content_dict()
        d["wall_clock_s"] = self.wall_clock_s
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path) -> "ExperimentManifest":
        raw = json.loads(Path(path).read_text())
        return ExperimentManifest(config_hash=raw["config_hash"],
                                  dataset_manifest_hash=raw["dataset_manifest_hash"],
                                  checkpoint_hashes=raw["checkpoint_hashes"],
                                  report_paths=raw["report_paths"],
                                  wall_clock_s=raw["wall_clock_s"],
                                  schema_version=raw["schema_version"])

    def validate_artifacts(self, root: str | Path = "."):
        for name, digest in self.checkpoint_hashes.items():
            p = Path(root) / name
            if not p.exists():
                raise MissingPrerequisite(f"manifest references missing artifact {name}")
            if file_hash(p) != digest:
                raise MissingPrerequisite(f"artifact {name} does not match its manifest hash")


def write_experiment_manifest(out_dir: str | Path, cfg: StageConfig,
                              checkpoints: dict[str, str], reports: list[str],
                              wall_clock_s: float) -> Path:
    out = Path(out_dir)
    man = ExperimentManifest(
        config_hash=config_hash(cfg.to_dict()),
        dataset_manifest_hash=file_hash(cfg.data_manifest),
        checkpoint_hashes={str(Path(p).name): file_hash(p) for p in checkpoints.values()},
        report_paths=[str(r) for r in reports],
        wall_clock_s=wall_clock_s,
    )
    path = out / "experiment.json"
    man.save(path)
    return path
