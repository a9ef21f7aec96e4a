"""Desk-scale exocentric-to-egocentric cross-view video generation.

A latent video diffusion transformer extended with three conditioning
pathways: first-frame view alignment, multi-view exo-video token
conditioning, and dense relative-pose injection; trained and verified on a
procedurally rendered synthetic multi-view dataset with exactly known camera
geometry.
"""

from . import errors
from .align import AlignConfig, AlignInput, ViewAligner, align_forward, align_loss
from .backbone import BackboneConfig, Denoiser, HiddenState, token_count
from .codec import CodecConfig, LearnedCodec, decode, encode
from .conditioning import (
    ExoBundle,
    MultiExoCon,
    PoseInj,
    inject_pose,
    multiexocon_tokens,
    poseinj_features,
    vawan_condition,
)
from .diffusion import DiffusionSample, NoiseSchedule, add_noise, loss_stage1, loss_stage2, sample
from .geometry import (
    CameraPose,
    Intrinsics,
    PluckerMap,
    RelativePose,
    compose,
    invert,
    plucker_embed,
    relative_pose,
)
from .lora import LoraConfig, attach, merge
from .metrics import MetricReport, psnr, ssim
from .pipeline import StageConfig, evaluate_split, run_ablation_grid, run_stage, sample_video
from .synthdata import DatasetConfig, SamplePair, SceneSpec, generate_split, render

__version__ = "0.1.0"
