"""SE(3) pose algebra, relative exo-to-ego poses, and dense ray maps.

Conventions (fixed and relied on by every test in the suite):
  - CameraPose.matrix is the 4x4 world-from-camera transform (c2w): columns of
    the rotation block are the camera axes expressed in the world frame, the
    translation column is the camera origin in the world frame.
  - Right-handed coordinates; the camera looks along its +z axis, +x right,
    +y down (standard computer-vision pinhole frame).
  - Pixels are unprojected at their centers: pixel (u, v) maps to the ray
    through ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1).
  - Ray maps use the Pluecker parameterization: channels 0..2 are the unit
    direction d, channels 3..5 the moment m = o x d, with o the camera origin
    and both expressed in the frame of the pose passed in. Directions are
    dimensionless; moments carry world length units.

SE(3) checks use tolerance 1e-6 at float64 (1e-4 would be appropriate at
float32; this module always computes in float64).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateIntrinsics, IOFailure, NonRigidPose

SE3_TOL = 1e-6


def _check_se3(matrix: np.ndarray, tol: float = SE3_TOL) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise NonRigidPose(f"pose matrix must be 4x4, got {m.shape}")
    r = m[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise NonRigidPose("rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise NonRigidPose("rotation block has det != +1 (reflection or scale)")
    if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
        raise NonRigidPose("bottom row must be exactly [0, 0, 0, 1]")
    return m


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera transform at one time index.

    Exocentric cameras are fixed, so their frame_index stays 0; egocentric
    poses vary per frame.
    """

    matrix: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "matrix", _check_se3(self.matrix))
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @staticmethod
    def identity(frame_index: int = 0) -> "CameraPose":
        return CameraPose(np.eye(4), frame_index)

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray, frame_index: int = 0) -> "CameraPose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return CameraPose(m, frame_index)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DegenerateIntrinsics(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise DegenerateIntrinsics("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise DegenerateIntrinsics("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @staticmethod
    def simple(width: int, height: int, focal: float | None = None) -> "Intrinsics":
        f = focal if focal is not None else 0.8 * max(width, height)
        return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass(frozen=True)
class RelativePose:
    """Transform tying one ego frame to the reference exo camera."""

    matrix: np.ndarray
    ego_frame_index: int = 0
    exo_camera_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "matrix", _check_se3(self.matrix))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.matrix[:3, 3]


def invert(p: CameraPose) -> CameraPose:
    """Closed-form SE(3) inverse [R^T, -R^T t]."""
    r = p.rotation.T
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ p.origin
    return CameraPose(m, p.frame_index)


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    m = a.matrix @ b.matrix
    # renormalize the rotation against drift from long product chains
    u, _, vt = np.linalg.svd(m[:3, :3])
    m[:3, :3] = u @ vt
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return CameraPose(m, a.frame_index)


def relative_pose(ego: CameraPose, exo_ref: CameraPose, exo_camera_index: int = 0) -> RelativePose:
    """inverse(ego) @ exo_ref: the reference exo camera expressed in the ego
    frame at ego.frame_index."""
    m = invert(ego).matrix @ exo_ref.matrix
    u, _, vt = np.linalg.svd(m[:3, :3])
    m[:3, :3] = u @ vt
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return RelativePose(m, ego_frame_index=ego.frame_index, exo_camera_index=exo_camera_index)


def ray_pose(ego: CameraPose, exo_ref: CameraPose, exo_camera_index: int = 0) -> RelativePose:
    """Pose whose ray map encodes the *ego* camera's pixels in the reference
    exo camera's frame: inverse(exo_ref) @ ego.

    This is the inverse of relative_pose(ego, exo_ref); moments then live in
    the reference-camera frame, which is the convention the conditioning
    pathways use.
    """
    m = invert(exo_ref).matrix @ ego.matrix
    u, _, vt = np.linalg.svd(m[:3, :3])
    m[:3, :3] = u @ vt
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return RelativePose(m, ego_frame_index=ego.frame_index, exo_camera_index=exo_camera_index)


def plucker_embed(rel: RelativePose | Sequence[RelativePose], K: Intrinsics,
                  F_count: int) -> np.ndarray:
    """Dense per-pixel 6-channel ray map, one frame per supplied pose.

    A single pose is broadcast over all F_count frames; otherwise exactly
    F_count poses must be given. The pose is read as camera-to-reference:
    directions are R @ K^-1 [u+.5, v+.5, 1] normalized, moments o x d with
    o the pose translation.

    Returns [F_count, 6, height, width] float64.
    """
    if K.fx <= 0 or K.fy <= 0:
        raise DegenerateIntrinsics("fx and fy must be positive")
    if F_count < 1:
        raise ValueError("F_count must be >= 1")
    if isinstance(rel, RelativePose):
        poses = [rel] * F_count
    else:
        poses = list(rel)
        if len(poses) != F_count:
            raise ValueError(f"need {F_count} poses, got {len(poses)}")

    H, W = K.height, K.width
    u = (np.arange(W) + 0.5 - K.cx) / K.fx
    v = (np.arange(H) + 0.5 - K.cy) / K.fy
    uu, vv = np.meshgrid(u, v)
    cam_dirs = np.stack([uu, vv, np.ones_like(uu)], axis=0)  # [3, H, W]

    rots = np.stack([p.rotation for p in poses])             # [F, 3, 3]
    origins = np.stack([p.origin for p in poses])            # [F, 3]

    dirs = np.einsum("fij,jhw->fihw", rots, cam_dirs)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    moments = np.cross(origins[:, :, None, None], dirs, axis=1)
    return np.concatenate([dirs, moments], axis=1)


# ray maps are plain arrays [F, 6, H, W]; channels 0..2 unit direction,
# channels 3..5 moment (origin x direction)
PluckerMap = np.ndarray


def check_plucker(pmap: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate the ray-map invariants; returns the array unchanged."""
    pmap = np.asarray(pmap, dtype=np.float64)
    if pmap.ndim != 4 or pmap.shape[1] != 6:
        raise ValueError(f"ray map must be [F,6,H,W], got {pmap.shape}")
    norm_err, orth_err = plucker_residuals(pmap)
    if norm_err > tol:
        raise ValueError(f"ray directions deviate from unit norm by {norm_err:.2e}")
    if orth_err > tol:
        raise ValueError(f"moments deviate from orthogonality by {orth_err:.2e}")
    return pmap


def plucker_residuals(pmap: np.ndarray) -> tuple[float, float]:
    """Worst-case deviations from the ray-map invariants.

    Returns (max | ||d||-1 |, max |d.m|) over all pixels and frames.
    """
    d = pmap[:, 0:3]
    m = pmap[:, 3:6]
    norm_err = np.abs(np.linalg.norm(d, axis=1) - 1.0).max()
    orth_err = np.abs((d * m).sum(axis=1)).max()
    return float(norm_err), float(orth_err)


def downsample_plucker(pmap: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling to latent resolution, then renormalize directions.

    Moments are left as plain averages; the direction triplet is rescaled to
    unit norm so the downsampled map still looks like a ray map (exact where
    the map is locally constant).
    """
    F, C, H, W = pmap.shape
    if C != 6 or H % factor or W % factor:
        raise ValueError(f"cannot pool [{F},{C},{H},{W}] by {factor}")
    pooled = pmap.reshape(F, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))
    d = pooled[:, 0:3]
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms = np.where(norms < 1e-12, 1.0, norms)
    pooled[:, 0:3] = d / norms
    return pooled


# ---------------------------------------------------------------------------
# pose-track files: one JSON record per line (frame_index, row-major matrix,
# camera id); intrinsics as a small JSON config block.
# ---------------------------------------------------------------------------

def save_pose_track(path: str | Path, poses: Sequence[CameraPose], camera_id: str):
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for p in poses:
                rec = {
                    "frame_index": int(p.frame_index),
                    "camera_id": camera_id,
                    "matrix": [float(x) for x in p.matrix.reshape(-1)],
                }
                fh.write(json.dumps(rec) + "\n")
    except OSError as e:
        raise IOFailure(f"cannot write pose track {path}: {e}") from e


def load_pose_track(path: str | Path) -> tuple[list[CameraPose], str]:
    path = Path(path)
    poses: list[CameraPose] = []
    camera_id = ""
    try:
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                camera_id = rec["camera_id"]
                m = np.array(rec["matrix"], dtype=np.float64).reshape(4, 4)
                poses.append(CameraPose(m, rec["frame_index"]))
    except (OSError, KeyError, ValueError) as e:
        raise IOFailure(f"cannot read pose track {path}: {e}") from e
    return poses, camera_id


def save_intrinsics(path: str | Path, K: Intrinsics):
    rec = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
           "width": K.width, "height": K.height}
    try:
        Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IOFailure(f"cannot write intrinsics {path}: {e}") from e


def load_intrinsics(path: str | Path) -> Intrinsics:
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        return Intrinsics(fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                          width=int(rec["width"]), height=int(rec["height"]))
    except (OSError, KeyError, ValueError) as e:
        raise IOFailure(f"cannot read intrinsics {path}: {e}") from e


def random_pose(rng: np.random.Generator, translation_scale: float = 2.0,
                frame_index: int = 0) -> CameraPose:
    """Uniform random rotation (QR of a Gaussian matrix) plus Gaussian translation."""
    a = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    t = rng.normal(scale=translation_scale, size=3)
    return CameraPose.from_rt(q, t, frame_index)


def look_at(origin: np.ndarray, target: np.ndarray, up: np.ndarray | None = None,
            frame_index: int = 0) -> CameraPose:
    """Camera at `origin` looking toward `target` (+z forward, +y down)."""
    origin = np.asarray(origin, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - origin
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at target coincides with origin")
    fwd = fwd / n
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    return CameraPose.from_rt(r, origin, frame_index)
