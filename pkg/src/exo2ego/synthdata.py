"""Procedural multi-view dataset: a z-buffered flat-shaded rasterizer renders
paired clips (four fixed exocentric cameras on a circle, one moving egocentric
camera) with exactly known poses and intrinsics.

World frame: right-handed, z up, floor plane z = 0. The scene lives inside a
disc of radius ~2.5 around the origin: a checkered floor, a few drifting
primitives (boxes / icosahedra), and an actor proxy (torso block with two
swinging hand cubes). The ego camera moves on a smooth seeded path strictly
inside the exo circle with bounded angular velocity; exo cameras sit 90 deg
apart at exo_radius, looking inward.

Scene variants:
  default     - ego looks at the actor; first frame content depends on scene.
  ambiguous   - ego's first frame shows only bare floor: predictable from the
                camera geometry alone.
  textureless - flat single-color floor; the first ego frame carries almost
                no texture (the documented failure mode for alignment).

Everything is a pure function of the seed, so clips regenerate bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .conditioning import ExoBundle
from .errors import IOFailure, ShapeError
from .geometry import CameraPose, Intrinsics, look_at, save_intrinsics, save_pose_track

BACKGROUND = np.array([0.07, 0.08, 0.11])
LIGHT_DIR = np.array([0.38, 0.22, 0.9]) / np.linalg.norm([0.38, 0.22, 0.9])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_primitives: int = 3
    variant: str = "default"
    resolution: int = 64
    frames: int = 9
    fps: float = 3.0
    exo_radius: float = 6.0
    exo_height: float = 2.6
    category: str = "synthetic"

    def __post_init__(self):
        if self.variant not in ("default", "ambiguous", "textureless"):
            raise ShapeError(f"unknown scene variant {self.variant!r}")
        if self.frames < 1 or (self.frames - 1) % 4:
            raise ShapeError(f"frames must satisfy 4n+1, got {self.frames}")


@dataclass
class SamplePair:
    """One dataset item: exo bundle, ego clip, per-frame ego poses."""

    sample_id: str
    exo: ExoBundle
    ego_video: np.ndarray            # [F, C, H, W] in [-1, 1]
    ego_poses: list[CameraPose]      # length F
    intrinsics: Intrinsics
    split: str = "train"
    category: str = "synthetic"
    seed: int = 0


# ---------------------------------------------------------------------------
# triangle soup builders
# ---------------------------------------------------------------------------

def _box(center, size, color, rng=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cx, cy, cz = center
    sx, sy, sz = np.asarray(size) / 2.0
    v = np.array([[cx - sx, cy - sy, cz - sz], [cx + sx, cy - sy, cz - sz],
                  [cx + sx, cy + sy, cz - sz], [cx - sx, cy + sy, cz - sz],
                  [cx - sx, cy - sy, cz + sz], [cx + sx, cy - sy, cz + sz],
                  [cx + sx, cy + sy, cz + sz], [cx - sx, cy + sy, cz + sz]])
    quads = [(0, 1, 2, 3), (4, 7, 6, 5), (0, 4, 5, 1), (1, 5, 6, 2),
             (2, 6, 7, 3), (3, 7, 4, 0)]
    faces, colors = [], []
    for qi, (a, b, c, d) in enumerate(quads):
        faces += [(a, b, c), (a, c, d)]
        jitter = 0.85 + 0.3 * ((qi % 3) / 2.0)
        colors += [np.clip(np.asarray(color) * jitter, 0, 1)] * 2
    return v, np.array(faces), np.array(colors)


def _icosahedron(center, radius, color) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi = (1 + np.sqrt(5)) / 2
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=np.float64)
    v = v / np.linalg.norm(v[0]) * radius + np.asarray(center)
    faces = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                      [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                      [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                      [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    shades = 0.8 + 0.4 * (np.arange(len(faces)) % 5) / 4.0
    colors = np.clip(np.asarray(color)[None, :] * shades[:, None], 0, 1)
    return v, faces, colors


def _floor(variant: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    extent, grid = 4.0, 6
    xs = np.linspace(-extent, extent, grid + 1)
    verts, faces, colors = [], [], []
    for i in range(grid):
        for j in range(grid):
            base = len(verts)
            verts += [[xs[j], xs[i], 0.0], [xs[j + 1], xs[i], 0.0],
                      [xs[j + 1], xs[i + 1], 0.0], [xs[j], xs[i + 1], 0.0]]
            faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
            if variant == "textureless":
                col = np.array([0.42, 0.42, 0.44])
            else:
                col = np.array([0.55, 0.52, 0.48]) if (i + j) % 2 else np.array([0.33, 0.36, 0.42])
            colors += [col, col]
    return np.array(verts), np.array(faces), np.array(colors)


def _merge(parts):
    verts, faces, colors, off = [], [], [], 0
    for v, f, c in parts:
        verts.append(v)
        faces.append(np.asarray(f) + off)
        colors.append(c)
        off += len(v)
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(colors)


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------

class Scene:
    """Seeded scene: static floor plus time-parameterized movers."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE0E]))
        self.floor = _floor(spec.variant)
        palette = np.array([[0.85, 0.25, 0.2], [0.2, 0.65, 0.85], [0.9, 0.75, 0.2],
                            [0.5, 0.85, 0.3], [0.8, 0.4, 0.75]])
        self.movers = []
        for k in range(spec.num_primitives):
            base = np.array([rng.uniform(-1.6, 1.6), rng.uniform(-1.6, 1.6), rng.uniform(0.35, 1.2)])
            amp = rng.uniform(0.1, 0.5, size=3) * np.array([1, 1, 0.4])
            omega = rng.uniform(0.5, 1.6, size=3)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            color = palette[int(rng.integers(0, len(palette)))]
            kind = "box" if rng.uniform() < 0.5 else "ico"
            size = rng.uniform(0.3, 0.62)
            self.movers.append(dict(base=base, amp=amp, omega=omega, phase=phase,
                                    color=color, kind=kind, size=size))
        self.actor_xy = rng.uniform(-0.7, 0.7, size=2)
        self.actor_color = palette[int(rng.integers(0, len(palette)))]
        self.hand_color = np.array([0.95, 0.8, 0.65])
        self.hand_phase = rng.uniform(0, 2 * np.pi)
        if spec.variant == "textureless":
            gray = np.array([0.5, 0.5, 0.52])
            for m in self.movers:
                m["color"] = gray
            self.actor_color = gray
            self.hand_color = gray

    def mover_center(self, k: int, t: float) -> np.ndarray:
        m = self.movers[k]
        c = m["base"] + m["amp"] * np.sin(m["omega"] * t + m["phase"])
        c[2] = max(c[2], 0.5 * m["size"] + 0.05)
        return c

    def actor_center(self, t: float) -> np.ndarray:
        return np.array([self.actor_xy[0], self.actor_xy[1], 0.95])

    def triangles(self, t: float):
        parts = [self.floor]
        for k, m in enumerate(self.movers):
            c = self.mover_center(k, t)
            if m["kind"] == "box":
                parts.append(_box(c, [m["size"]] * 3, m["color"]))
            else:
                parts.append(_icosahedron(c, m["size"] / 2, m["color"]))
        actor = self.actor_center(t)
        parts.append(_box(actor, [0.5, 0.32, 1.1], self.actor_color))
        swing = 0.22 * np.sin(1.8 * t + self.hand_phase)
        for side in (-1, 1):
            hand = actor + np.array([side * 0.42, swing * side, 0.12])
            parts.append(_box(hand, [0.16, 0.16, 0.16], self.hand_color))
        return _merge(parts)

    # -- cameras ---------------------------------------------------------------

    def exo_poses(self) -> list[CameraPose]:
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, 0xCA3]))
        offset = rng.uniform(0, np.pi / 2)
        poses = []
        for k in range(4):
            ang = offset + k * np.pi / 2
            pos = np.array([self.spec.exo_radius * np.cos(ang),
                            self.spec.exo_radius * np.sin(ang),
                            self.spec.exo_height])
            poses.append(look_at(pos, np.array([0.0, 0.0, 0.8]), frame_index=0))
        return poses

    def ego_poses(self) -> list[CameraPose]:
        spec = self.spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xE60]))
        theta0 = rng.uniform(0, 2 * np.pi)
        dtheta = rng.uniform(-0.8, 0.8)
        r0, r1 = rng.uniform(1.3, 2.3, size=2)
        z0, z1 = rng.uniform(1.0, 1.7, size=2)
        wobble = rng.uniform(0, 2 * np.pi, size=2)
        actor = np.array([self.actor_xy[0], self.actor_xy[1], 1.0])
        if spec.variant in ("ambiguous", "textureless"):
            theta_look = theta0 + rng.uniform(-0.4, 0.4)
            start_pos = np.array([r0 * np.cos(theta0), r0 * np.sin(theta0), z0])
            out = start_pos[:2] / np.linalg.norm(start_pos[:2])
            floor_target = np.array([start_pos[0] + 1.9 * out[0], start_pos[1] + 1.9 * out[1], 0.0])
        poses = []
        for i in range(spec.frames):
            s = i / max(1, spec.frames - 1)
            theta = theta0 + dtheta * s
            r = r0 + (r1 - r0) * s + 0.08 * np.sin(2 * np.pi * s + wobble[0])
            z = z0 + (z1 - z0) * s + 0.05 * np.sin(2 * np.pi * s + wobble[1])
            pos = np.array([r * np.cos(theta), r * np.sin(theta), z])
            if spec.variant in ("ambiguous", "textureless"):
                blend = min(1.0, 1.6 * s)
                target = (1 - blend) * floor_target + blend * actor
            else:
                target = actor + 0.25 * np.array([np.sin(2.1 * s + wobble[0]),
                                                  np.cos(1.7 * s + wobble[1]), 0.2 * np.sin(s)])
            poses.append(look_at(pos, target, frame_index=i))
        return poses

    def object_keypoints(self, t: float) -> np.ndarray:
        pts = [self.mover_center(k, t) for k in range(len(self.movers))]
        pts.append(self.actor_center(t))
        return np.array(pts)


# ---------------------------------------------------------------------------
# rasterizer
# ---------------------------------------------------------------------------

def _clip_near(tri: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-space triangle against z = near (Sutherland-Hodgman)."""
    inside = tri[:, 2] >= near
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ina, inb = inside[i], inside[(i + 1) % 3]
        if ina:
            poly.append(a)
        if ina != inb:
            s = (near - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    out = []
    for i in range(1, len(poly) - 1):
        out.append(np.stack([poly[0], poly[i], poly[i + 1]]))
    return out


def render_frame(verts: np.ndarray, faces: np.ndarray, colors: np.ndarray,
                 cam: CameraPose, K: Intrinsics, near: float = 0.1) -> np.ndarray:
    """Rasterize a triangle soup into [3, H, W] with values in [0, 1]."""
    H, W = K.height, K.width
    img = np.tile(BACKGROUND[:, None, None], (1, H, W)).astype(np.float64)
    zbuf = np.full((H, W), np.inf)

    r_cw = cam.rotation.T
    cam_verts = (verts - cam.origin) @ r_cw.T

    # per-face flat shading from the world-space normal
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 1e-12)
    shade = 0.55 + 0.45 * np.abs(n @ LIGHT_DIR)
    shaded = np.clip(colors * shade[:, None], 0.0, 1.0)

    for fi, face in enumerate(faces):
        tri = cam_verts[face]
        if tri[:, 2].max() < near:
            continue
        for ctri in _clip_near(tri, near):
            z = ctri[:, 2]
            u = K.fx * ctri[:, 0] / z + K.cx
            v = K.fy * ctri[:, 1] / z + K.cy
            lo_x = max(int(np.floor(u.min() - 0.5)), 0)
            hi_x = min(int(np.ceil(u.max() + 0.5)), W - 1)
            lo_y = max(int(np.floor(v.min() - 0.5)), 0)
            hi_y = min(int(np.ceil(v.max() + 0.5)), H - 1)
            if lo_x > hi_x or lo_y > hi_y:
                continue
            px = np.arange(lo_x, hi_x + 1) + 0.5
            py = np.arange(lo_y, hi_y + 1) + 0.5
            gx, gy = np.meshgrid(px, py)
            d = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
            if abs(d) < 1e-12:
                continue
            w0 = ((u[1] - gx) * (v[2] - gy) - (u[2] - gx) * (v[1] - gy)) / d
            w1 = ((u[2] - gx) * (v[0] - gy) - (u[0] - gx) * (v[2] - gy)) / d
            w2 = 1.0 - w0 - w1
            mask = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not mask.any():
                continue
            inv_z = w0 / z[0] + w1 / z[1] + w2 / z[2]
            depth = np.divide(1.0, inv_z, out=np.full_like(inv_z, np.inf), where=inv_z > 1e-12)
            sub_z = zbuf[lo_y:hi_y + 1, lo_x:hi_x + 1]
            win = mask & (depth < sub_z)
            if not win.any():
                continue
            sub_z[win] = depth[win]
            for ch in range(3):
                sub_img = img[ch, lo_y:hi_y + 1, lo_x:hi_x + 1]
                sub_img[win] = shaded[fi, ch]
    return img


def render(spec: SceneSpec, cams: CameraPose | list[CameraPose], K: Intrinsics,
           F: int | None = None) -> np.ndarray:
    """Render a clip [F, 3, H, W] in [-1, 1]; a single pose is held fixed."""
    scene = Scene(spec)
    F = F if F is not None else spec.frames
    if isinstance(cams, CameraPose):
        cams = [cams] * F
    if len(cams) != F:
        raise ShapeError(f"need {F} poses, got {len(cams)}")
    frames = []
    for i in range(F):
        t = i / spec.fps
        verts, faces, colors = scene.triangles(t)
        frames.append(render_frame(verts, faces, colors, cams[i], K))
    return np.stack(frames) * 2.0 - 1.0


def render_sample(spec: SceneSpec, split: str = "train", sample_id: str | None = None) -> SamplePair:
    scene = Scene(spec)
    K = Intrinsics.simple(spec.resolution, spec.resolution)
    exo_poses = scene.exo_poses()
    ego_poses = scene.ego_poses()
    exo_videos = np.stack([render(spec, p, K) for p in exo_poses])
    ego_video = render(spec, ego_poses, K)
    bundle = ExoBundle(videos=exo_videos, poses=exo_poses)
    sid = sample_id if sample_id is not None else f"{spec.category}-{spec.seed:08d}"
    return SamplePair(sample_id=sid, exo=bundle, ego_video=ego_video,
                      ego_poses=ego_poses, intrinsics=K, split=split,
                      category=spec.category, seed=spec.seed)


# ---------------------------------------------------------------------------
# geometric validation helpers
# ---------------------------------------------------------------------------

def project_point(point: np.ndarray, cam: CameraPose, K: Intrinsics) -> np.ndarray:
    """World point -> continuous pixel coordinates (u, v)."""
    p = cam.rotation.T @ (np.asarray(point, dtype=np.float64) - cam.origin)
    if p[2] <= 0:
        return np.array([np.nan, np.nan])
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def frusta_coverage(spec: SceneSpec) -> float:
    """Fraction of (frame, keypoint) pairs inside all four exo frusta."""
    scene = Scene(spec)
    K = Intrinsics.simple(spec.resolution, spec.resolution)
    exo = scene.exo_poses()
    total, ok = 0, 0
    for i in range(spec.frames):
        pts = scene.object_keypoints(i / spec.fps)
        for p in pts:
            total += 1
            good = True
            for cam in exo:
                uv = project_point(p, cam, K)
                if not (np.isfinite(uv).all() and 0 <= uv[0] < K.width and 0 <= uv[1] < K.height):
                    good = False
                    break
            ok += good
    return ok / max(1, total)


def ego_inside_circle(spec: SceneSpec) -> bool:
    scene = Scene(spec)
    return all(np.linalg.norm(p.origin[:2]) < spec.exo_radius for p in scene.ego_poses())


# ---------------------------------------------------------------------------
# clip container + dataset manifests
# ---------------------------------------------------------------------------

CLIP_SCHEMA = 1
MANIFEST_SCHEMA = 1


def save_clip(path_base: str | Path, clip: np.ndarray, fps: float):
    path_base = Path(path_base)
    try:
        np.save(str(path_base) + ".npy", np.asarray(clip, dtype=np.float64))
        sidecar = {
            "schema_version": CLIP_SCHEMA,
            "shape": list(clip.shape),
            "dtype": "float64",
            "value_range": [-1.0, 1.0],
            "fps": fps,
        }
        Path(str(path_base) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    except OSError as e:
        raise IOFailure(f"cannot write clip {path_base}: {e}") from e


def load_clip(path_base: str | Path) -> np.ndarray:
    path_base = Path(path_base)
    try:
        sidecar = json.loads(Path(str(path_base) + ".json").read_text())
        clip = np.load(str(path_base) + ".npy")
    except (OSError, ValueError) as e:
        raise IOFailure(f"cannot read clip {path_base}: {e}") from e
    if list(clip.shape) != sidecar["shape"]:
        raise IOFailure(f"clip {path_base}: sidecar shape {sidecar['shape']} != {clip.shape}")
    return clip


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    resolution: int = 64
    frames: int = 9
    fps: float = 3.0
    variant: str = "default"
    num_primitives: int = 3
    category: str = "synthetic"
    splits: tuple[tuple[str, float], ...] = (("train", 0.8), ("val", 0.1), ("test", 0.1))


def _sample_seed(global_seed: int, split: str, index: int) -> int:
    digest = hashlib.sha256(f"{global_seed}/{split}/{index}".encode()).digest()
    return int.from_bytes(digest[:6], "big")


def generate_split(n: int, cfg: DatasetConfig, out_dir: str | Path) -> Path:
    """Render n samples, write clips + pose tracks + manifest; returns the
    manifest path. Split seed sets are disjoint by construction."""
    if n < 1:
        raise ShapeError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {name: max(1, int(round(n * frac))) if frac > 0 else 0
              for name, frac in cfg.splits}
    records = []
    for split, count in counts.items():
        for i in range(count):
            seed = _sample_seed(cfg.seed, split, i)
            spec = SceneSpec(seed=seed, num_primitives=cfg.num_primitives,
                             variant=cfg.variant, resolution=cfg.resolution,
                             frames=cfg.frames, fps=cfg.fps, category=cfg.category)
            sid = f"{split}-{i:05d}"
            sample = render_sample(spec, split=split, sample_id=sid)
            sdir = out / sid
            sdir.mkdir(exist_ok=True)
            save_clip(sdir / "ego", sample.ego_video, cfg.fps)
            for vi in range(sample.exo.num_views):
                save_clip(sdir / f"exo_{vi}", sample.exo.videos[vi], cfg.fps)
                save_pose_track(sdir / f"exo_{vi}_pose.jsonl", [sample.exo.poses[vi]], f"exo_{vi}")
            save_pose_track(sdir / "ego_pose.jsonl", sample.ego_poses, "ego")
            save_intrinsics(sdir / "intrinsics.json", sample.intrinsics)
            records.append({
                "sample_id": sid, "split": split, "seed": seed,
                "category": cfg.category, "dir": sid,
            })
    manifest = out / "manifest.jsonl"
    try:
        with manifest.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        header = {"schema_version": MANIFEST_SCHEMA, "config": asdict(cfg), "count": len(records)}
        (out / "dataset.json").write_text(json.dumps(header, indent=2) + "\n")
    except OSError as e:
        raise IOFailure(f"cannot write manifest under {out}: {e}") from e
    return manifest


def load_manifest(manifest_path: str | Path) -> list[dict]:
    path = Path(manifest_path)
    try:
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as e:
        raise IOFailure(f"cannot read manifest {path}: {e}") from e
    return recs


def dataset_config(manifest_path: str | Path) -> DatasetConfig:
    root = Path(manifest_path).parent
    try:
        header = json.loads((root / "dataset.json").read_text())
    except (OSError, ValueError) as e:
        raise IOFailure(f"cannot read dataset header next to {manifest_path}: {e}") from e
    cfg = dict(header["config"])
    cfg["splits"] = tuple((name, frac) for name, frac in cfg["splits"])
    return DatasetConfig(**cfg)


def load_sample(manifest_path: str | Path, record: dict) -> SamplePair:
    root = Path(manifest_path).parent / record["dir"]
    from .geometry import load_intrinsics, load_pose_track
    ego_video = load_clip(root / "ego")
    ego_poses, _ = load_pose_track(root / "ego_pose.jsonl")
    exo_videos, exo_poses = [], []
    vi = 0
    while (root / f"exo_{vi}.npy").exists():
        exo_videos.append(load_clip(root / f"exo_{vi}"))
        poses, _ = load_pose_track(root / f"exo_{vi}_pose.jsonl")
        exo_poses.append(poses[0])
        vi += 1
    if not exo_videos:
        raise IOFailure(f"no exo clips under {root}")
    bundle = ExoBundle(videos=np.stack(exo_videos), poses=exo_poses)
    return SamplePair(sample_id=record["sample_id"], exo=bundle, ego_video=ego_video,
                      ego_poses=ego_poses, intrinsics=load_intrinsics(root / "intrinsics.json"),
                      split=record["split"], category=record["category"], seed=record["seed"])
