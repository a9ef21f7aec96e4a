"""Renderer and dataset generation: determinism, geometry consistency,
manifests, clip container."""

import json
from pathlib import Path

import numpy as np
import pytest

from exo2ego.errors import IOFailure, ShapeError
from exo2ego.geometry import Intrinsics, look_at
from exo2ego.synthdata import (
    DatasetConfig,
    Scene,
    SceneSpec,
    ego_inside_circle,
    frusta_coverage,
    generate_split,
    load_clip,
    load_manifest,
    load_sample,
    project_point,
    render,
    render_frame,
    render_sample,
    save_clip,
    _icosahedron,
)


class TestRenderer:
    def test_camera_facing_away_sees_background_only(self):
        # camera above the whole scene, looking straight up
        spec = SceneSpec(seed=1, resolution=16)
        cam = look_at(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.0, 30.0]),
                      up=np.array([1.0, 0.0, 0.0]))
        clip = render(spec, cam, Intrinsics.simple(16, 16), F=1)
        # every pixel equals the constant background
        assert np.ptp(clip.reshape(3, -1), axis=-1).max() == 0.0

    def test_projected_center_matches_rendered_centroid(self):
        # single small icosahedron against empty background
        center = np.array([0.2, -0.3, 1.1])
        verts, faces, colors = _icosahedron(center, 0.18, np.array([1.0, 0.2, 0.2]))
        cam = look_at(np.array([0.0, -2.6, 1.4]), center)
        K = Intrinsics.simple(64, 64)
        img = render_frame(verts, faces, colors, cam, K)
        bg = img[:, 0, 0][:, None, None]
        mask = np.abs(img - bg).sum(axis=0) > 0.05
        ys, xs = np.nonzero(mask)
        centroid = np.array([xs.mean() + 0.0, ys.mean()])
        uv = project_point(center, cam, K)
        # rendered pixels are indexed at centers: compare in continuous coords
        assert np.abs(centroid + 0.5 - uv).max() < 1.0

    def test_seed_determinism_bit_identical(self):
        spec = SceneSpec(seed=5, resolution=16)
        a = render_sample(spec)
        b = render_sample(spec)
        assert np.array_equal(a.ego_video, b.ego_video)
        assert np.array_equal(a.exo.videos, b.exo.videos)

    def test_different_seeds_differ(self):
        a = render_sample(SceneSpec(seed=5, resolution=16))
        b = render_sample(SceneSpec(seed=6, resolution=16))
        assert not np.array_equal(a.ego_video, b.ego_video)

    def test_value_range_and_shapes(self):
        s = render_sample(SceneSpec(seed=2, resolution=16))
        assert s.ego_video.shape == (9, 3, 16, 16)
        assert s.exo.videos.shape == (4, 9, 3, 16, 16)
        assert s.ego_video.min() >= -1.0 and s.ego_video.max() <= 1.0
        assert len(s.ego_poses) == 9

    def test_frame_count_law(self):
        with pytest.raises(ShapeError):
            SceneSpec(seed=0, frames=8)


class TestSceneInvariants:
    def test_objects_inside_all_exo_frusta(self):
        for seed in range(5):
            assert frusta_coverage(SceneSpec(seed=seed, resolution=32)) >= 0.8

    def test_ego_stays_inside_exo_circle(self):
        for seed in range(5):
            assert ego_inside_circle(SceneSpec(seed=seed, resolution=32))

    def test_exo_cameras_ninety_degrees_apart(self):
        scene = Scene(SceneSpec(seed=3))
        poses = scene.exo_poses()
        angles = [np.arctan2(p.origin[1], p.origin[0]) for p in poses]
        gaps = np.mod(np.diff(angles), 2 * np.pi)
        assert np.allclose(gaps, np.pi / 2, atol=1e-9)

    def test_ego_angular_velocity_bounded(self):
        scene = Scene(SceneSpec(seed=4))
        poses = scene.ego_poses()
        fwd = [p.rotation @ np.array([0.0, 0.0, 1.0]) for p in poses]
        for a, b in zip(fwd[:-1], fwd[1:]):
            ang = np.degrees(np.arccos(np.clip(a @ b, -1, 1)))
            assert ang < 45.0

    def test_ambiguous_variant_first_frame_is_floor_only(self):
        spec = SceneSpec(seed=6, resolution=32, variant="ambiguous")
        s = render_sample(spec)
        frame0 = (s.ego_video[0] + 1) / 2
        # no saturated object colors: the palette maxima stay absent
        assert frame0.max() < 0.75
        # later frames pan back to the scene and differ strongly
        assert np.abs(s.ego_video[-1] - s.ego_video[0]).mean() > 0.02

    def test_textureless_variant_low_variance_first_frame(self):
        spec = SceneSpec(seed=6, resolution=32, variant="textureless")
        s = render_sample(spec)
        default = render_sample(SceneSpec(seed=6, resolution=32))
        assert s.ego_video[0].std() < default.ego_video[0].std()


class TestClipContainer:
    def test_round_trip_with_sidecar(self, tmp_path):
        clip = np.random.default_rng(0).uniform(-1, 1, size=(5, 3, 8, 8))
        save_clip(tmp_path / "clip", clip, fps=3.0)
        loaded = load_clip(tmp_path / "clip")
        assert np.array_equal(clip, loaded)
        sidecar = json.loads((tmp_path / "clip.json").read_text())
        assert sidecar["shape"] == [5, 3, 8, 8]
        assert sidecar["fps"] == 3.0

    def test_sidecar_mismatch_detected(self, tmp_path):
        clip = np.zeros((2, 3, 4, 4))
        save_clip(tmp_path / "clip", clip, fps=3.0)
        np.save(tmp_path / "clip.npy", np.zeros((1, 3, 4, 4)))
        with pytest.raises(IOFailure):
            load_clip(tmp_path / "clip")


class TestGenerateSplit:
    def test_manifest_structure_and_loading(self, tiny_dataset):
        recs = load_manifest(tiny_dataset)
        splits = {r["split"] for r in recs}
        assert splits == {"train", "val", "test"}
        assert len(recs) >= 12
        sample = load_sample(tiny_dataset, recs[0])
        assert sample.exo.num_views == 4
        assert sample.ego_video.shape[0] == 9

    def test_split_seeds_disjoint(self, tiny_dataset):
        recs = load_manifest(tiny_dataset)
        by_split = {}
        for r in recs:
            by_split.setdefault(r["split"], set()).add(r["seed"])
        assert not (by_split["train"] & by_split["val"])
        assert not (by_split["train"] & by_split["test"])

    def test_single_sample_dataset(self, tmp_path):
        cfg = DatasetConfig(seed=1, resolution=16,
                            splits=(("train", 1.0),))
        manifest = generate_split(1, cfg, tmp_path)
        recs = load_manifest(manifest)
        assert len(recs) == 1
        s = load_sample(manifest, recs[0])
        assert s.exo.videos.shape[0] == 4
        assert len(s.ego_poses) == 9

    def test_regeneration_reproduces_content_hashes(self, tmp_path):
        import hashlib
        cfg = DatasetConfig(seed=9, resolution=16, splits=(("train", 1.0),))
        m1 = generate_split(2, cfg, tmp_path / "a")
        m2 = generate_split(2, cfg, tmp_path / "b")

        def digest(root):
            h = hashlib.sha256()
            for p in sorted(Path(root).rglob("*.npy")):
                h.update(p.name.encode())
                h.update(p.read_bytes())
            return h.hexdigest()

        assert digest(m1.parent) == digest(m2.parent)
