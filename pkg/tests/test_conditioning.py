"""Conditioning pathways: token law, pose-feature shapes and causality,
injection neutrality, and the channel-concat baseline."""

import numpy as np
import pytest

from exo2ego.backbone import BackboneConfig, Denoiser
from exo2ego.conditioning import (
    ExoBundle,
    MultiExoCon,
    PoseInj,
    inject_pose,
    multiexocon_tokens,
    poseinj_features,
    prepare_pose_grid,
    vawan_condition,
)
from exo2ego.errors import ShapeError, ViewCountMismatch
from exo2ego.geometry import CameraPose
from exo2ego.nn import as_tensor

from conftest import gradcheck

RNG = np.random.default_rng(0)


def bundle(V=4, F=9, res=32, with_latents=True):
    videos = RNG.uniform(-1, 1, size=(V, F, 3, res, res))
    poses = [CameraPose.identity() for _ in range(V)]
    b = ExoBundle(videos=videos, poses=poses)
    if with_latents:
        b.latents = RNG.normal(size=(V, 3, 16, res // 8, res // 8))
    return b


class TestMultiExoCon:
    def test_token_shapes_reference(self):
        emb = MultiExoCon(4, 16, 64, np.random.default_rng(0))
        b = bundle()
        b.latents = RNG.normal(size=(4, 3, 16, 8, 8))
        toks = multiexocon_tokens(emb, b)
        assert toks.shape == (48, 64)

    def test_single_token_minimal_grid(self):
        emb = MultiExoCon(4, 16, 32, np.random.default_rng(0))
        lat = RNG.normal(size=(4, 1, 16, 2, 2))
        assert emb.tokens(lat).shape == (1, 32)

    def test_paper_scale_token_count(self):
        emb = MultiExoCon(4, 16, 8, np.random.default_rng(0))
        lat = np.zeros((4, 3, 16, 32, 32))
        assert emb.tokens(lat).shape == (768, 8)

    @pytest.mark.parametrize("f,h,w", [(1, 2, 2), (3, 8, 8), (2, 4, 6), (5, 2, 4)])
    def test_token_count_law_grid(self, f, h, w):
        emb = MultiExoCon(2, 4, 8, np.random.default_rng(0))
        lat = np.zeros((2, f, 4, h, w))
        assert emb.tokens(lat).shape[0] == f * h * w // 4

    def test_view_count_mismatch(self):
        emb = MultiExoCon(4, 16, 32, np.random.default_rng(0))
        lat = RNG.normal(size=(2, 3, 16, 8, 8))
        with pytest.raises(ViewCountMismatch):
            emb.tokens(lat)

    def test_missing_latents_rejected(self):
        emb = MultiExoCon(4, 16, 32, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            multiexocon_tokens(emb, bundle(with_latents=False))

    def test_view_order_sensitivity_and_symmetric_weights(self):
        emb = MultiExoCon(4, 4, 16, np.random.default_rng(1))
        lat = RNG.normal(size=(4, 1, 4, 4, 4))
        perm = np.array([2, 3, 0, 1])
        t1 = emb.tokens(lat)
        t2 = emb.tokens(lat[perm])
        assert np.abs(t1 - t2).max() > 1e-6  # view identity is positional
        # symmetric construction: identical weight block per view -> invariance
        w = emb.embed.weight.data.reshape(4, 4 * 4, 16)
        w[:] = w[0]
        t1 = emb.tokens(lat)
        t2 = emb.tokens(lat[perm])
        assert np.abs(t1 - t2).max() < 1e-12


class TestPoseInj:
    def test_shape_law_reference(self):
        stack = PoseInj(np.random.default_rng(0))
        pl = RNG.normal(size=(9, 6, 64, 64))
        feats = poseinj_features(stack, pl)
        assert feats.shape == (3, 96, 8, 8)

    def test_paper_scale_shape(self):
        stack = PoseInj(np.random.default_rng(0))
        pl = np.zeros((9, 6, 256, 256))
        assert poseinj_features(stack, pl).shape == (3, 96, 32, 32)

    def test_constant_pose_track_gives_identical_frames(self):
        stack = PoseInj(np.random.default_rng(0))
        one = RNG.normal(size=(1, 6, 16, 16))
        pl = np.repeat(one, 9, axis=0)
        feats = poseinj_features(stack, pl)
        assert np.array_equal(feats[0], feats[1])
        assert np.array_equal(feats[0], feats[2])

    def test_causality_perturbation_map(self):
        stack = PoseInj(np.random.default_rng(0))
        pl = RNG.normal(size=(9, 6, 8, 8))
        base = poseinj_features(stack, pl)
        # perturbing RGB frame 8 must only change latent frame 2
        bumped = pl.copy()
        bumped[8] += 0.5
        out = poseinj_features(stack, bumped)
        assert np.array_equal(out[0], base[0])
        assert np.array_equal(out[1], base[1])
        assert not np.allclose(out[2], base[2])

    def test_causality_every_frame(self):
        stack = PoseInj(np.random.default_rng(0))
        pl = RNG.normal(size=(9, 6, 8, 8))
        base = poseinj_features(stack, pl)
        for frame in range(9):
            bumped = pl.copy()
            bumped[frame] += 1.0
            out = poseinj_features(stack, bumped)
            for j in range(3):
                last_rgb = j * 4
                if frame > last_rgb:
                    assert np.array_equal(out[j], base[j]), (frame, j)

    def test_frame_count_law_enforced(self):
        stack = PoseInj(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            poseinj_features(stack, RNG.normal(size=(8, 6, 16, 16)))

    def test_pooling_grid(self):
        pl = RNG.normal(size=(5, 6, 32, 32))
        grid = prepare_pose_grid(pl, 8)
        assert grid.shape == (5, 6, 4, 4)
        assert grid[0, 0, 0, 0] == pytest.approx(pl[0, 0, :8, :8].mean())
        with pytest.raises(ShapeError):
            prepare_pose_grid(RNG.normal(size=(5, 6, 30, 30)), 8)

    def test_gradient_flows_through_stack(self):
        stack = PoseInj(np.random.default_rng(0), channels=(6, 8, 8, 12))
        grid = RNG.normal(size=(1, 5, 6, 4))
        params = [p for _, p in stack.named_parameters()]

        def loss():
            return (stack.forward_t(as_tensor(grid)) ** 2).mean()

        for p in params:
            p.grad = None
        loss().backward()
        norms = [float(np.abs(p.grad).sum()) for p in params if p.grad is not None]
        assert sum(norms) > 0
        assert gradcheck(loss, params, eps=1e-5, max_entries=6) < 1e-3


class TestInjectPose:
    def test_concat_arithmetic(self):
        pre = RNG.normal(size=(3, 16, 8, 8))
        pose = RNG.normal(size=(3, 96, 8, 8))
        out = inject_pose(pre, pose)
        assert out.shape == (3, 112, 8, 8)
        assert np.array_equal(out[:, :16], pre)
        assert np.array_equal(out[:, 16:], pose)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            inject_pose(RNG.normal(size=(3, 16, 8, 8)), RNG.normal(size=(3, 96, 4, 4)))

    def test_zero_pose_features_neutral_through_zero_init_embed(self):
        cfg = BackboneConfig(c_m=32, num_blocks=2, num_heads=2, ffn_mult=2.0,
                             in_channels=8, out_channels=4, pose_channels=6)
        model = Denoiser(cfg, np.random.default_rng(0))
        r = np.random.default_rng(1)
        for name, p in model.named_parameters():
            if not name.startswith("pose_patch"):
                p.data = r.normal(size=p.data.shape) * 0.1
        z = RNG.normal(size=(2, 4, 4, 4))
        cond = RNG.normal(size=(2, 4, 4, 4))
        pose = np.zeros((2, 6, 4, 4))
        with_pose = model.denoise(z, cond, None, pose, t=3)
        plain_cfg = BackboneConfig(c_m=32, num_blocks=2, num_heads=2, ffn_mult=2.0,
                                   in_channels=8, out_channels=4)
        plain = Denoiser(plain_cfg, np.random.default_rng(0))
        r = np.random.default_rng(1)
        for name, p in plain.named_parameters():
            p.data = r.normal(size=p.data.shape) * 0.1
        without = plain.denoise(z, cond, None, None, t=3)
        assert np.array_equal(with_pose, without)


class TestVawan:
    def test_channel_concat_counts(self):
        b = bundle(V=4)
        z = RNG.normal(size=(3, 16, 4, 4))
        out = vawan_condition(b, z)
        assert out.shape == (3, 16 + 64, 4, 4)

    def test_single_view(self):
        b = bundle(V=1)
        z = RNG.normal(size=(3, 16, 4, 4))
        assert vawan_condition(b, z).shape == (3, 32, 4, 4)

    def test_baseline_forward_shape_contract(self):
        b = bundle(V=4)
        z = RNG.normal(size=(3, 16, 4, 4))
        cond = vawan_condition(b, z)[:, 16:]
        cfg = BackboneConfig(c_m=32, num_blocks=1, num_heads=2, ffn_mult=2.0,
                             in_channels=80, out_channels=16)
        model = Denoiser(cfg, np.random.default_rng(0))
        eps_hat = model.denoise(z, cond, None, None, t=0)
        assert eps_hat.shape == z.shape

    def test_alignment_checks(self):
        b = bundle(V=4)
        with pytest.raises(ShapeError):
            vawan_condition(b, RNG.normal(size=(2, 16, 4, 4)))
