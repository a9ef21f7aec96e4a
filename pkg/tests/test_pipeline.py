"""Stage orchestration: config schema, prerequisites, trainable-set census,
stage-2 continuity, resume determinism, checkpoints, CLI, ablation grid."""

import json
from pathlib import Path

import numpy as np
import pytest

from exo2ego.backbone import pad_first_frame
from exo2ego.checkpoint import load_checkpoint, save_checkpoint, state_hash
from exo2ego.cli import cli
from exo2ego.codec import CodecConfig
from exo2ego.diffusion import NoiseSchedule
from exo2ego.errors import ConfigError, MissingPrerequisite
from exo2ego.nn import as_tensor, no_grad
from exo2ego.pipeline import (
    ExperimentManifest,
    SamplerContext,
    StageConfig,
    _diffusion_batch_loss,
    aligner_from_checkpoint,
    apply_trainable_set,
    build_model,
    evaluate_split,
    load_config_file,
    model_from_checkpoint,
    prepare_split,
    rng_for,
    run_ablation_grid,
    run_align_stage,
    run_diffusion_stage,
    trainable_patterns,
)
from exo2ego.synthdata import load_manifest, load_sample, save_clip

TINY_MODEL = {"c_m": 32, "num_blocks": 2, "num_heads": 2, "ffn_mult": 2.0, "qk_norm": True}
TINY_ALIGN = {"dim": 32, "heads": 2, "num_blocks": 1, "dim_head": 8, "ffn_mult": 2.0,
              "use_peg": True}
TINY_LORA = {"rank": 2, "alpha": 2}


def stage_cfg(stage, manifest, out, **kw):
    base = dict(stage=stage, data_manifest=str(manifest), out_dir=str(out),
                seed=0, steps=6, batch_size=2, model=TINY_MODEL,
                align_model=TINY_ALIGN, lora=TINY_LORA)
    base.update(kw)
    return StageConfig.from_dict(base)


@pytest.fixture(scope="module")
def trained_stack(tiny_dataset, tmp_path_factory):
    """align -> stage1 -> stage2 once, shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("stack")
    a = run_align_stage(stage_cfg("align", tiny_dataset, root / "align", steps=8))
    s1 = run_diffusion_stage(stage_cfg("stage1_multiexocon", tiny_dataset, root / "s1",
                                       align_checkpoint=a["checkpoint"]))
    s2 = run_diffusion_stage(stage_cfg("stage2_poseinj", tiny_dataset, root / "s2",
                                       align_checkpoint=a["checkpoint"],
                                       init_checkpoint=s1["checkpoint"]))
    return {"align": a, "s1": s1, "s2": s2, "root": root}


class TestConfigSchema:
    def test_unknown_key_rejected_with_name(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"stage": "align", "mistyped_key": 1}))
        with pytest.raises(ConfigError, match="mistyped_key"):
            load_config_file(p)

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            StageConfig.from_dict({"stage": "align", "model": {"bogus": 3}})

    def test_parse_error_carries_line_info(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "stage": "align",\n  !\n}')
        with pytest.raises(ConfigError, match=r":3:"):
            load_config_file(p)

    def test_bad_stage_name(self):
        with pytest.raises(ConfigError):
            StageConfig.from_dict({"stage": "stage9"})

    def test_round_trip(self):
        cfg = StageConfig(stage="align", betas=(0.9, 0.95))
        again = StageConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_paper_preset_values(self):
        cfg = StageConfig.paper_preset("stage1_multiexocon")
        assert cfg.steps == 100_000
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 3
        assert cfg.lora == {"rank": 128, "alpha": 128}
        assert StageConfig.paper_preset("align").batch_size == 128

    def test_gt_frame_configuration_exists(self, tiny_dataset, tmp_path):
        # the "+GT frame" row: no aligner, ground-truth first frame
        cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path,
                        use_align=False, gt_first_frame=True)
        assert cfg.gt_first_frame and not cfg.use_align


class TestPrerequisites:
    def test_stage1_needs_align_checkpoint(self, tiny_dataset, tmp_path):
        cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path)
        with pytest.raises(MissingPrerequisite):
            run_diffusion_stage(cfg)

    def test_stage2_needs_init_checkpoint(self, tiny_dataset, tmp_path, trained_stack):
        cfg = stage_cfg("stage2_poseinj", tiny_dataset, tmp_path,
                        align_checkpoint=trained_stack["align"]["checkpoint"])
        with pytest.raises(MissingPrerequisite):
            run_diffusion_stage(cfg)

    def test_gt_first_frame_waives_align_requirement(self, tiny_dataset, tmp_path):
        cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path,
                        steps=2, gt_first_frame=True)
        result = run_diffusion_stage(cfg)
        assert Path(result["checkpoint"]).exists()

    def test_wrong_checkpoint_kind_rejected(self, trained_stack):
        with pytest.raises(MissingPrerequisite):
            aligner_from_checkpoint(trained_stack["s1"]["checkpoint"])


class TestTrainableCensus:
    @pytest.mark.parametrize("stage,conditioning", [
        ("stage1_multiexocon", "tokens"),
        ("stage1_multiexocon", "vawan"),
        ("stage2_poseinj", "tokens"),
    ])
    def test_gradient_census_matches_declared_set(self, tiny_dataset, stage, conditioning):
        cfg = stage_cfg(stage, tiny_dataset, "/tmp/unused", conditioning=conditioning,
                        gt_first_frame=(conditioning == "tokens"))
        codec = CodecConfig()
        from exo2ego.pipeline import _arch_for
        arch = _arch_for(cfg, codec)
        model = build_model(arch, rng_for(0, "census"))
        patterns = trainable_patterns(cfg)
        declared = set(apply_trainable_set(model, patterns))
        prep = prepare_split(tiny_dataset, "train", codec, cfg.views, cfg.seed, limit=4)
        if conditioning == "tokens":
            prep.cond_first = prep.ego_latents[:, 0:1].copy()
        schedule = NoiseSchedule(T=50)
        from exo2ego.nn.optim import Adam
        params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        opt = Adam(params, lr=1e-3, weight_decay=0.0)
        # one step so zero-init up projections move off zero, then census
        for it in range(2):
            model.zero_grad()
            loss = _diffusion_batch_loss(model, cfg, prep,
                                         np.array([0, 1]), schedule, step=it)
            loss.backward()
            if it == 0:
                opt.step()
        with_grad = {n for n, p in model.named_parameters()
                     if p.grad is not None and np.abs(p.grad).sum() > 0}
        assert with_grad == declared

    def test_align_stage_census_all_parameters(self, tiny_dataset):
        from exo2ego.align import AlignConfig, ViewAligner, align_loss_t
        from exo2ego.nn.optim import Adam
        codec = CodecConfig()
        acfg = AlignConfig(dim=32, heads=2, num_blocks=1, dim_head=8, ffn_mult=2.0,
                           c_dim=16, out_channels=22)
        model = ViewAligner(acfg, rng_for(0, "align-census"))
        declared = set(apply_trainable_set(model, trainable_patterns(
            StageConfig(stage="align"))))
        prep = prepare_split(tiny_dataset, "train", codec, 4, 0, limit=4)
        params = [(n, p) for n, p in model.named_parameters()]
        opt = Adam(params, lr=1e-3, weight_decay=0.0)
        for it in range(2):
            model.zero_grad()
            pred, _ = model.forward_t(as_tensor(prep.exo_latents[:2, :, 0]),
                                      as_tensor(prep.align_pluckers[:2]))
            align_loss_t(pred, as_tensor(prep.ego_latents[:2, 0:1])).backward()
            if it == 0:
                opt.step()
        with_grad = {n for n, p in model.named_parameters()
                     if p.grad is not None and np.abs(p.grad).sum() > 0}
        assert with_grad == declared

    def test_train_whole_removes_adapters(self, tiny_dataset):
        cfg = stage_cfg("stage1_multiexocon", tiny_dataset, "/tmp/unused",
                        train_whole=True, gt_first_frame=True)
        from exo2ego.pipeline import _arch_for
        arch = _arch_for(cfg, CodecConfig())
        assert arch["lora"] is None
        model = build_model(arch, rng_for(0, "whole"))
        names = [n for n, _ in model.named_parameters()]
        assert not any(n.endswith(".down") or n.endswith(".up") for n in names)


class TestStage2Continuity:
    def test_step0_loss_equals_stage1_loss_exactly(self, tiny_dataset, trained_stack):
        codec = CodecConfig()
        s1 = load_checkpoint(trained_stack["s1"]["checkpoint"])
        m1 = model_from_checkpoint(s1)
        cfg2 = stage_cfg("stage2_poseinj", tiny_dataset, "/tmp/unused",
                         align_checkpoint=trained_stack["align"]["checkpoint"],
                         init_checkpoint=trained_stack["s1"]["checkpoint"])
        from exo2ego.pipeline import _arch_for, load_partial
        m2 = build_model(_arch_for(cfg2, codec), rng_for(0, "stage2-model"))
        load_partial(m2, s1.params)

        prep = prepare_split(tiny_dataset, "train", codec, 4, 0, limit=4)
        prep.cond_first = prep.ego_latents[:, 0:1].copy()
        z0 = prep.ego_latents[[0, 1]]
        f = z0.shape[1]
        t = np.array([7, 23])
        eps = rng_for(0, "cont-noise").standard_normal(z0.shape)
        schedule = NoiseSchedule(T=50)
        ab = schedule.alpha_bar[t][:, None, None, None, None]
        z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        cond = pad_first_frame(prep.cond_first[[0, 1]], f)

        with no_grad():
            toks1 = m1.cond_embed.forward_t(as_tensor(prep.exo_latents[[0, 1]]))
            out1 = m1.denoiser.forward_t(as_tensor(z_t), as_tensor(cond), toks1, None, t)
            toks2 = m2.cond_embed.forward_t(as_tensor(prep.exo_latents[[0, 1]]))
            pose = m2.pose_stack.features_t(as_tensor(prep.pose_grids[[0, 1]]))
            out2 = m2.denoiser.forward_t(as_tensor(z_t), as_tensor(cond), toks2, pose, t)
        l1 = float(((out1.data - eps) ** 2).mean())
        l2 = float(((out2.data - eps) ** 2).mean())
        assert l1 == l2
        assert np.array_equal(out1.data, out2.data)


class TestResume:
    def test_resume_is_bit_identical(self, tiny_dataset, tmp_path):
        full_cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path / "full",
                             steps=6, gt_first_frame=True)
        full = run_diffusion_stage(full_cfg)

        half_cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path / "half",
                             steps=3, gt_first_frame=True)
        half = run_diffusion_stage(half_cfg)
        resumed_cfg = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path / "resumed",
                                steps=6, gt_first_frame=True)
        resumed = run_diffusion_stage(resumed_cfg, resume_from=half["checkpoint"])

        assert np.allclose(full["curve"], resumed["curve"], atol=0)
        pf = load_checkpoint(full["checkpoint"]).params
        pr = load_checkpoint(resumed["checkpoint"]).params
        assert state_hash(pf) == state_hash(pr)

    def test_same_config_same_seed_identical_runs(self, tiny_dataset, tmp_path):
        cfg_a = stage_cfg("align", tiny_dataset, tmp_path / "a", steps=4)
        cfg_b = stage_cfg("align", tiny_dataset, tmp_path / "b", steps=4)
        a = run_align_stage(cfg_a)
        b = run_align_stage(cfg_b)
        assert a["curve"] == b["curve"]
        ha = state_hash(load_checkpoint(a["checkpoint"]).params)
        hb = state_hash(load_checkpoint(b["checkpoint"]).params)
        assert ha == hb


class TestCheckpointContainer:
    def test_round_trip_all_sections(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(3)}
        opt = {"step_count": 5, "m::w": np.zeros((2, 3))}
        path = save_checkpoint(tmp_path / "ck.npz", kind="test",
                               config={"a": 1}, step=5, params=params,
                               optimizer=opt, rng_state={"seed": 3},
                               extra={"note": "x"})
        ck = load_checkpoint(path)
        assert ck.kind == "test" and ck.step == 5
        assert ck.config == {"a": 1}
        assert np.array_equal(ck.params["w"], params["w"])
        assert ck.optimizer["step_count"] == 5
        assert np.array_equal(ck.optimizer["m::w"], np.zeros((2, 3)))
        assert ck.extra["note"] == "x"

    def test_model_rebuild_from_checkpoint(self, trained_stack):
        ck = load_checkpoint(trained_stack["s2"]["checkpoint"])
        model = model_from_checkpoint(ck)
        assert model.pose_stack is not None
        assert state_hash(model.state_dict()) == state_hash(ck.params)


class TestSamplingAndEval:
    def test_sampler_produces_video_shape(self, tiny_dataset, trained_stack):
        recs = [r for r in load_manifest(tiny_dataset) if r["split"] == "val"]
        sample = load_sample(tiny_dataset, recs[0])
        ctx = SamplerContext.load(trained_stack["s2"]["checkpoint"],
                                  trained_stack["align"]["checkpoint"])
        video = ctx.sample(sample, steps=3, seed=0)
        assert video.shape == sample.ego_video.shape
        assert np.isfinite(video).all()
        again = ctx.sample(sample, steps=3, seed=0)
        assert np.array_equal(video, again)

    def test_evaluate_split_report(self, tiny_dataset, trained_stack, tmp_path):
        rep = evaluate_split(trained_stack["s2"]["checkpoint"], tiny_dataset,
                             split="val", steps=2, seed=0,
                             align_checkpoint=trained_stack["align"]["checkpoint"],
                             limit=1)
        assert rep.aggregates["all"]["psnr"]["n"] == 1
        rep.save(tmp_path / "r.json")
        loaded = rep.load(tmp_path / "r.json")
        assert loaded.to_json() == rep.to_json()

    def test_gt_predictions_hit_upper_bound(self, tiny_dataset, tmp_path):
        preds = tmp_path / "preds"
        preds.mkdir()
        recs = [r for r in load_manifest(tiny_dataset) if r["split"] == "val"]
        for rec in recs:
            s = load_sample(tiny_dataset, rec)
            save_clip(preds / rec["sample_id"], s.ego_video, 3.0)
        rep = evaluate_split(None, tiny_dataset, split="val", predictions_dir=preds)
        assert rep.aggregates["all"]["psnr"]["mean"] == 100.0
        assert rep.aggregates["all"]["ssim"]["mean"] == pytest.approx(1.0)


class TestExperimentManifest:
    def test_content_hash_excludes_wall_clock(self, trained_stack, tmp_path):
        ck = trained_stack["s1"]["checkpoint"]
        from exo2ego.checkpoint import file_hash
        m1 = ExperimentManifest("h", "d", {"s1.npz": file_hash(ck)}, [], wall_clock_s=1.0)
        m2 = ExperimentManifest("h", "d", {"s1.npz": file_hash(ck)}, [], wall_clock_s=99.0)
        assert m1.content_hash() == m2.content_hash()
        p = tmp_path / "m.json"
        m1.save(p)
        loaded = ExperimentManifest.load(p)
        assert loaded.content_hash() == m1.content_hash()

    def test_artifact_validation(self, trained_stack, tmp_path):
        from exo2ego.checkpoint import file_hash
        ck = Path(trained_stack["s1"]["checkpoint"])
        man = ExperimentManifest("h", "d", {ck.name: file_hash(ck)}, [], 0.0)
        man.validate_artifacts(ck.parent)
        man2 = ExperimentManifest("h", "d", {"missing.npz": "00"}, [], 0.0)
        with pytest.raises(MissingPrerequisite):
            man2.validate_artifacts(ck.parent)


class TestAblationGrid:
    def test_empty_axes_single_run(self, tiny_dataset, tmp_path):
        base = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path / "grid",
                         steps=2, gt_first_frame=True)
        result = run_ablation_grid(base, {}, eval_steps=2, eval_limit=1)
        assert len(result["rows"]) == 1

    def test_pose_axis_structure(self, tiny_dataset, tmp_path, trained_stack):
        base = stage_cfg("stage2_poseinj", tiny_dataset, tmp_path / "grid2",
                         steps=2,
                         align_checkpoint=trained_stack["align"]["checkpoint"],
                         init_checkpoint=trained_stack["s1"]["checkpoint"])
        result = run_ablation_grid(base, {"use_pose": [False, True]},
                                   eval_steps=2, eval_limit=1)
        assert [r["axes"]["use_pose"] for r in result["rows"]] == [False, True]
        assert "use_pose" in result["table"].splitlines()[0]
        assert len(result["table"].splitlines()) == 3

    def test_views_axis_mirrors_view_ablation(self, tiny_dataset, tmp_path):
        base = stage_cfg("stage1_multiexocon", tiny_dataset, tmp_path / "grid3",
                         steps=2, gt_first_frame=True)
        result = run_ablation_grid(base, {"views": [1, 4]}, eval_steps=2, eval_limit=1)
        assert [r["axes"]["views"] for r in result["rows"]] == [1, 4]

    def test_unknown_axis_rejected(self, tiny_dataset):
        base = stage_cfg("stage1_multiexocon", tiny_dataset, "/tmp/unused",
                         gt_first_frame=True)
        with pytest.raises(ConfigError):
            run_ablation_grid(base, {"bogus_axis": [1]})


class TestCLI:
    def test_invalid_config_key_nonzero_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"stage": "align", "nope": 1}))
        rc = cli(["--config", str(p), "train-align"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"
        assert "nope" in err["message"]

    def test_gen_data_and_eval_gt_pipeline(self, tmp_path, capsys):
        rc = cli(["--seed", "1", "--out", str(tmp_path / "d"), "gen-data",
                  "--n", "3", "--resolution", "16"])
        assert rc == 0
        manifest = json.loads(capsys.readouterr().out.strip())["manifest"]
        recs = [r for r in load_manifest(manifest) if r["split"] == "val"]
        preds = tmp_path / "preds"
        preds.mkdir()
        for rec in recs:
            s = load_sample(manifest, rec)
            save_clip(preds / rec["sample_id"], s.ego_video, 3.0)
        rc = cli(["--out", str(tmp_path / "rep"), "eval", "--data", manifest,
                  "--split", "val", "--predictions", str(preds)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["psnr"] == 100.0

    def test_eval_requires_checkpoint_or_predictions(self, tiny_dataset, capsys):
        rc = cli(["eval", "--data", str(tiny_dataset)])
        assert rc == 2
        capsys.readouterr()

    def test_missing_data_manifest_is_config_error(self, capsys):
        rc = cli(["train-align"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"
