import numpy as np
import pytest

from dualsplat.config import RunConfig, StagePlan
from dualsplat.dataset_io import SceneDataset
from dualsplat.errors import EmptySet, InsufficientViews
from dualsplat.mathutil import logit, sigmoid
from dualsplat.oracle import generate_dataset, preset_scene
from dualsplat.renderer import RenderConfig, rasterize
from dualsplat.trainer import (Trainer, compute_residuals, densify_and_prune,
                               init_reflection_set, init_scatter_set)

from conftest import make_set


@pytest.fixture(scope="module")
def tiny_dataset():
    scene = preset_scene("glass-plane-nearfield")
    train, _ = generate_dataset(scene, 4, 1, 24, seed=2)
    return train


def tiny_config(**plan_kwargs):
    cfg = RunConfig(dataset="mem", out_dir="mem", seed=3)
    cfg.model.init_points = 60
    cfg.model.sh_ramp_interval = 10
    cfg.field.hidden_dim = 8
    cfg.field.depth = 3
    cfg.field.enc_levels_pos = 2
    cfg.field.enc_levels_dir = 2
    defaults = dict(stage1_iters=6, stage2_iters=5, stage3_iters=4,
                    densify_interval=3, max_disks=200)
    defaults.update(plan_kwargs)
    for key, value in defaults.items():
        setattr(cfg.plan, key, value)
    return cfg


class TestInitReflectionSet:
    def test_copies_every_disk(self, rng):
        scat = make_set(rng, n=7)
        refl = init_reflection_set(scat)
        assert len(refl) == 7
        assert np.array_equal(refl.centers, scat.centers)
        assert np.array_equal(refl.sh_coeffs, scat.sh_coeffs)

    def test_role_and_attribute_shapes(self, rng):
        refl = init_reflection_set(make_set(rng, n=5))
        assert refl.role == "reflection"
        assert refl.fresnel_logit.shape == (5, 3)
        assert refl.reflectivity_logit.shape == (5,)

    def test_fresnel_initialization_activation(self, rng):
        refl = init_reflection_set(make_set(rng, n=3))
        assert np.max(np.abs(sigmoid(refl.fresnel_logit) - 0.04)) < 1e-6
        assert np.max(np.abs(sigmoid(refl.reflectivity_logit) - 0.1)) < 1e-6

    def test_empty_set_rejected(self, rng):
        scat = make_set(rng, n=1)
        empty = type(scat)(centers=np.zeros((0, 3)),
                           tangent_u=np.zeros((0, 3)),
                           tangent_v=np.zeros((0, 3)),
                           log_scales=np.zeros((0, 2)),
                           opacity_logit=np.zeros(0),
                           sh_coeffs=np.zeros((0, 1, 3)))
        with pytest.raises(EmptySet):
            init_reflection_set(empty)


class TestComputeResiduals:
    def test_perfect_reconstruction_gives_zero(self, rng):
        gset = make_set(rng, n=6)
        cfg = RenderConfig(background_color=(0.3, 0.3, 0.3))
        from conftest import small_camera
        cams = [small_camera(), small_camera(distance=4.0)]
        images = [rasterize(gset, c, cfg).color for c in cams]
        ds = SceneDataset(cameras=cams, images=images)
        residuals = compute_residuals(ds, gset, cfg)
        for r in residuals:
            assert np.max(np.abs(r)) < 1e-12

    def test_black_render_vs_white_gt(self):
        from conftest import small_camera
        cams = [small_camera()]
        empty = init_scatter_set([-1] * 3, [1] * 3, 1, 0, 0.5,
                                 np.random.default_rng(0))
        empty.opacity_logit[:] = -500.0    # fully transparent
        ds = SceneDataset(cameras=cams,
                          images=[np.ones((16, 16, 3), dtype=np.float32)])
        residuals = compute_residuals(ds, empty, RenderConfig())
        assert np.allclose(residuals[0], 1.0)

    def test_caches_to_disk(self, tiny_dataset, tmp_path, rng):
        gset = make_set(rng, n=4)
        compute_residuals(tiny_dataset, gset, RenderConfig(),
                          out_dir=tmp_path)
        assert (tmp_path / "residuals.npz").exists()


class TestDensifyAndPrune:
    def test_no_candidates_is_identity(self, rng):
        gset = make_set(rng, n=6, opacity_range=(0.4, 0.8))
        plan = StagePlan()
        new, keep = densify_and_prune(gset, np.zeros(6), plan, extent=100.0)
        assert len(new) == 6
        assert np.array_equal(new.centers, gset.centers)
        assert np.array_equal(keep, np.arange(6))

    def test_split_adds_one_and_shrinks_children(self, rng):
        gset = make_set(rng, n=4, opacity_range=(0.5, 0.8))
        plan = StagePlan(densify_grad_threshold=1.0, densify_scale_frac=0.01)
        gset.log_scales[2] = np.log(0.5)
        grads = np.zeros(4)
        grads[2] = 2.0
        extent = 10.0   # split cutoff 0.1 < 0.5 < size prune 2.5
        new, keep = densify_and_prune(gset, grads, plan, extent)
        assert len(new) == 5
        assert keep.size == 3
        child_scales = np.exp(new.log_scales[3:])
        assert np.allclose(child_scales, 0.5 / plan.split_scale_factor)

    def test_clone_keeps_scale(self, rng):
        gset = make_set(rng, n=3, opacity_range=(0.5, 0.8),
                        scale_range=(0.01, 0.02))
        plan = StagePlan(densify_grad_threshold=0.5)
        grads = np.array([1.0, 0.0, 0.0])
        new, keep = densify_and_prune(gset, grads, plan, extent=100.0)
        assert len(new) == 4
        assert np.array_equal(new.centers[3], gset.centers[0])

    def test_prunes_transparent_disks(self, rng):
        gset = make_set(rng, n=5, opacity_range=(0.5, 0.8))
        gset.opacity_logit[1] = logit(0.001)
        new, keep = densify_and_prune(gset, np.zeros(5), StagePlan(),
                                      extent=100.0)
        assert len(new) == 4
        assert 1 not in keep

    def test_respects_disk_budget(self, rng):
        gset = make_set(rng, n=10, opacity_range=(0.5, 0.8),
                        scale_range=(0.01, 0.02))
        plan = StagePlan(densify_grad_threshold=0.1, max_disks=12)
        new, _ = densify_and_prune(gset, np.full(10, 1.0), plan, extent=100.0)
        assert len(new) <= 12

    def test_reflection_attrs_follow_split(self, rng):
        gset = make_set(rng, n=3, role="reflection",
                        opacity_range=(0.5, 0.8))
        plan = StagePlan(densify_grad_threshold=0.5, reflectivity_prune=0.0)
        gset.log_scales[0] = np.log(10.0)
        new, keep = densify_and_prune(gset, np.array([1.0, 0, 0]), plan,
                                      extent=100.0)
        assert len(new) == 4
        assert new.fresnel_logit.shape == (4, 3)


class TestTrainerLifecycle:
    def test_requires_two_views(self, tiny_dataset):
        one_view = SceneDataset(cameras=tiny_dataset.cameras[:1],
                                images=tiny_dataset.images[:1])
        with pytest.raises(InsufficientViews):
            Trainer(one_view, tiny_config())

    def test_zero_iterations_leaves_set_unchanged(self, tiny_dataset):
        cfg = tiny_config(stage1_iters=0, stage2_iters=0, stage3_iters=0)
        tr = Trainer(tiny_dataset, cfg)
        before = tr.scat.centers.copy()
        tr.stage1_fit()
        assert np.array_equal(tr.scat.centers, before)

    def test_full_pipeline_runs_and_improves(self, tiny_dataset):
        cfg = tiny_config(stage1_iters=30, stage2_iters=10, stage3_iters=8,
                          densify_interval=10)
        tr = Trainer(tiny_dataset, cfg)
        tr.run()
        assert tr.done
        rep = tr.evaluate()
        assert np.isfinite(rep["aggregate"]["psnr"])
        assert tr.field is not None

    def test_stage2_freezes_scattering_bytes(self, tiny_dataset):
        cfg = tiny_config()
        tr = Trainer(tiny_dataset, cfg)
        tr.stage1_fit()
        frozen = {name: getattr(tr.scat, name).copy() for name in
                  ("centers", "tangent_u", "tangent_v", "log_scales",
                   "opacity_logit", "sh_coeffs")}
        tr.stage2_fit()
        for name, before in frozen.items():
            assert np.array_equal(getattr(tr.scat, name), before), name

    def test_stage3_freezes_reflection_geometry_bytes(self, tiny_dataset):
        cfg = tiny_config()
        tr = Trainer(tiny_dataset, cfg)
        tr.stage1_fit()
        tr.stage2_fit()
        frozen = {name: getattr(tr.refl, name).copy() for name in
                  ("centers", "tangent_u", "tangent_v", "log_scales",
                   "opacity_logit")}
        attrs_before = tr.refl.reflectivity_logit.copy()
        tr.stage3_fit()
        for name, before in frozen.items():
            assert np.array_equal(getattr(tr.refl, name), before), name
        # reflection attributes remain learnable in stage 3
        assert not np.array_equal(tr.refl.reflectivity_logit, attrs_before)

    def test_envmap_variant_trains(self, tiny_dataset):
        cfg = tiny_config(stage3_reflection_model="envmap")
        tr = Trainer(tiny_dataset, cfg)
        tr.run()
        assert tr.done
        assert tr.field is None or tr.config.plan.stage3_reflection_model \
            == "envmap"

    def test_determinism_same_seed_same_metrics(self, tiny_dataset):
        cfg = tiny_config(stage1_iters=12, stage2_iters=6, stage3_iters=4)
        rep_a = Trainer(tiny_dataset, cfg).run().evaluate()
        rep_b = Trainer(tiny_dataset, cfg).run().evaluate()
        assert rep_a == rep_b


class TestCheckpointResume:
    def test_mid_stage2_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        cfg = tiny_config(stage1_iters=10, stage2_iters=8, stage3_iters=4)
        full = Trainer(tiny_dataset, cfg)
        full.run()

        part = Trainer(tiny_dataset, cfg)
        part.run(max_steps=14)     # 10 stage-1 + 4 stage-2 steps
        assert part.stage == 2 and part.it == 4
        part.save(tmp_path / "mid.ckpt.npz")

        resumed = Trainer.load(tmp_path / "mid.ckpt.npz", tiny_dataset)
        assert resumed.stage == 2 and resumed.it == 4
        resumed.run()

        for name in ("centers", "tangent_u", "log_scales", "opacity_logit",
                     "sh_coeffs"):
            assert np.array_equal(getattr(resumed.scat, name),
                                  getattr(full.scat, name)), f"scat.{name}"
            assert np.array_equal(getattr(resumed.refl, name),
                                  getattr(full.refl, name)), f"refl.{name}"
        assert np.array_equal(resumed.refl.reflectivity_logit,
                              full.refl.reflectivity_logit)
        assert np.array_equal(resumed.env.texels, full.env.texels)
        for k in full.field.params():
            assert np.array_equal(resumed.field.params()[k],
                                  full.field.params()[k]), k
        assert resumed.evaluate() == full.evaluate()

    def test_checkpoint_preserves_optimizer_state(self, tiny_dataset,
                                                  tmp_path):
        cfg = tiny_config(stage1_iters=5, stage2_iters=0, stage3_iters=0)
        tr = Trainer(tiny_dataset, cfg)
        tr.run(max_steps=3)
        tr.save(tmp_path / "c.npz")
        loaded = Trainer.load(tmp_path / "c.npz", tiny_dataset)
        for name, group in tr.registry.groups.items():
            other = loaded.registry.groups[name]
            assert np.array_equal(group.m, other.m), name
            assert group.step_count == other.step_count


class TestRenderAndEvaluate:
    def test_render_view_keys_progress_with_stages(self, tiny_dataset):
        cfg = tiny_config(stage1_iters=2, stage2_iters=2, stage3_iters=2)
        tr = Trainer(tiny_dataset, cfg)
        out = tr.render_view(tiny_dataset.cameras[0])
        assert "composed" in out and "refl" not in out
        tr.run()
        out = tr.render_view(tiny_dataset.cameras[0])
        assert "refl" in out and "reflectivity" in out

    def test_evaluate_reports_mae_with_gt_normals(self, tiny_dataset):
        cfg = tiny_config(stage1_iters=2, stage2_iters=1, stage3_iters=0)
        tr = Trainer(tiny_dataset, cfg)
        tr.run()
        rep = tr.evaluate()
        assert "mae_deg" in rep["aggregate"]
        assert len(rep["per_view"]) == len(tiny_dataset)
