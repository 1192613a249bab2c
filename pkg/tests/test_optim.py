import numpy as np
import pytest

from dualsplat.checkpoint import load_checkpoint, save_checkpoint
from dualsplat.errors import NonFiniteGradient
from dualsplat.optim import (GradCheckReport, ParamGroup, ParamRegistry,
                             adam_step, grad_check, relative_error)


class TestAdamStep:
    def test_zero_gradient_zero_state_no_move(self):
        p = np.array([1.0, -2.0, 3.0])
        group = ParamGroup("x", p, lr=0.1, tag="t")
        adam_step(group, np.zeros(3))
        assert np.array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_magnitude(self):
        # hand-evaluated bias-corrected first step: m_hat = v_hat = 1,
        # update = -lr / (1 + eps)
        p = np.array([0.0])
        group = ParamGroup("x", p, lr=0.1, tag="t")
        adam_step(group, np.array([1.0]))
        expected = -0.1 * 1.0 / (1.0 + group.eps)
        assert np.isclose(p[0], expected, atol=1e-12)

    def test_frozen_group_untouched(self):
        p = np.array([5.0])
        group = ParamGroup("x", p, lr=0.1, tag="t")
        group.frozen = True
        adam_step(group, np.array([3.0]))
        assert p[0] == 5.0
        assert group.step_count == 0
        assert not np.any(group.m)

    def test_nonfinite_gradient_reports_group_and_index(self):
        group = ParamGroup("weights", np.zeros(4), lr=0.1, tag="t")
        bad = np.array([0.0, 0.0, np.nan, 0.0])
        with pytest.raises(NonFiniteGradient) as err:
            adam_step(group, bad)
        assert "weights" in str(err.value)
        assert "2" in str(err.value)

    def test_updates_are_in_place(self):
        p = np.zeros(3)
        group = ParamGroup("x", p, lr=0.1, tag="t")
        view = p
        adam_step(group, np.ones(3))
        assert view is group.param
        assert np.all(view != 0.0)

    def test_lr_decay_schedule(self):
        group = ParamGroup("x", np.zeros(1), lr=1e-2, tag="t",
                           lr_final=1e-4, lr_decay_steps=100)
        assert np.isclose(group.effective_lr(), 1e-2)
        group.step_count = 100
        assert np.isclose(group.effective_lr(), 1e-4)
        group.step_count = 50
        assert np.isclose(group.effective_lr(), 1e-3)


class TestFreezing:
    def test_freeze_unfreeze_zero_grad_is_identity(self):
        p = np.array([1.0, 2.0])
        group = ParamGroup("x", p, lr=0.5, tag="t")
        before = p.copy()
        m_before = group.m.copy()
        group.frozen = True
        adam_step(group, np.array([9.0, 9.0]))
        group.frozen = False
        adam_step(group, np.zeros(2))
        assert np.array_equal(p, before)
        assert np.array_equal(group.m, m_before)

    def test_registry_tag_freezing(self):
        reg = ParamRegistry()
        reg.add(ParamGroup("a", np.zeros(2), lr=0.1, tag="geom"))
        reg.add(ParamGroup("b", np.zeros(2), lr=0.1, tag="appearance"))
        reg.set_frozen_tags({"geom"})
        reg.step({"a": np.ones(2), "b": np.ones(2)})
        assert not np.any(reg.groups["a"].param)
        assert np.all(reg.groups["b"].param != 0.0)


class TestStateRoundTrip:
    def test_bit_exact_through_checkpoint(self, rng, tmp_path):
        reg = ParamRegistry()
        reg.add(ParamGroup("a", rng.normal(size=(4, 3)), lr=0.01, tag="t"))
        reg.add(ParamGroup("b", rng.normal(size=7), lr=0.02, tag="t"))
        for _ in range(5):
            reg.step({"a": rng.normal(size=(4, 3)), "b": rng.normal(size=7)})
        state = reg.state_arrays()
        save_checkpoint(tmp_path / "opt.npz", state, {"note": "test"})
        arrays, meta = load_checkpoint(tmp_path / "opt.npz")

        reg2 = ParamRegistry()
        reg2.add(ParamGroup("a", np.zeros((4, 3)), lr=0.01, tag="t"))
        reg2.add(ParamGroup("b", np.zeros(7), lr=0.02, tag="t"))
        reg2.load_state_arrays(arrays)
        for name in ("a", "b"):
            assert np.array_equal(reg2.groups[name].m, reg.groups[name].m)
            assert np.array_equal(reg2.groups[name].v, reg.groups[name].v)
            assert reg2.groups[name].step_count == reg.groups[name].step_count

    def test_resize_rows_preserves_survivors(self, rng):
        group = ParamGroup("a", rng.normal(size=(5, 3)), lr=0.1, tag="t")
        adam_step(group, rng.normal(size=(5, 3)))
        keep = np.array([0, 2, 4])
        old_m = group.m.copy()
        group.resize_rows(keep, n_new=2)
        assert group.m.shape == (5, 3)
        assert np.array_equal(group.m[:3], old_m[keep])
        assert not np.any(group.m[3:])


class TestGradCheck:
    def test_quadratic_loss_is_exact(self, rng):
        x = rng.normal(size=6)

        def loss_and_grads():
            return 0.5 * float(x @ x), {"x": x.copy()}

        report = grad_check(loss_and_grads, {"x": x}, step=1e-4)
        assert report.max_rel_err < 1e-8
        assert report.n_checked == 6

    def test_full_pipeline_scene_passes(self):
        from dualsplat.gradcheck import suite_pipeline
        report = suite_pipeline(max_coords=6)
        assert report.passed(1e-4)

    def test_independent_parameter_hits_atol_branch(self, rng):
        x = rng.normal(size=3)
        dead = np.zeros(2)

        def loss_and_grads():
            return 0.5 * float(x @ x), {"x": x.copy(),
                                        "dead": np.zeros(2)}

        report = grad_check(loss_and_grads, {"x": x, "dead": dead}, step=1e-4)
        assert report.per_param["dead"] < 1e-8

    def test_report_names_worst_coordinate(self, rng):
        x = rng.normal(size=4)

        def loss_and_grads():
            g = x.copy()
            g[2] += 0.5   # deliberately wrong analytic gradient
            return 0.5 * float(x @ x), {"x": g}

        report = grad_check(loss_and_grads, {"x": x}, step=1e-4)
        assert not report.passed(1e-4)
        assert report.worst_param == "x"
        assert report.worst_index == 2

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-9, -1e-9) < 1e-2
