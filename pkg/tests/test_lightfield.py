import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualsplat.errors import DegenerateBounds, MissingForwardState, ShapeMismatch
from dualsplat.lightfield import (LightFieldConfig, LightFieldNet,
                                  encoding_dim, field_backward, field_forward,
                                  fourier_encode)


def tiny_net(seed=0, **kwargs):
    cfg = LightFieldConfig(hidden_dim=8, depth=3, enc_levels_pos=2,
                           enc_levels_dir=2, **kwargs)
    return LightFieldNet(cfg, [-1, -1, -1], [1, 1, 1], seed=seed)


class TestFourierEncode:
    def test_zero_scalar(self):
        assert np.allclose(fourier_encode(np.array([[0.0]]), 2), [[0, 1, 0, 1]])

    def test_one_scalar_single_level(self):
        enc = fourier_encode(np.array([[1.0]]), 1)
        assert np.allclose(enc, [[0.0, -1.0]], atol=1e-9)

    def test_three_vector_l12_length(self):
        enc = fourier_encode(np.zeros((5, 3)), 12)
        assert enc.shape == (5, 72)

    @given(st.integers(min_value=1, max_value=4),
           st.integers(min_value=1, max_value=16))
    @settings(max_examples=30, deadline=None)
    def test_dimension_law(self, n, levels):
        enc = fourier_encode(np.zeros((2, n)), levels)
        assert enc.shape == (2, 2 * levels * n)
        assert encoding_dim(n, levels) == 2 * levels * n


class TestNormalizePosition:
    def test_box_center_maps_to_origin(self):
        net = LightFieldNet(LightFieldConfig(hidden_dim=4, depth=2),
                            [-2, 0, 4], [2, 2, 8])
        assert np.allclose(net.normalize_position(np.array([0.0, 1.0, 6.0])),
                           [0, 0, 0])

    def test_max_corner_maps_to_one(self):
        net = LightFieldNet(LightFieldConfig(hidden_dim=4, depth=2),
                            [-2, 0, 4], [2, 2, 8])
        assert np.allclose(net.normalize_position(np.array([2.0, 2.0, 8.0])),
                           [1, 1, 1])

    def test_outside_clamps(self):
        net = LightFieldNet(LightFieldConfig(hidden_dim=4, depth=2),
                            [-1, -1, -1], [1, 1, 1])
        out = net.normalize_position(np.array([5.0, -9.0, 0.25]))
        assert np.allclose(out, [1.0, -1.0, 0.25])

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(DegenerateBounds):
            LightFieldNet(LightFieldConfig(hidden_dim=4, depth=2),
                          [0, 0, 0], [1, 0, 1])


class TestForward:
    def test_dead_network_outputs_half(self, rng):
        net = tiny_net()
        for w in net.weights:
            w *= 0.0
        x = rng.uniform(-1, 1, (7, 3))
        d = rng.normal(size=(7, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        assert np.allclose(net.forward(x, d), 0.5)

    def test_output_in_unit_cube(self, rng):
        net = tiny_net(seed=3)
        x = rng.uniform(-1, 1, (50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = net.forward(x, d)
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_batch_order_invariance(self, rng):
        net = tiny_net(seed=5)
        x = rng.uniform(-1, 1, (9, 3))
        d = rng.normal(size=(9, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        batched = net.forward(x, d)
        singles = np.concatenate([net.forward(x[i:i + 1], d[i:i + 1])
                                  for i in range(9)])
        assert np.allclose(batched, singles, atol=1e-12)

    def test_shape_mismatch(self, rng):
        net = tiny_net()
        with pytest.raises(ShapeMismatch):
            net.forward(np.zeros((3, 3)), np.zeros((4, 3)))


def default_param_count():
    # analytic shape sum for the default architecture from the layer dims
    cfg = LightFieldConfig()
    ep = 6 * cfg.enc_levels_pos
    ed = 6 * cfg.enc_levels_dir
    h = cfg.hidden_dim
    fusion_in = h + ed + ep
    total = (ep * h + h)                     # first layer
    total += (cfg.depth - 2) * (h * h + h)   # plain hidden layers
    total += fusion_in * h + h               # fusion layer
    total += h * 3 + 3                       # output layer
    return total


class TestArchitecture:
    def test_default_parameter_count_pinned(self):
        net = LightFieldNet(LightFieldConfig(), [-1, -1, -1], [1, 1, 1])
        assert net.num_params() == default_param_count() == 516867

    def test_default_fusion_width(self):
        net = LightFieldNet(LightFieldConfig(), [-1, -1, -1], [1, 1, 1])
        assert net.fusion_input_dim() == 256 + 72 + 72 == 400
        dims = net.layer_dims()
        assert dims[0] == (72, 256)
        assert dims[4] == (400, 256)
        assert dims[-1] == (256, 3)

    def test_fusion_layer_generalizes_with_depth(self):
        assert LightFieldConfig(depth=8).resolved_fusion_layer() == 5
        assert LightFieldConfig(depth=6).resolved_fusion_layer() == 4
        assert LightFieldConfig(depth=3).resolved_fusion_layer() == 3

    @pytest.mark.parametrize("kwargs", [
        {"hidden_dim": 128},
        {"depth": 6},
        {"enc_levels_pos": 10, "enc_levels_dir": 10},
        {"enc_levels_pos": 14, "enc_levels_dir": 14},
        {"use_skip": False},
        {"use_staged_fusion": False},
    ])
    def test_ablation_axes_construct_with_predicted_counts(self, kwargs):
        cfg = LightFieldConfig(**kwargs)
        net = LightFieldNet(cfg, [-1, -1, -1], [1, 1, 1])
        expected = sum(din * dout + dout for din, dout in net.layer_dims())
        assert net.num_params() == expected
        # every variant must run a forward pass at full input rank
        out = net.forward(np.zeros((2, 3)), np.array([[0, 0, 1.0]] * 2))
        assert out.shape == (2, 3)

    def test_skip_changes_param_count(self):
        base = LightFieldNet(LightFieldConfig(), [-1] * 3, [1] * 3)
        no_skip = LightFieldNet(LightFieldConfig(use_skip=False),
                                [-1] * 3, [1] * 3)
        assert base.num_params() - no_skip.num_params() == 72 * 256

    def test_staged_fusion_off_moves_direction_to_layer_one(self):
        net = LightFieldNet(LightFieldConfig(use_staged_fusion=False),
                            [-1] * 3, [1] * 3)
        dims = net.layer_dims()
        assert dims[0] == (144, 256)
        assert dims[4] == (256 + 72, 256)   # skip re-injection only


class TestBackward:
    def test_zero_grad_gives_zero_everything(self, rng):
        net = tiny_net(seed=7)
        x = rng.uniform(-1, 1, (4, 3))
        d = rng.normal(size=(4, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        net.forward(x, d)
        grads, gx, gd = net.backward(np.zeros((4, 3)))
        assert not np.any(gx) and not np.any(gd)
        assert all(not np.any(g) for g in grads.values())

    def test_backward_before_forward_raises(self):
        net = tiny_net()
        with pytest.raises(MissingForwardState):
            net.backward(np.zeros((2, 3)))

    def test_field_backward_checks_cached_inputs(self, rng):
        net = tiny_net()
        x = rng.uniform(-1, 1, (3, 3))
        d = rng.normal(size=(3, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        field_forward(net, x, d)
        with pytest.raises(MissingForwardState):
            field_backward(net, x + 0.5, d, np.zeros((3, 3)))

    def test_weight_grads_match_fd_tiny_net(self, rng):
        # double-precision central differences on every weight of a tiny
        # net; the light-field adjoint must agree to 1e-5
        net = tiny_net(seed=9)
        x = rng.uniform(-0.9, 0.9, (5, 3))
        d = rng.normal(size=(5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        probe = rng.normal(size=(5, 3))

        def loss():
            return float(np.sum(net.forward(x, d) * probe))

        loss()
        grads, gx, gd = net.backward(probe)
        h = 1e-5
        for name, arr in net.params().items():
            flat = arr.reshape(-1)
            ana = grads[name].reshape(-1)
            for i in range(0, flat.size, max(flat.size // 12, 1)):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss()
                flat[i] = orig - h
                lm = loss()
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(ana[i] - fd) / max(abs(ana[i]), abs(fd), 1e-6) \
                    < 1e-5, name

    def test_input_grads_match_fd(self, rng):
        net = tiny_net(seed=11)
        x = rng.uniform(-0.9, 0.9, (4, 3))
        d = rng.normal(size=(4, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        probe = rng.normal(size=(4, 3))
        net.forward(x, d)
        _, gx, gd = net.backward(probe)
        h = 1e-6
        for arr, ana in ((x, gx), (d, gd)):
            flat = arr.reshape(-1)
            aflat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(np.sum(net.forward(x, d) * probe))
                flat[i] = orig - h
                lm = float(np.sum(net.forward(x, d) * probe))
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(aflat[i] - fd) / max(abs(aflat[i]), abs(fd), 1e-6) \
                    < 1e-4


class TestDump:
    def test_flat_dump_covers_every_parameter(self):
        net = tiny_net()
        shapes, flat = net.dump_flat()
        assert flat.size == net.num_params()
        assert len(shapes) == 2 * len(net.weights)
