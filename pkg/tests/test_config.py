import json

import numpy as np
import pytest

from dualsplat.checkpoint import load_checkpoint, save_checkpoint
from dualsplat.config import (RunConfig, apply_override, config_from_dict,
                              config_to_dict, load_config, schema_entries)
from dualsplat.errors import CheckpointVersionMismatch, ConfigValidationError, \
    MissingFile


class TestConfigParsing:
    def test_round_trip(self):
        cfg = RunConfig(dataset="d", out_dir="o", seed=7)
        cfg.plan.stage1_iters = 123
        cfg.field.hidden_dim = 32
        back = config_from_dict(config_to_dict(cfg))
        assert back.seed == 7
        assert back.plan.stage1_iters == 123
        assert back.field.hidden_dim == 32

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigValidationError) as err:
            config_from_dict({"datasett": "x"})
        assert "datasett" in str(err.value)

    def test_unknown_nested_key_carries_path(self):
        with pytest.raises(ConfigValidationError) as err:
            config_from_dict({"plan": {"stage4_iters": 5}})
        assert "plan.stage4_iters" in str(err.value)

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigValidationError):
            config_from_dict({"weights": {"hf_percentile": 150.0}})

    def test_load_config_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"dataset": "d", "out_dir": "o",
                                    "plan": {"stage1_iters": 9}}))
        cfg = load_config(path)
        assert cfg.plan.stage1_iters == 9

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigValidationError):
            load_config(tmp_path / "absent.json")

    def test_load_config_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigValidationError):
            load_config(path)


class TestOverrides:
    def test_dotted_override_types(self):
        cfg = RunConfig()
        apply_override(cfg, "plan.stage2_iters=77")
        apply_override(cfg, "weights.lambda_hf=0.25")
        apply_override(cfg, "plan.densify_stage2=false")
        apply_override(cfg, "render.background_color=0.1,0.2,0.3")
        assert cfg.plan.stage2_iters == 77
        assert cfg.weights.lambda_hf == 0.25
        assert cfg.plan.densify_stage2 is False
        assert cfg.render.background_color == (0.1, 0.2, 0.3)

    def test_unknown_override_key(self):
        with pytest.raises(ConfigValidationError):
            apply_override(RunConfig(), "plan.nope=1")

    def test_malformed_override(self):
        with pytest.raises(ConfigValidationError):
            apply_override(RunConfig(), "plan.stage1_iters")


class TestSchema:
    def test_schema_covers_nested_leaves(self):
        keys = {k for k, _ in schema_entries()}
        assert "seed" in keys
        assert "plan.stage1_iters" in keys
        assert "weights.lambda_dssim" in keys
        assert "field.hidden_dim" in keys
        assert "rates.position" in keys
        assert "render.lowpass_sigma" in keys

    def test_every_schema_key_is_overridable(self):
        cfg = RunConfig()
        for key, default in schema_entries():
            if isinstance(default, bool):
                apply_override(cfg, f"{key}=true")
            elif isinstance(default, (int, float)):
                apply_override(cfg, f"{key}={default}")
            elif isinstance(default, (tuple, list)):
                apply_override(cfg, f"{key}=" + ",".join(map(str, default)))
            else:
                apply_override(cfg, f"{key}=value")


class TestCheckpointFile:
    def test_round_trip_arrays_and_meta(self, rng, tmp_path):
        arrays = {"a": rng.normal(size=(3, 4)),
                  "b": rng.integers(0, 9, size=5)}
        meta = {"stage": 2, "nested": {"x": [1, 2, 3]}}
        save_checkpoint(tmp_path / "c.npz", arrays, meta)
        back, meta2 = load_checkpoint(tmp_path / "c.npz")
        assert np.array_equal(back["a"], arrays["a"])
        assert np.array_equal(back["b"], arrays["b"])
        assert meta2 == meta

    def test_version_mismatch(self, rng, tmp_path):
        save_checkpoint(tmp_path / "c.npz", {"a": rng.normal(size=2)}, {})
        import numpy as _np
        with _np.load(tmp_path / "c.npz") as data:
            payload = {k: data[k] for k in data.files}
        payload["__version__"] = _np.array(999)
        with open(tmp_path / "c.npz", "wb") as f:
            _np.savez(f, **payload)
        with pytest.raises(CheckpointVersionMismatch):
            load_checkpoint(tmp_path / "c.npz")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "none.npz")
