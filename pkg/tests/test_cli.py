import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from dualsplat.cli import main
from dualsplat.config import RunConfig, schema_entries
from dualsplat.dataset_io import SceneDataset, load_dataset, write_dataset
from dualsplat.trainer import Trainer


def run_cli(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "nearfield"
    code = run_cli("gen-data", "glass-plane-nearfield", "--out", str(out),
                   "--views", "4", "--test-views", "2", "--res", "20",
                   "--seed", "1")
    assert code == 0
    return out


def _dir_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.diff_files or cmp.left_only or cmp.right_only:
        return False
    for sub in cmp.common_dirs:
        if not _dir_identical(Path(a) / sub, Path(b) / sub):
            return False
    # dircmp's shallow compare is not enough: check bytes
    for name in cmp.common_files:
        if (Path(a) / name).read_bytes() != (Path(b) / name).read_bytes():
            return False
    return True


class TestGenData:
    def test_writes_train_and_test(self, gen_dir):
        train = load_dataset(gen_dir / "train")
        test = load_dataset(gen_dir / "test")
        assert len(train) == 4 and len(test) == 2
        assert train.meta["preset"] == "glass-plane-nearfield"

    def test_diffuse_only_has_all_zero_masks(self, tmp_path):
        out = tmp_path / "diffuse"
        assert run_cli("gen-data", "diffuse-only", "--out", str(out),
                       "--views", "2", "--test-views", "1", "--res", "12") == 0
        ds = load_dataset(out / "train")
        assert ds.masks is None or all(not np.any(m) for m in ds.masks)

    def test_same_seed_same_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert run_cli("gen-data", "glass-plane-farfield", "--out",
                           str(out), "--views", "2", "--test-views", "1",
                           "--res", "12", "--seed", "7") == 0
        assert _dir_identical(a, b)

    def test_unknown_preset_exits_2(self, tmp_path):
        assert run_cli("gen-data", "frosted-window", "--out",
                       str(tmp_path / "x")) == 2


def tiny_overrides():
    return ["--set", "model.init_points=50",
            "--set", "model.sh_ramp_interval=5",
            "--set", "plan.stage1_iters=6",
            "--set", "plan.stage2_iters=4",
            "--set", "plan.stage3_iters=3",
            "--set", "plan.densify_interval=0",
            "--set", "field.hidden_dim=8",
            "--set", "field.depth=3",
            "--set", "field.enc_levels_pos=2",
            "--set", "field.enc_levels_dir=2"]


class TestTrainEvalRender:
    def test_degenerate_plan_reduces_to_plain_fit(self, gen_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--dataset", str(gen_dir / "train"),
                       "--out", str(out), "--seed", "0",
                       *tiny_overrides(),
                       "--set", "plan.stage2_iters=0",
                       "--set", "plan.stage3_iters=0")
        assert code == 0
        report = json.loads((out / "train_metrics.json").read_text())
        assert np.isfinite(report["aggregate"]["psnr"])
        assert (out / "final.ckpt.npz").exists()
        assert (out / "losses.csv").exists()

    def test_train_eval_render_round(self, gen_dir, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train", "--dataset", str(gen_dir / "train"),
                       "--out", str(out), "--seed", "0",
                       *tiny_overrides()) == 0
        report_path = tmp_path / "report.json"
        assert run_cli("eval", "--checkpoint", str(out / "final.ckpt.npz"),
                       "--dataset", str(gen_dir / "test"),
                       "--out", str(report_path)) == 0
        report = json.loads(report_path.read_text())
        assert "aggregate" in report and "per_view" in report
        assert len(report["per_view"]) == 2

        render_out = tmp_path / "frames"
        assert run_cli("render", "--checkpoint", str(out / "final.ckpt.npz"),
                       "--dataset", str(gen_dir / "train"), "--view", "1",
                       "--out", str(render_out)) == 0
        assert (render_out / "composed.png").exists()
        assert (render_out / "scat_buffers_depth.pfm").exists()

    def test_eval_on_own_renders_hits_psnr_sentinel(self, gen_dir, tmp_path):
        # make the ground truth equal the model's own prediction: metrics
        # must then report the 99 dB sentinel and SSIM 1
        out = tmp_path / "run"
        assert run_cli("train", "--dataset", str(gen_dir / "train"),
                       "--out", str(out), "--seed", "0",
                       *tiny_overrides(),
                       "--set", "plan.stage2_iters=0",
                       "--set", "plan.stage3_iters=0") == 0
        train = load_dataset(gen_dir / "train")
        trainer = Trainer.load(out / "final.ckpt.npz", train)
        images = [trainer.render_view(c)["composed"].astype(np.float32)
                  for c in train.cameras]
        injected = SceneDataset(cameras=train.cameras, images=images)
        write_dataset(injected, tmp_path / "injected")
        report_path = tmp_path / "r.json"
        assert run_cli("eval", "--checkpoint", str(out / "final.ckpt.npz"),
                       "--dataset", str(tmp_path / "injected"),
                       "--out", str(report_path)) == 0
        report = json.loads(report_path.read_text())
        for row in report["per_view"]:
            assert row["psnr"] >= 98.9
            assert row["ssim"] >= 1.0 - 1e-9

    def test_missing_dataset_exits_2(self, tmp_path):
        assert run_cli("train", "--dataset", str(tmp_path / "none"),
                       "--out", str(tmp_path / "o")) == 2

    def test_unknown_override_exits_2(self, gen_dir, tmp_path):
        assert run_cli("train", "--dataset", str(gen_dir / "train"),
                       "--out", str(tmp_path / "o"),
                       "--set", "plan.bogus=1") == 2

    def test_resume_matches_uninterrupted(self, gen_dir, tmp_path):
        base = ["--dataset", str(gen_dir / "train"), "--seed", "3",
                *tiny_overrides()]
        full_out = tmp_path / "full"
        assert run_cli("train", *base, "--out", str(full_out)) == 0

        # the per-stage checkpoint written when stage 2 begins
        part_out = tmp_path / "part"
        assert run_cli("train", *base, "--out", str(part_out)) == 0
        resumed_out = tmp_path / "resumed"
        assert run_cli("train", *base, "--out", str(resumed_out),
                       "--resume", str(part_out / "stage2.ckpt.npz")) == 0
        full = json.loads((full_out / "train_metrics.json").read_text())
        resumed = json.loads((resumed_out / "train_metrics.json").read_text())
        assert full == resumed


class TestGradcheckCommand:
    def test_single_scope_passes(self, capsys):
        assert run_cli("gradcheck", "losses") == 0
        out = capsys.readouterr().out
        assert "losses" in out and "pass" in out

    def test_unknown_scope_exits_2(self):
        assert run_cli("gradcheck", "everything-else") == 2


class TestHelpSchemaDrift:
    def test_train_help_lists_every_config_key(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        text = capsys.readouterr().out
        for key, _ in schema_entries():
            assert key in text, f"--help is missing config key {key}"
