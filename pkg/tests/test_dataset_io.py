import json

import numpy as np
import pytest

from dualsplat.dataset_io import SceneDataset, load_dataset, write_dataset
from dualsplat.errors import ManifestParseError, MissingFile
from dualsplat.image_io import read_pfm, read_png, write_pfm, write_png
from dualsplat.oracle import generate_dataset, preset_scene


@pytest.fixture(scope="module")
def tiny_dataset():
    scene = preset_scene("glass-plane-nearfield")
    train, _ = generate_dataset(scene, 3, 1, 16, seed=5)
    return train


class TestPfm:
    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        img = rng.normal(size=(7, 9, 3)).astype(np.float32)
        write_pfm(tmp_path / "x.pfm", img)
        back = read_pfm(tmp_path / "x.pfm")
        assert np.array_equal(img, back)

    def test_grayscale_round_trip(self, rng, tmp_path):
        img = rng.normal(size=(5, 4)).astype(np.float32)
        write_pfm(tmp_path / "g.pfm", img)
        assert np.array_equal(read_pfm(tmp_path / "g.pfm"), img)

    def test_rejects_non_pfm(self, tmp_path):
        (tmp_path / "bad.pfm").write_bytes(b"JUNK\n")
        with pytest.raises(ManifestParseError):
            read_pfm(tmp_path / "bad.pfm")


class TestPng:
    def test_round_trip_quantization_exact(self, rng, tmp_path):
        img = rng.uniform(0, 1, (6, 6, 3))
        quant = np.round(np.clip(img, 0, 1) * 255.0) / 255.0
        write_png(tmp_path / "x.png", quant)
        back = read_png(tmp_path / "x.png")
        assert np.max(np.abs(back - quant)) < 1e-12


class TestDatasetRoundTrip:
    def test_full_round_trip(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == len(tiny_dataset)
        for a, b in zip(loaded.images, tiny_dataset.images):
            assert np.array_equal(a, b)          # float radiance bit-exact
        for a, b in zip(loaded.normals, tiny_dataset.normals):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.masks, tiny_dataset.masks):
            assert np.array_equal(a, b)
        for ca, cb in zip(loaded.cameras, tiny_dataset.cameras):
            assert np.array_equal(ca.world_to_camera, cb.world_to_camera)
            assert ca.intrinsics == cb.intrinsics
            assert (ca.width, ca.height) == (cb.width, cb.height)
        assert np.array_equal(loaded.bounds_lo, tiny_dataset.bounds_lo)

    def test_missing_image_file_named(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path / "ds")
        (tmp_path / "ds" / "radiance" / "0001.pfm").unlink()
        with pytest.raises(MissingFile) as err:
            load_dataset(tmp_path / "ds")
        assert "view 1" in str(err.value)

    def test_malformed_matrix_rejected(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["views"][0]["world_to_camera"] = [1.0] * 8
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ManifestParseError) as err:
            load_dataset(tmp_path / "ds")
        assert "view 0" in str(err.value)

    def test_version_mismatch_rejected(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ManifestParseError):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_dataset(tmp_path / "nothing-here")

    def test_png_fallback_when_no_radiance(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        for view in manifest["views"]:
            del view["radiance"]
        manifest_path.write_text(json.dumps(manifest))
        loaded = load_dataset(tmp_path / "ds")
        for img, orig in zip(loaded.images, tiny_dataset.images):
            quant = np.round(np.clip(orig, 0, 1) * 255.0) / 255.0
            assert np.max(np.abs(img - quant)) < 1e-6
