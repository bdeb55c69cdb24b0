"""Checkpoint format: bit-exact round trips and manifest structure."""

import json

import numpy as np
import pytest

from levelflow.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def some_arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "enc.w": rng.standard_normal((4, 8)).astype(np.float32),
        "enc.b": rng.standard_normal((8,)).astype(np.float32),
        "dec.w": rng.standard_normal((8, 4)).astype(np.float32),
    }


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        arrays = some_arrays()
        save_checkpoint(tmp_path / "ck", "tokenizer", {"n": 4}, arrays)
        kind, config, back = load_checkpoint(tmp_path / "ck")
        assert kind == "tokenizer" and config == {"n": 4}
        assert set(back) == set(arrays)
        for name in arrays:
            assert back[name].dtype == np.float32
            assert np.array_equal(back[name].view(np.uint32), arrays[name].view(np.uint32))

    def test_index_sorted_and_contiguous(self, tmp_path):
        save_checkpoint(tmp_path / "ck", "dit", {}, some_arrays())
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        names = [t["name"] for t in man["tensors"]]
        assert names == sorted(names)
        offset = 0
        for t in man["tensors"]:
            assert t["byte_offset"] == offset
            assert t["dtype"] == "f32"
            offset += 4 * int(np.prod(t["shape"]))
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        assert len(blob) == offset

    def test_little_endian_on_disk(self, tmp_path):
        arrays = {"x": np.array([1.0], dtype=np.float32)}
        save_checkpoint(tmp_path / "ck", "t", {}, arrays)
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        assert blob == np.array([1.0], dtype="<f4").tobytes()


class TestErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "nope")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "ck", "t", {}, some_arrays())
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        man["version"] = 999
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "ck")

    def test_truncated_blob(self, tmp_path):
        save_checkpoint(tmp_path / "ck", "t", {}, some_arrays())
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        (tmp_path / "ck" / "weights.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "ck")

    def test_non_f32_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="float32"):
            save_checkpoint(tmp_path / "ck", "t", {}, {"x": np.zeros(3, dtype=np.float64)})
