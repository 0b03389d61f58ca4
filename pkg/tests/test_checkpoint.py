import json

import numpy as np
import pytest

from faceinv._version import __version__
from faceinv.checkpoint import (
    CheckpointError,
    load_checkpoint,
    payload_digest,
    save_checkpoint,
)


def sample_arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "w": rng.standard_normal((3, 4)),
        "b": rng.standard_normal(4),
        "scalar": np.array(1.5),
    }


class TestRoundTrip:
    def test_arrays_and_header(self, tmp_path):
        path = tmp_path / "model.ckpt"
        arrays = sample_arrays()
        meta = {"alpha": 0.2, "mode": "conditional", "order": ["a", "b"]}
        save_checkpoint(path, "demo", meta, arrays)
        header, loaded = load_checkpoint(path, expected_kind="demo")
        assert header["format"] == "faceinv-ckpt"
        assert header["version"] == 1
        assert header["kind"] == "demo"
        assert header["package_version"] == __version__
        assert header["meta"] == meta
        assert [s["name"] for s in header["sections"]] == ["w", "b", "scalar"]
        for name, arr in arrays.items():
            assert np.array_equal(loaded[name], arr)
            assert loaded[name].dtype == np.float64

    def test_non_contiguous_and_integer_inputs(self, tmp_path):
        path = tmp_path / "model.ckpt"
        base = np.arange(24.0).reshape(4, 6)
        arrays = {"strided": base[:, ::2], "ints": np.array([1, 2, 3])}
        save_checkpoint(path, "demo", {}, arrays)
        _, loaded = load_checkpoint(path)
        assert np.array_equal(loaded["strided"], base[:, ::2])
        assert np.array_equal(loaded["ints"], [1.0, 2.0, 3.0])
        assert loaded["ints"].dtype == np.float64

    def test_loaded_arrays_are_writable_copies(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", {}, sample_arrays())
        _, loaded = load_checkpoint(path)
        loaded["w"][0, 0] = 99.0  # must not raise

    def test_header_is_single_sorted_json_line(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", {"z": 1, "a": 2}, sample_arrays())
        first = path.read_bytes().split(b"\n", 1)[0].decode()
        assert json.loads(first)
        assert first == json.dumps(json.loads(first), sort_keys=True,
                                   separators=(",", ":"))


class TestDeterminism:
    def test_identical_saves_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        arrays = sample_arrays(seed=5)
        save_checkpoint(a, "demo", {"k": [1, 2]}, arrays)
        save_checkpoint(b, "demo", {"k": [1, 2]}, arrays)
        assert a.read_bytes() == b.read_bytes()

    def test_load_save_round_trips_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, "demo", {"k": 3}, sample_arrays(seed=6))
        header, arrays = load_checkpoint(a)
        save_checkpoint(b, header["kind"], header["meta"], arrays)
        assert a.read_bytes() == b.read_bytes()

    def test_digest_matches_header(self, tmp_path):
        path = tmp_path / "model.ckpt"
        arrays = sample_arrays(seed=7)
        save_checkpoint(path, "demo", {}, arrays)
        header, _ = load_checkpoint(path)
        assert header["payload_sha256"] == payload_digest(arrays)


class TestCorruption:
    def test_payload_bit_flip_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", {}, sample_arrays())
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_truncated_payload_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", {}, sample_arrays())
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "taa", {}, sample_arrays())
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(path, expected_kind="flp")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b'{"format":"something-else"}\n')
        with pytest.raises(CheckpointError, match="not a"):
            load_checkpoint(path)
        path.write_bytes(b"no newline at all")
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)
        path.write_bytes(b"\xff\xfe{broken\n")
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "demo", {}, {"w": np.ones(2)})
        raw = path.read_bytes()
        head, payload = raw.split(b"\n", 1)
        doc = json.loads(head)
        doc["version"] = 99
        path.write_bytes(json.dumps(doc, sort_keys=True,
                                    separators=(",", ":")).encode() + b"\n" + payload)
        with pytest.raises(CheckpointError, match="newer"):
            load_checkpoint(path)

    def test_empty_sections_rejected_at_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "x.ckpt", "demo", {}, {})
