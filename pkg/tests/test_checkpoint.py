import struct

import numpy as np
import pytest

from mefem.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    read_checkpoint,
    write_checkpoint,
)


class TestRoundTrip:
    def test_arrays_and_meta_survive(self, tmp_path):
        path = tmp_path / "state.mefe"
        arrays = {
            "enc.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
            "enc.bias": np.zeros(3, dtype=np.float64),
            "step": np.asarray(7, dtype=np.int64),
            "flags": np.array([True, False]),
        }
        meta = {
            "config": {"lr": 1e-3, "name": "tiny", "warmup": None},
            "rng": {"state": {"state": 2**100, "inc": 3}},
            "step": 7,
        }
        write_checkpoint(path, arrays, meta)
        got_arrays, got_meta = read_checkpoint(path)
        assert set(got_arrays) == set(arrays)
        for key in arrays:
            assert got_arrays[key].dtype == arrays[key].dtype
            assert np.array_equal(got_arrays[key], arrays[key])
        assert got_meta == meta
        assert got_meta["rng"]["state"]["state"] == 2**100  # big ints intact

    def test_bitwise_float_fidelity(self, tmp_path):
        path = tmp_path / "f.mefe"
        rng = np.random.default_rng(0)
        arr = rng.normal(size=257).astype(np.float32)
        write_checkpoint(path, {"a": arr}, {})
        got, _ = read_checkpoint(path)
        assert got["a"].tobytes() == arr.tobytes()

    def test_empty_arrays_ok(self, tmp_path):
        path = tmp_path / "e.mefe"
        write_checkpoint(path, {}, {"note": "initial"})
        arrays, meta = read_checkpoint(path)
        assert arrays == {}
        assert meta["note"] == "initial"


class TestLayout:
    def test_header_prefix_layout(self, tmp_path):
        path = tmp_path / "l.mefe"
        write_checkpoint(path, {"x": np.zeros(2, dtype=np.float32)}, {"k": 1})
        blob = path.read_bytes()
        assert blob[:4] == MAGIC == b"MEFE"
        (version,) = struct.unpack_from("<I", blob, 4)
        assert version == FORMAT_VERSION
        (header_len,) = struct.unpack_from("<Q", blob, 8)
        header = blob[16 : 16 + header_len].decode("utf-8")
        assert header.startswith("{")
        # payload follows immediately: 2 float32 zeros
        assert blob[16 + header_len :] == b"\x00" * 8

    def test_payload_is_little_endian(self, tmp_path):
        path = tmp_path / "be.mefe"
        big = np.array([1.0], dtype=">f8")
        write_checkpoint(path, {"x": big}, {})
        got, _ = read_checkpoint(path)
        assert got["x"][0] == 1.0
        assert got["x"].dtype.byteorder in ("<", "=")


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mefe"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v.mefe"
        write_checkpoint(path, {}, {})
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.mefe"
        write_checkpoint(path, {"x": np.ones(100, dtype=np.float64)}, {})
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_no_temp_files_left_behind(self, tmp_path):
        path = tmp_path / "a.mefe"
        write_checkpoint(path, {"x": np.ones(4)}, {})
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []
