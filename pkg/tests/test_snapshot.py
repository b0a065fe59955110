"""Tensor snapshot file format round trips."""

import numpy as np
import pytest

from slidelab.engine.rng import Rng
from slidelab.engine.snapshot import read_snapshot, write_snapshot
from slidelab.errors import DataError


def test_roundtrip_f32(tmp_path):
    arr = Rng(1).normal_array(24).reshape(2, 3, 4).astype(np.float32)
    p = tmp_path / "a.hptf"
    write_snapshot(p, arr)
    back = read_snapshot(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_roundtrip_f64(tmp_path):
    arr = Rng(2).normal_array(6).reshape(6)
    p = tmp_path / "b.hptf"
    write_snapshot(p, arr)
    back = read_snapshot(p)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, arr)


def test_roundtrip_scalar_rank0(tmp_path):
    p = tmp_path / "s.hptf"
    write_snapshot(p, np.float32(3.5))
    back = read_snapshot(p)
    assert back.shape == ()
    assert back == np.float32(3.5)


def test_bytes_are_deterministic(tmp_path):
    arr = Rng(3).normal_array(10).astype(np.float32)
    p1, p2 = tmp_path / "c1.hptf", tmp_path / "c2.hptf"
    write_snapshot(p1, arr)
    write_snapshot(p2, arr)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_header(tmp_path):
    p = tmp_path / "d.hptf"
    write_snapshot(p, np.zeros(2, dtype=np.float32))
    assert p.read_bytes()[:4] == b"HPTF"


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "e.hptf"
    write_snapshot(p, np.zeros(2, dtype=np.float32))
    raw = bytearray(p.read_bytes())
    raw[0] = ord("X")
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        read_snapshot(p)


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "f.hptf"
    write_snapshot(p, np.ones(100, dtype=np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(DataError):
        read_snapshot(p)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises((DataError, TypeError, KeyError)):
        write_snapshot(tmp_path / "g.hptf", np.zeros(2, dtype=np.int32))
