import os
import struct

import numpy as np
import pytest

from v2xfuse.checkpoint import TrainState, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from v2xfuse.errors import LengthError, MagicError, VersionError


@pytest.fixture(scope="module")
def state():
    s = TrainState.fresh(seed=3)
    rng = np.random.default_rng(0)
    for v in s.momentum.values():
        v[...] = rng.standard_normal(v.shape)
    s.step = 1234
    return s


def test_round_trip(state):
    data = to_bytes(state)
    back = from_bytes(data)
    assert back.step == 1234 and back.seed == 3
    assert back.meta == state.meta
    a, b = state.params.arrays(), back.params.arrays()
    assert set(a) == set(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k
    assert set(back.momentum) == set(state.momentum)
    assert to_bytes(back) == data


def test_bytes_are_deterministic():
    assert to_bytes(TrainState.fresh(5)) == to_bytes(TrainState.fresh(5))
    assert to_bytes(TrainState.fresh(5)) != to_bytes(TrainState.fresh(6))


def test_file_round_trip(tmp_path, state):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    assert to_bytes(load_checkpoint(path)) == to_bytes(state)
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_corruption(state):
    data = to_bytes(state)
    with pytest.raises(MagicError):
        from_bytes(b"NOPE" + data[4:])
    with pytest.raises(VersionError):
        from_bytes(data[:4] + struct.pack("<H", 9) + data[6:])
    for cut in (3, 40, len(data) // 2, len(data) - 1):
        with pytest.raises(LengthError):
            from_bytes(data[:cut])
    with pytest.raises(LengthError):
        from_bytes(data + b"\x00")


def test_atomic_write_leaves_old_file_on_failure(tmp_path, state, monkeypatch):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(TrainState.fresh(9), path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
