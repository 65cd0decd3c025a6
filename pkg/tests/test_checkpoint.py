import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hfodistill.checkpoint import Checkpoint, CheckpointError


def _ckpt():
    return Checkpoint({"beta": 0.25, "epoch": 3, "nested": {"a": [1, 2]}},
                      {"vae": {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32(1.5) * np.ones(())}})


def test_save_load_save_byte_identical(tmp_path):
    c = _ckpt()
    c.save(tmp_path / "a.ckpt")
    Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_layout_prefix():
    raw = _ckpt().to_bytes()
    assert raw[:4] == b"SSLD"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_bad_magic():
    raw = bytearray(_ckpt().to_bytes())
    raw[:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(bytes(raw))


def test_version_mismatch():
    raw = bytearray(_ckpt().to_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(raw))


def test_truncated():
    raw = _ckpt().to_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(raw[:-3])


def test_missing_section():
    with pytest.raises(CheckpointError):
        _ckpt().tensors("classifier")


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, st.lists(st.integers(0, 4), max_size=3).map(tuple),
                              elements=st.floats(-1e6, 1e6, width=32)), max_size=4))
def test_round_trip_property(tensors):
    c = Checkpoint({"x": 1}, {"sec": tensors})
    back = Checkpoint.from_bytes(c.to_bytes())
    assert back.header == {"x": 1}
    assert back.to_bytes() == c.to_bytes()
    for k, v in tensors.items():
        np.testing.assert_array_equal(back.tensors("sec")[k], v)


def test_with_section_leaves_original():
    c = _ckpt()
    d = c.with_section("classifier", {"fc": np.zeros(2)}, trained=True)
    assert not c.has("classifier") and d.has("classifier")
    assert d.section_hash("vae") == c.section_hash("vae")
    assert d.header["trained"] is True and "trained" not in c.header
