import io
import struct

import numpy as np
import pytest

from grounding import tensorio
from grounding.tensorio import FormatError


def test_round_trip_preserves_names_shapes_and_bits(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "scalar": np.array(3.25),
        "vector": rng.standard_normal(5),
        "conv.w": rng.standard_normal((2, 3, 3, 3)),
        "empty": np.zeros((0, 4)),
        "ünïcode": np.array([np.pi]),
    }
    path = tmp_path / "t.grnd"
    tensorio.save_tensors(path, tensors)
    back = tensorio.load_tensors(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.astype("<f8").tobytes()


def test_header_layout():
    buf = io.BytesIO()
    tensorio.write_tensors(buf, {"ab": np.array([[1.0, 2.0]])})
    raw = buf.getvalue()
    assert raw[:4] == b"GRND"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 2)
    assert raw[16:18] == b"ab"
    assert struct.unpack("<III", raw[18:30]) == (2, 1, 2)
    assert struct.unpack("<2d", raw[30:]) == (1.0, 2.0)


def test_bad_magic_rejected():
    with pytest.raises(FormatError, match="magic"):
        tensorio.read_tensors(io.BytesIO(b"NOPE" + b"\0" * 8))


def test_bad_version_rejected():
    raw = b"GRND" + struct.pack("<II", 9, 0)
    with pytest.raises(FormatError, match="version"):
        tensorio.read_tensors(io.BytesIO(raw))


def test_truncated_data_rejected():
    buf = io.BytesIO()
    tensorio.write_tensors(buf, {"x": np.arange(4.0)})
    with pytest.raises(FormatError, match="truncated"):
        tensorio.read_tensors(io.BytesIO(buf.getvalue()[:-3]))
