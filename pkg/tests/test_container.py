import io
import struct

import numpy as np
import pytest

from odeflow import container as ct


def sample():
    rng = np.random.default_rng(0)
    return ct.Container(8, 2, 16, 3, ct.KIND_STUDENT,
                        {"a": rng.standard_normal((2, 3)).reshape(-1), "b": np.array([np.pi, -0.0, 1e-300])})


def test_round_trip_bit_exact(tmp_path):
    c = sample()
    path = tmp_path / "c.odev"
    ct.save(path, c)
    back = ct.load(path)
    assert (back.dim, back.heads, back.patches, back.mlp_ratio, back.kind) == (8, 2, 16, 3, ct.KIND_STUDENT)
    assert list(back.sections) == ["a", "b"]
    for k in c.sections:
        assert back.sections[k].tobytes() == np.asarray(c.sections[k], dtype="<f8").tobytes()
    assert back.to_bytes() == path.read_bytes()


def test_header_layout():
    raw = sample().to_bytes()
    assert raw[:4] == b"ODEV"
    assert struct.unpack("<IIIIIB", raw[4:25]) == (1, 8, 2, 16, 3, ct.KIND_STUDENT)
    assert struct.unpack("<H", raw[25:27]) == (1,)


def test_empty_container():
    c = ct.read(io.BytesIO(ct.Container(4, 1, 0, 1).to_bytes()))
    assert c.sections == {}


@pytest.mark.parametrize("cut", [0, 3, 20, 26, 30, 40])
def test_truncation_detected(cut):
    raw = sample().to_bytes()
    with pytest.raises(ct.FormatError):
        ct.read(io.BytesIO(raw[:cut] if cut else b"ODE"))


def test_truncated_payload():
    raw = sample().to_bytes()
    with pytest.raises(ct.FormatError):
        ct.read(io.BytesIO(raw[:-1]))


def test_bad_magic_and_version():
    raw = bytearray(sample().to_bytes())
    bad = bytes(b"XXXX" + raw[4:])
    with pytest.raises(ct.FormatError, match="magic"):
        ct.read(io.BytesIO(bad))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(ct.FormatError, match="version"):
        ct.read(io.BytesIO(bytes(raw)))


def test_atomic_write_leaves_no_temp(tmp_path):
    ct.atomic_write_text(tmp_path / "sub" / "x.txt", "hello")
    assert (tmp_path / "sub" / "x.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.txt"]
