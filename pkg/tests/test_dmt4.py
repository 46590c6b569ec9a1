import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from rstmri import dmt4
from rstmri.errors import FormatError

from oracles import malformed_corpus


def test_header_layout():
    buf = dmt4.encode(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"DMT4"
    assert struct.unpack("<BBBB", buf[4:8]) == (1, 0, 2, 0)
    assert struct.unpack("<QQ", buf[8:24]) == (2, 3)
    assert len(buf) == 24 + 6 * 4


def test_payload_little_endian_row_major():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    buf = dmt4.encode(a)
    assert buf[24:] == struct.pack("<4f", 1, 2, 3, 4)
    c = np.array([1 + 2j], dtype=np.complex64)
    assert dmt4.encode(c)[16:] == struct.pack("<2f", 1, 2)


@pytest.mark.parametrize("dtype", [np.float32, np.complex64, np.uint8])
def test_roundtrip_bit_exact(dtype, rng, tmp_path):
    a = (rng.standard_normal((3, 4, 5)) * 100).astype(dtype)
    if dtype is np.complex64:
        a = a + 1j * rng.standard_normal(a.shape).astype(np.float32)
    dmt4.write(tmp_path / "a.dmt4", a)
    b = dmt4.read(tmp_path / "a.dmt4")
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_special_float_values_roundtrip():
    a = np.array([np.nan, np.inf, -np.inf, -0.0, 1e-45], dtype=np.float32)
    assert dmt4.encode(dmt4.decode(dmt4.encode(a))) == dmt4.encode(a)


def test_big_endian_input_is_normalized():
    a = np.arange(4, dtype=">f4")
    assert np.array_equal(dmt4.decode(dmt4.encode(a)), a)


def test_bool_is_stored_as_uint8():
    out = dmt4.decode(dmt4.encode(np.array([True, False])))
    assert out.dtype == np.uint8 and out.tolist() == [1, 0]


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        dmt4.encode(np.zeros(3, dtype=np.float64))


def test_zero_size_and_scalar():
    for a in (np.zeros((0, 4), np.float32), np.array(5.0, dtype=np.float32)):
        b = dmt4.decode(dmt4.encode(a))
        assert b.shape == a.shape and a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name,buf", sorted(malformed_corpus().items()))
def test_malformed_raises_format_error_with_offset(name, buf):
    with pytest.raises(FormatError) as info:
        dmt4.decode(buf)
    assert 0 <= info.value.offset <= len(buf)
    assert "offset" in str(info.value)


def test_offsets_point_at_the_problem():
    good = dmt4.encode(np.zeros(3, dtype=np.float32))
    with pytest.raises(FormatError) as e:
        dmt4.decode(b"XXXX" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        dmt4.decode(good[:4] + b"\x02" + good[5:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        dmt4.decode(good + b"\x01\x02")
    assert e.value.offset == len(good)


arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
    hnp.arrays(np.complex64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)),
    hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)),
)


@given(arrays)
def test_roundtrip_property(a):
    b = dmt4.decode(dmt4.encode(a))
    assert b.shape == a.shape and b.dtype == a.dtype and a.tobytes() == b.tobytes()


@given(st.binary(max_size=80))
def test_arbitrary_bytes_never_crash(buf):
    try:
        dmt4.decode(buf)
    except FormatError:
        pass


@given(arrays, st.data())
def test_any_truncation_is_detected(a, data):
    buf = dmt4.encode(a)
    cut = data.draw(st.integers(0, len(buf) - 1))
    with pytest.raises(FormatError):
        dmt4.decode(buf[:cut])
