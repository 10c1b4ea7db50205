import io

import numpy as np
import pytest

from actiontx.errors import BadMagicError, TruncatedRecordError
from actiontx.framing import (
    decode_tensor, encode_tensor, read_frame, read_header, read_tensor_record, write_frame,
    write_header, write_tensor_record,
)


def test_vanilla():
    stream = io.BytesIO()
    write_frame(stream, b"Hello")
    write_frame(stream, b"Goodbye")
    assert stream.getvalue() == b"\x05\x00\x00\x00Hello\x07\x00\x00\x00Goodbye"

    stream.seek(0)
    assert read_frame(stream) == b"Hello"
    assert read_frame(stream) == b"Goodbye"

    # At the end of the stream `read_frame` keeps returning empty bytes
    assert read_frame(stream) == b""
    assert read_frame(stream) == b""


def test_partial_header():
    stream = io.BytesIO(b"\x05\x00")
    with pytest.raises(TruncatedRecordError, match="expected=4, partial_length=2"):
        read_frame(stream)


def test_partial_payload():
    stream = io.BytesIO(b"\x07\x00\x00\x00Good")
    with pytest.raises(TruncatedRecordError, match="expected=7, partial_length=4") as raised:
        read_frame(stream)
    assert raised.value.partial == b"Good"


def test_header_fields():
    stream = io.BytesIO()
    write_header(stream, b"TEST", 3, "8s", b"abcdefgh")
    stream.seek(0)
    assert read_header(stream, b"TEST", "8s") == (3, b"abcdefgh")


def test_bad_magic():
    stream = io.BytesIO()
    write_header(stream, b"NOPE", 1)
    stream.seek(0)
    with pytest.raises(BadMagicError, match="expected=b'ATXC', actual=b'NOPE'"):
        read_header(stream, b"ATXC")


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1", "<i8"])
def test_tensor_records_keep_dtype_and_shape(dtype):
    array = np.arange(24).reshape(2, 3, 4).astype(dtype)
    stream = io.BytesIO()
    write_tensor_record(stream, "trunk.conv0.weight", array)
    write_tensor_record(stream, "scalar", np.array(7, dtype=dtype))
    stream.seek(0)

    name, decoded = read_tensor_record(stream)
    assert name == "trunk.conv0.weight"
    assert decoded.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(decoded, array)
    name, scalar = read_tensor_record(stream)
    assert (name, scalar.shape, scalar.item()) == ("scalar", (), 7)
    assert read_tensor_record(stream) is None


def test_big_endian_input_is_stored_little_endian():
    array = np.array([1.5, -2.0], dtype=">f8")
    name, decoded = decode_tensor(encode_tensor("x", array))
    assert decoded.dtype == np.dtype("<f8")
    np.testing.assert_array_equal(decoded, [1.5, -2.0])


def test_short_tensor_payload():
    payload = encode_tensor("x", np.zeros(4, dtype="<f8"))
    with pytest.raises(TruncatedRecordError):
        decode_tensor(payload[:-3])
