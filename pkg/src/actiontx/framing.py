import struct

import numpy as np

from .errors import BadMagicError, TruncatedRecordError


DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i8"),
}
CODES_BY_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sH")
_LENGTH = struct.Struct("<I")
_TENSOR_PREFIX = struct.Struct("<HBB")


def read_exactly(stream, length: int) -> bytes:
    data = stream.read(length)
    if len(data) != length:
        raise TruncatedRecordError(length, data)
    return data


def write_header(stream, magic: bytes, version: int, fmt: str = "", *fields):
    stream.write(_HEADER.pack(magic, version))
    if fmt:
        stream.write(struct.pack("<" + fmt, *fields))


def read_header(stream, magic: bytes, fmt: str = ""):
    """Read and check a file header. Returns the version followed by the
    fields described by `fmt`.
    """
    actual_magic, version = _HEADER.unpack(read_exactly(stream, _HEADER.size))
    if actual_magic != magic:
        raise BadMagicError(magic, actual_magic)
    if not fmt:
        return (version,)
    layout = struct.Struct("<" + fmt)
    return (version,) + layout.unpack(read_exactly(stream, layout.size))


def write_frame(stream, payload: bytes):
    stream.write(_LENGTH.pack(len(payload)))
    stream.write(payload)


def read_frame(stream):
    """Read a frame and return the payload. If the stream ended cleanly,
    meaning that there is no partial frame, an empty byte string is returned.
    """
    header_bytes = stream.read(_LENGTH.size)
    if len(header_bytes) == 0:
        return b""
    if len(header_bytes) != _LENGTH.size:
        raise TruncatedRecordError(_LENGTH.size, header_bytes)
    payload_length, = _LENGTH.unpack(header_bytes)
    return read_exactly(stream, payload_length)


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    code = CODES_BY_DTYPE[np.dtype(dtype)]
    encoded_name = name.encode("utf-8")
    parts = [
        _TENSOR_PREFIX.pack(len(encoded_name), code, array.ndim),
        encoded_name,
        struct.pack(f"<{array.ndim}I", *array.shape),
        np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(),
    ]
    return b"".join(parts)


def decode_tensor(payload: bytes):
    name_length, code, ndim = _TENSOR_PREFIX.unpack_from(payload, 0)
    offset = _TENSOR_PREFIX.size
    name = payload[offset:offset + name_length].decode("utf-8")
    offset += name_length
    shape = struct.unpack_from(f"<{ndim}I", payload, offset)
    offset += 4 * ndim
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = payload[offset:]
    if len(raw) != expected:
        raise TruncatedRecordError(expected, raw)
    return name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_tensor_record(stream, name: str, array: np.ndarray):
    write_frame(stream, encode_tensor(name, array))


def read_tensor_record(stream):
    payload = read_frame(stream)
    if not payload:
        return None
    return decode_tensor(payload)
