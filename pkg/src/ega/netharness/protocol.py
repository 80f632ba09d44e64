"""Binary framing for the server/client exchange.

Frame layout (little-endian after the magic)::

    "EGAW" | version u16 | kind u8 | round u32 | payload_len u32 | payload | crc32 u32

The CRC covers every byte before it.  Vectors travel as float32.
"""

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import FrameError

MAGIC = b"EGAW"
VERSION = 1
HEADER = struct.Struct("<4sHBII")
CRC = struct.Struct("<I")
FRAME_OVERHEAD = HEADER.size + CRC.size
DEFAULT_MAX_PAYLOAD = 64 << 20

# EncodedUpload payload: client_id u32, weight f64, n_used f64, original_dim u32,
# block_count u32, h u32, then block_count * h float32 values.
UPLOAD_HEADER = struct.Struct("<IddIII")
ROUND_START_HEADER = struct.Struct("<ddI")  # n, weight, d
VECTOR_HEADER = struct.Struct("<I")  # d
HELLO_HEADER = struct.Struct("<I")  # client_id, then the utf-8 token
ERROR_HEADER = struct.Struct("<H")  # code, then a utf-8 message


class Kind(enum.IntEnum):
    HELLO = 1
    ROUND_START = 2
    ENCODED_UPLOAD = 3
    ROUND_RESULT = 4
    BYE = 5
    ERROR = 6


@dataclass(frozen=True)
class WireMessage:
    kind: Kind
    round: int
    payload: bytes = b""


def frame_encode(msg, max_payload=DEFAULT_MAX_PAYLOAD):
    if len(msg.payload) > max_payload:
        raise FrameError(f"payload of {len(msg.payload)} bytes exceeds cap {max_payload}")
    head = HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.round, len(msg.payload))
    body = head + msg.payload
    return body + CRC.pack(zlib.crc32(body))


def parse_header(head, max_payload=DEFAULT_MAX_PAYLOAD):
    """Validate a frame header; returns ``(kind, round, payload_len)``."""
    if len(head) < HEADER.size:
        raise FrameError(f"truncated header: {len(head)} of {HEADER.size} bytes")
    magic, version, kind, rnd, length = HEADER.unpack_from(head, 0)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FrameError(f"unknown message kind {kind}") from None
    if length > max_payload:
        raise FrameError(f"payload length {length} exceeds cap {max_payload}")
    return kind, rnd, length


def frame_decode(data, max_payload=DEFAULT_MAX_PAYLOAD):
    """Decode exactly one frame.  Any malformation raises ``FrameError``."""
    data = bytes(data)
    kind, rnd, length = parse_header(data, max_payload)
    total = HEADER.size + length + CRC.size
    if len(data) != total:
        raise FrameError(f"frame is {len(data)} bytes, header announces {total}")
    (crc,) = CRC.unpack_from(data, total - CRC.size)
    if crc != zlib.crc32(data[: total - CRC.size]):
        raise FrameError("CRC mismatch")
    return WireMessage(kind, rnd, data[HEADER.size: HEADER.size + length])


def _recv_exact(sock, size):
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            raise ConnectionError(f"peer closed after {len(buf)} of {size} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock, max_payload=DEFAULT_MAX_PAYLOAD):
    head = _recv_exact(sock, HEADER.size)
    _, _, length = parse_header(head, max_payload)
    rest = _recv_exact(sock, length + CRC.size)
    return frame_decode(head + rest, max_payload)


def send_frame(sock, msg):
    data = frame_encode(msg)
    sock.sendall(data)
    return len(data)


# -- typed payloads ---------------------------------------------------------

def _f32(vec):
    return np.ascontiguousarray(vec, dtype="<f4").tobytes()


def _vector(payload, offset, count):
    if len(payload) - offset != 4 * count:
        raise FrameError(f"vector needs {4 * count} bytes, payload has {len(payload) - offset}")
    return np.frombuffer(payload, "<f4", count, offset).astype(np.float64)


def _unpack(layout, payload):
    if len(payload) < layout.size:
        raise FrameError(f"payload shorter than its {layout.size}-byte header")
    return layout.unpack_from(payload, 0)


def hello(client_id, token, round_idx=0):
    return WireMessage(Kind.HELLO, round_idx, HELLO_HEADER.pack(client_id) + token.encode())


def parse_hello(msg):
    (client_id,) = _unpack(HELLO_HEADER, msg.payload)
    try:
        token = msg.payload[HELLO_HEADER.size:].decode()
    except UnicodeDecodeError:
        raise FrameError("token is not utf-8") from None
    return client_id, token


def round_start(round_idx, w, n, weight=1.0):
    payload = ROUND_START_HEADER.pack(n, weight, len(w)) + _f32(w)
    return WireMessage(Kind.ROUND_START, round_idx, payload)


def parse_round_start(msg):
    n, weight, d = _unpack(ROUND_START_HEADER, msg.payload)
    return _vector(msg.payload, ROUND_START_HEADER.size, d), n, weight


def round_result(round_idx, w):
    return WireMessage(Kind.ROUND_RESULT, round_idx, VECTOR_HEADER.pack(len(w)) + _f32(w))


def parse_round_result(msg):
    (d,) = _unpack(VECTOR_HEADER, msg.payload)
    return _vector(msg.payload, VECTOR_HEADER.size, d)


def encoded_upload(update):
    blocks = np.asarray(update.blocks)
    k, h = blocks.shape
    payload = UPLOAD_HEADER.pack(
        update.client_id, update.weight, update.n_used, update.original_dim, k, h
    ) + _f32(blocks)
    return WireMessage(Kind.ENCODED_UPLOAD, update.round, payload)


def parse_encoded_upload(msg):
    from ..fedsim.loop import EncodedUpdate

    client_id, weight, n_used, dim, k, h = _unpack(UPLOAD_HEADER, msg.payload)
    blocks = _vector(msg.payload, UPLOAD_HEADER.size, k * h).reshape(k, h)
    if not weight > 0:
        raise FrameError(f"non-positive client weight {weight}")
    return EncodedUpdate(msg.round, client_id, weight, blocks, n_used, dim)


def bye(round_idx=0, reason=""):
    return WireMessage(Kind.BYE, round_idx, reason.encode())


def error(round_idx, code, message):
    return WireMessage(Kind.ERROR, round_idx, ERROR_HEADER.pack(code) + message.encode())


def parse_error(msg):
    (code,) = _unpack(ERROR_HEADER, msg.payload)
    return code, msg.payload[ERROR_HEADER.size:].decode(errors="replace")
