"""Binary framing between device and edge, and the model blob format.

Frame layout (integers big-endian)::

    offset  size  field
    0       4     magic  b"CNET"
    4       1     version (0x01)
    5       1     msg_type
    6       8     payload_len (u64)
    14      n     payload

Model blob layout::

    b"CNMD" | version u8 | tensor_count u16
    per tensor: rank u8 | dims u32 * rank | float32 little-endian data
    crc32 (IEEE) of every preceding blob byte, u32

Tensor arrays inside other payloads (frames, probabilities) reuse the
per-tensor record without the blob header or CRC.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"CNET"
MODEL_MAGIC = b"CNMD"
VERSION = 0x01
HEADER = struct.Struct(">4sBBQ")
HEADER_SIZE = HEADER.size  # 14
MAX_PAYLOAD = 64 * 1024 * 1024
_LE_F32 = np.dtype("<f4")


class ProtocolError(Exception):
    """Malformed header: bad magic, version or message type."""


class FramingError(ProtocolError):
    """Frame is truncated or carries trailing bytes."""


class ResourceError(ProtocolError):
    """Payload exceeds the configured size cap."""


class IntegrityError(ProtocolError):
    """Model blob checksum does not match."""


class FormatError(ProtocolError):
    """Model blob or tensor record is structurally invalid."""


class MsgType(enum.IntEnum):
    INFER_REQ = 0x01
    INFER_RESP = 0x02
    MODEL_REQ = 0x03
    MODEL_RESP = 0x04
    ERROR = 0x05


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    UNKNOWN_PARTITION = 2
    UNSUPPORTED = 3
    INTERNAL = 4


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""


def encode_message(msg: WireMessage, max_payload=MAX_PAYLOAD) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) > max_payload:
        raise ResourceError(f"payload of {len(payload)} bytes exceeds cap {max_payload}")
    return HEADER.pack(MAGIC, VERSION, int(MsgType(msg.msg_type)), len(payload)) + payload


def parse_header(header: bytes, max_payload=MAX_PAYLOAD):
    """Validate a 14-byte header; returns ``(msg_type, payload_len)``."""
    if len(header) < HEADER_SIZE:
        raise FramingError("truncated header")
    magic, version, mtype, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}") from None
    if length > max_payload:
        raise ResourceError(f"payload length {length} exceeds cap {max_payload}")
    return mtype, length


def decode_message(data: bytes, max_payload=MAX_PAYLOAD) -> WireMessage:
    """Decode exactly one frame."""
    data = bytes(data)
    mtype, length = parse_header(data, max_payload)
    if len(data) < HEADER_SIZE + length:
        raise FramingError(f"expected {length} payload bytes, got {len(data) - HEADER_SIZE}")
    if len(data) > HEADER_SIZE + length:
        raise FramingError("trailing bytes after frame")
    return WireMessage(mtype, data[HEADER_SIZE:])


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, collect whole frames."""

    def __init__(self, max_payload=MAX_PAYLOAD):
        self._buf = bytearray()
        self.max_payload = max_payload

    def feed(self, chunk: bytes) -> list[WireMessage]:
        self._buf.extend(chunk)
        out = []
        while len(self._buf) >= HEADER_SIZE:
            mtype, length = parse_header(bytes(self._buf[:HEADER_SIZE]), self.max_payload)
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            out.append(WireMessage(mtype, bytes(self._buf[HEADER_SIZE:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def recv_message(sock, max_payload=MAX_PAYLOAD):
    """Read one frame from a blocking socket; ``None`` on clean EOF."""
    header = _recv_exact(sock, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    mtype, length = parse_header(header, max_payload)
    payload = _recv_exact(sock, length) if length else b""
    return WireMessage(mtype, payload)


def send_message(sock, msg: WireMessage):
    # one sendall per frame keeps frames atomic on a connection
    sock.sendall(encode_message(msg))


def _recv_exact(sock, n, allow_eof=False):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise FramingError(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


# -- tensor records and model blobs ------------------------------------------

def pack_tensor(arr) -> bytes:
    a = np.asarray(arr)
    if a.dtype != np.float32:
        a = a.astype(np.float32)
    if a.ndim > 255:
        raise FormatError("rank above 255")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise FormatError("dimension does not fit in u32")
    head = struct.pack(">B", a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_LE_F32).tobytes()


def unpack_tensor(buf: bytes, offset=0):
    """Parse one tensor record at ``offset``; returns ``(array, new_offset)``."""
    if offset + 1 > len(buf):
        raise FormatError("truncated tensor rank")
    rank = buf[offset]
    offset += 1
    if offset + 4 * rank > len(buf):
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f">{rank}I", buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if nbytes > len(buf) - offset:
        raise FormatError(f"tensor {dims} needs {nbytes} bytes, {len(buf) - offset} left")
    arr = np.frombuffer(buf, dtype=_LE_F32, count=count, offset=offset).astype(np.float32)
    return arr.reshape(dims), offset + nbytes


def serialize_tensors(arrays) -> bytes:
    arrays = list(arrays)
    if len(arrays) > 0xFFFF:
        raise FormatError("more than 65535 tensors")
    body = MODEL_MAGIC + struct.pack(">BH", VERSION, len(arrays))
    body += b"".join(pack_tensor(a) for a in arrays)
    return body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize_tensors(blob: bytes) -> list:
    blob = bytes(blob)
    if len(blob) < 4 + 1 + 2 + 4:
        raise FormatError("blob too short")
    body, (crc,) = blob[:-4], struct.unpack(">I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("CRC32 mismatch")
    if body[:4] != MODEL_MAGIC:
        raise FormatError(f"bad model magic {body[:4]!r}")
    version, count = struct.unpack_from(">BH", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    offset, out = 7, []
    for _ in range(count):
        arr, offset = unpack_tensor(body, offset)
        out.append(arr)
    if offset != len(body):
        raise FormatError("trailing bytes in model blob")
    return out


def serialize_model(params) -> bytes:
    """Serialise a :class:`~cachenet.submodels.SubmodelParams`."""
    return serialize_tensors(params.tensors())


def deserialize_model(blob: bytes):
    from .submodels import SubmodelParams
    return SubmodelParams.from_tensors(deserialize_tensors(blob))


# -- payload helpers -----------------------------------------------------------

def infer_request(frame) -> WireMessage:
    return WireMessage(MsgType.INFER_REQ, pack_tensor(frame))


def parse_infer_request(payload: bytes):
    arr, end = unpack_tensor(payload)
    if end != len(payload):
        raise FormatError("trailing bytes in frame payload")
    return arr


def infer_response(label: int, partition: int, probs) -> WireMessage:
    return WireMessage(MsgType.INFER_RESP, struct.pack(">II", label, partition) + pack_tensor(probs))


def parse_infer_response(payload: bytes):
    if len(payload) < 8:
        raise FormatError("short INFER_RESP payload")
    label, partition = struct.unpack_from(">II", payload)
    probs, end = unpack_tensor(payload, 8)
    if end != len(payload):
        raise FormatError("trailing bytes in INFER_RESP payload")
    return label, partition, probs


def model_request(k: int) -> WireMessage:
    return WireMessage(MsgType.MODEL_REQ, struct.pack(">I", k))


def parse_model_request(payload: bytes) -> int:
    if len(payload) != 4:
        raise FormatError("MODEL_REQ payload must be 4 bytes")
    return struct.unpack(">I", payload)[0]


def error_message(code: int, text: str = "") -> WireMessage:
    return WireMessage(MsgType.ERROR, struct.pack(">H", code) + text.encode("utf-8"))


def parse_error(payload: bytes):
    """``(code, text)``; an empty payload yields ``(None, "")``."""
    if len(payload) < 2:
        return None, ""
    return struct.unpack_from(">H", payload)[0], payload[2:].decode("utf-8", "replace")
