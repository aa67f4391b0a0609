"""Binary framing for coordinator/worker sessions.

Frame: ``b"PIB1" | type (1 byte) | payload length (u32, big-endian) | payload``.
Tensor payloads use little-endian element data with big-endian dimensions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import LengthMismatch, ProtocolError, Truncated, UnknownType, WireBadMagic

MAGIC = b"PIB1"
HEADER = struct.Struct(">4sBI")
MAX_PAYLOAD = 256 * 1024 * 1024
PROTOCOL_VERSION = 1


class MsgType(IntEnum):
    HELLO = 0x01
    ASSIGN = 0x02
    DATA = 0x03
    PROGRESS = 0x04
    RESULT = 0x05
    ERROR = 0x06
    BYE = 0x07


@dataclass(frozen=True)
class Message:
    type: MsgType
    payload: bytes = b""


def encode(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise LengthMismatch(f"payload of {len(msg.payload)} bytes exceeds the 256 MiB limit")
    return HEADER.pack(MAGIC, int(msg.type), len(msg.payload)) + bytes(msg.payload)


def parse_header(head: bytes) -> tuple[MsgType, int]:
    if len(head) < HEADER.size:
        raise Truncated(f"frame header needs {HEADER.size} bytes, got {len(head)}")
    magic, kind, length = HEADER.unpack(head[:HEADER.size])
    if magic != MAGIC:
        raise WireBadMagic(f"bad magic {magic!r}")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise UnknownType(f"unknown message type 0x{kind:02x}") from None
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"declared payload {length} exceeds the 256 MiB limit")
    return kind, length


def decode(frame: bytes) -> Message:
    """Decode exactly one frame; trailing or missing bytes are errors."""
    frame = bytes(frame)
    kind, length = parse_header(frame)
    body = frame[HEADER.size:]
    if len(body) < length:
        raise Truncated(f"payload declares {length} bytes, {len(body)} present")
    if len(body) > length:
        raise LengthMismatch(f"{len(body) - length} bytes after the declared payload")
    return Message(kind, body)


# -- socket helpers -----------------------------------------------------------


def recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise Truncated(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock) -> Message:
    kind, length = parse_header(recv_exact(sock, HEADER.size))
    return Message(kind, recv_exact(sock, length) if length else b"")


def write_message(sock, msg: Message) -> None:
    sock.sendall(encode(msg))


# -- payloads -----------------------------------------------------------------


def hello_payload(version: int = PROTOCOL_VERSION) -> bytes:
    return struct.pack(">H", version)


def parse_hello(payload: bytes) -> int | None:
    if not payload:
        return None
    if len(payload) != 2:
        raise LengthMismatch("HELLO payload must be empty or a 2-byte version")
    return struct.unpack(">H", payload)[0]


def json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_json(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("JSON payload must be an object")
    return obj


DATA_DIMS = struct.Struct(">III")


def data_payload(measured: np.ndarray, X: np.ndarray, y: np.ndarray) -> bytes:
    """``N, D_in, D_x`` (big-endian) then f32 inputs, f32 ``X`` and u32 labels (little-endian)."""
    measured = np.asarray(measured)
    X = np.asarray(X)
    y = np.asarray(y)
    n = measured.shape[0]
    if measured.ndim != 2 or X.ndim != 2 or X.shape[0] != n or y.shape != (n,):
        raise ProtocolError("DATA tensors must be row-aligned 2-D inputs and a label vector")
    if np.any(y < 0):
        raise ProtocolError("labels must be nonnegative")
    return (DATA_DIMS.pack(n, measured.shape[1], X.shape[1])
            + measured.astype("<f4").tobytes() + X.astype("<f4").tobytes() + y.astype("<u4").tobytes())


def parse_data(payload: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(payload) < DATA_DIMS.size:
        raise Truncated("DATA payload shorter than its dimension header")
    n, d_in, d_x = DATA_DIMS.unpack(payload[:DATA_DIMS.size])
    sizes = (4 * n * d_in, 4 * n * d_x, 4 * n)
    if len(payload) != DATA_DIMS.size + sum(sizes):
        raise LengthMismatch(f"DATA declares {n}x{d_in} + {n}x{d_x} + {n} but carries {len(payload)} bytes")
    off = DATA_DIMS.size
    measured = np.frombuffer(payload, "<f4", n * d_in, off).reshape(n, d_in).astype(np.float64)
    off += sizes[0]
    X = np.frombuffer(payload, "<f4", n * d_x, off).reshape(n, d_x).astype(np.float64)
    off += sizes[1]
    y = np.frombuffer(payload, "<u4", n, off).astype(np.int64)
    return measured, X, y


def as_sent(a: np.ndarray) -> np.ndarray:
    """The float64 array a worker reconstructs from a DATA tensor."""
    return np.asarray(a).astype("<f4").astype(np.float64)


PROGRESS = struct.Struct(">Iddd")


def progress_payload(iteration: int, loss: float, i_xz: float, i_yz: float) -> bytes:
    return PROGRESS.pack(iteration, loss, i_xz, i_yz)


def parse_progress(payload: bytes) -> tuple[int, float, float, float]:
    if len(payload) != PROGRESS.size:
        raise LengthMismatch(f"PROGRESS payload must be {PROGRESS.size} bytes")
    return PROGRESS.unpack(payload)


def tensors_payload(meta: dict, tensors: dict) -> bytes:
    """JSON header (length-prefixed) followed by float64 little-endian tensors in header order."""
    names = sorted(tensors)
    header = dict(meta, tensors=[{"name": k, "shape": list(np.shape(tensors[k]))} for k in names])
    blob = json_payload(header)
    body = b"".join(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes() for k in names)
    return struct.pack(">I", len(blob)) + blob + body


def parse_tensors(payload: bytes) -> tuple[dict, dict]:
    if len(payload) < 4:
        raise Truncated("tensor payload lacks its header length")
    (hlen,) = struct.unpack(">I", payload[:4])
    if 4 + hlen > len(payload):
        raise Truncated("tensor payload header runs past the end")
    meta = parse_json(payload[4:4 + hlen])
    specs = meta.pop("tensors", None)
    if not isinstance(specs, list):
        raise ProtocolError("tensor payload header lacks a tensor list")
    off = 4 + hlen
    out = {}
    for spec in specs:
        try:
            name, shape = str(spec["name"]), [int(d) for d in spec["shape"]]
        except (KeyError, TypeError, ValueError):
            raise ProtocolError("bad tensor descriptor") from None
        if any(d < 0 for d in shape):
            raise ProtocolError("negative tensor dimension")
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(payload):
            raise Truncated(f"tensor {name!r} runs past the end of the payload")
        out[name] = np.frombuffer(payload, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(payload):
        raise LengthMismatch(f"{len(payload) - off} unexplained bytes after the tensors")
    return meta, out
