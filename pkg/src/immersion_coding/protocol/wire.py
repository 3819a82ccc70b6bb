"""Message types and the binary wire format.

Frame:   u32 LE payload length, then the payload.
Payload: u8 kind, 16-byte session id, u64 step, kind-specific body.

Bodies (all little-endian, matrices/vectors in the linalg layout):
  Hello      u16 name length, name (utf-8), u32 params length, params (JSON),
             32-byte fingerprint of the cloud's target keys
  SchemeAck  empty
  Input      ytilde vector, u8 w flag (0 none, 1 vector, 2 schedule matrix), w
  Utility    utilde vector
  Done       empty
  Error      u16 code, utf-8 text
"""

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .. import linalg
from ..errors import FramingError, ProtocolError

MAX_FRAME = 64 * 1024 * 1024

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<B16sQ")


class Kind(enum.IntEnum):
    HELLO = 1
    SCHEME_ACK = 2
    INPUT = 3
    UTILITY = 4
    DONE = 5
    ERROR = 6


class ErrorCode(enum.IntEnum):
    UNKNOWN_SESSION = 1
    OUT_OF_ORDER = 2
    NUMERIC = 3
    BAD_HELLO = 4
    MALFORMED = 5
    POISONED = 6


@dataclass(frozen=True, eq=False)
class WireMessage:
    kind: Kind
    session_id: bytes
    step: int = 0
    algorithm: str = ""
    params: dict = None
    fingerprint: bytes = b""
    vector: np.ndarray = None
    w: np.ndarray = None
    code: int = 0
    text: str = ""

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ProtocolError("session id must be 16 bytes")
        if not 0 <= self.step < 2**64:
            raise ProtocolError(f"step {self.step} out of range")


def hello(session_id, algorithm, params, fingerprint):
    return WireMessage(Kind.HELLO, session_id, 0, algorithm=algorithm,
                       params=dict(params or {}), fingerprint=fingerprint)


def error(session_id, step, code, text):
    return WireMessage(Kind.ERROR, session_id, step, code=int(code), text=text)


def encode_payload(msg):
    parts = [_HEAD.pack(int(msg.kind), msg.session_id, msg.step)]
    k = msg.kind
    if k == Kind.HELLO:
        name = msg.algorithm.encode()
        params = json.dumps(msg.params or {}, sort_keys=True, separators=(",", ":")).encode()
        if len(msg.fingerprint) != 32:
            raise ProtocolError("hello fingerprint must be 32 bytes")
        parts += [struct.pack("<H", len(name)), name, _LEN.pack(len(params)), params,
                  msg.fingerprint]
    elif k == Kind.INPUT:
        parts.append(linalg.vector_to_bytes(msg.vector))
        if msg.w is None:
            parts.append(b"\x00")
        else:
            w = np.asarray(msg.w, dtype=np.float64)
            parts.append(b"\x01" if w.ndim == 1 else b"\x02")
            parts.append(linalg.matrix_to_bytes(w))
    elif k == Kind.UTILITY:
        parts.append(linalg.vector_to_bytes(msg.vector))
    elif k == Kind.ERROR:
        parts += [struct.pack("<H", msg.code), msg.text.encode()]
    return b"".join(parts)


def decode_payload(buf):
    """Parse one payload; malformed content raises FramingError."""
    buf = bytes(buf)
    if len(buf) < _HEAD.size:
        raise FramingError("payload shorter than message header")
    kind, sid, step = _HEAD.unpack_from(buf, 0)
    try:
        kind = Kind(kind)
    except ValueError:
        raise FramingError(f"unknown message kind {kind}") from None
    off = _HEAD.size
    try:
        if kind == Kind.HELLO:
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode()
            off += 2 + n
            (n,) = _LEN.unpack_from(buf, off)
            params = json.loads(buf[off + 4:off + 4 + n].decode())
            off += 4 + n
            fp = buf[off:off + 32]
            if len(fp) != 32:
                raise FramingError("truncated hello fingerprint")
            off += 32
            msg = WireMessage(kind, sid, step, algorithm=name, params=params, fingerprint=fp)
        elif kind == Kind.INPUT:
            v, off = linalg.vector_from_bytes(buf, off)
            if off >= len(buf):
                raise FramingError("missing w flag")
            flag = buf[off]
            off += 1
            w = None
            if flag in (1, 2):
                w, off = linalg.matrix_from_bytes(buf, off)
                if flag == 1:
                    w = w[:, 0].copy()
            elif flag != 0:
                raise FramingError(f"bad w flag {flag}")
            msg = WireMessage(kind, sid, step, vector=v, w=w)
        elif kind == Kind.UTILITY:
            v, off = linalg.vector_from_bytes(buf, off)
            msg = WireMessage(kind, sid, step, vector=v)
        elif kind == Kind.ERROR:
            (code,) = struct.unpack_from("<H", buf, off)
            msg = WireMessage(kind, sid, step, code=code, text=buf[off + 2:].decode())
            off = len(buf)
        else:
            msg = WireMessage(kind, sid, step)
    except (struct.error, ValueError) as exc:
        raise FramingError(f"malformed {kind.name} body: {exc}") from exc
    if off != len(buf):
        raise FramingError(f"{len(buf) - off} trailing bytes in {kind.name} payload")
    return msg


def frame(payload, max_frame=MAX_FRAME):
    if len(payload) > max_frame:
        raise FramingError(f"payload of {len(payload)} bytes exceeds limit {max_frame}")
    return _LEN.pack(len(payload)) + payload


def read_frame(read_exact, max_frame=MAX_FRAME):
    """Read one payload using ``read_exact(n)``; returns None on clean EOF."""
    head = read_exact(_LEN.size)
    if not head:
        return None
    if len(head) != _LEN.size:
        raise FramingError("truncated frame length")
    (n,) = _LEN.unpack(head)
    if n > max_frame:
        raise FramingError(f"frame of {n} bytes exceeds limit {max_frame}")
    body = read_exact(n)
    if len(body) != n:
        raise FramingError(f"truncated frame: expected {n} bytes, got {len(body)}")
    return body


def pack(msg, max_frame=MAX_FRAME):
    return frame(encode_payload(msg), max_frame)
