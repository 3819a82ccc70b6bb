"""Byte transports, a client-side channel, transcripts and replay.

Every transport moves whole frames (u32 length + payload) in order.  The
channel records each payload it sends and receives, so a transcript depends
only on the session inputs and never on the transport.
"""

import io
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FramingError, ProtocolError
from . import wire
from .wire import Kind

logger = logging.getLogger(__name__)

TRANSCRIPT_MAGIC = b"IMTR"
TRANSCRIPT_VERSION = 1
TO_CLOUD = 0
TO_CLIENT = 1

_REC = struct.Struct("<BI")


def _reader(stream):
    def read_exact(n):
        chunks, got = [], 0
        while got < n:
            b = stream.read(n - got)
            if not b:
                break
            chunks.append(b)
            got += len(b)
        return b"".join(chunks)

    return read_exact


class LoopbackTransport:
    """In-process transport that still pushes every frame through the framing code."""

    def __init__(self, service, max_frame=wire.MAX_FRAME):
        self.service = service
        self.max_frame = max_frame

    def request(self, payload):
        sent = wire.read_frame(_reader(io.BytesIO(wire.frame(payload, self.max_frame))),
                               self.max_frame)
        reply = self.service.handle_payload(sent)
        return wire.read_frame(_reader(io.BytesIO(wire.frame(reply, self.max_frame))),
                               self.max_frame)

    def close(self):
        pass


class SocketTransport:
    def __init__(self, host, port, timeout=30.0, max_frame=wire.MAX_FRAME):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.stream = self.sock.makefile("rb")
        self.max_frame = max_frame

    def request(self, payload):
        self.sock.sendall(wire.frame(payload, self.max_frame))
        reply = wire.read_frame(_reader(self.stream), self.max_frame)
        if reply is None:
            raise ProtocolError("connection closed by cloud")
        return reply

    def close(self):
        self.stream.close()
        self.sock.close()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service, max_frame = self.server.service, self.server.max_frame
        read_exact = _reader(self.rfile)
        while True:
            try:
                payload = wire.read_frame(read_exact, max_frame)
            except FramingError as exc:
                logger.warning("dropping connection: %s", exc)
                return
            if payload is None:
                return
            self.wfile.write(wire.frame(service.handle_payload(payload), max_frame))
            self.wfile.flush()


class CloudServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Threaded TCP server; one handler thread per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, service, host="127.0.0.1", port=0, max_frame=wire.MAX_FRAME):
        self.service = service
        self.max_frame = max_frame
        super().__init__((host, port), _Handler)


def start_server(service, host="127.0.0.1", port=0):
    """Start a background server; returns it (``server.server_address`` has the port)."""
    server = CloudServer(service, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


@dataclass
class Transcript:
    records: list = field(default_factory=list)

    def add(self, direction, payload):
        self.records.append((direction, bytes(payload)))

    def to_bytes(self):
        parts = [TRANSCRIPT_MAGIC, struct.pack("<H", TRANSCRIPT_VERSION)]
        for d, p in self.records:
            parts += [_REC.pack(d, len(p)), p]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != TRANSCRIPT_MAGIC or len(buf) < 6:
            raise FramingError("not a transcript file")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != TRANSCRIPT_VERSION:
            raise FramingError(f"unsupported transcript version {version}")
        off, recs = 6, []
        while off < len(buf):
            if len(buf) - off < _REC.size:
                raise FramingError("truncated transcript record header")
            d, n = _REC.unpack_from(buf, off)
            off += _REC.size
            if len(buf) - off < n or d not in (TO_CLOUD, TO_CLIENT):
                raise FramingError("truncated or corrupt transcript record")
            recs.append((d, buf[off:off + n]))
            off += n
        return cls(recs)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def messages(self):
        return [(d, wire.decode_payload(p)) for d, p in self.records]


class Channel:
    """Drives a ClientSession over a transport, recording a transcript."""

    def __init__(self, client, transport, transcript=None):
        self.client = client
        self.transport = transport
        self.transcript = transcript if transcript is not None else Transcript()
        self.last_ytilde = None
        self.last_utilde = None

    def _roundtrip(self, msg):
        payload = wire.encode_payload(msg)
        self.transcript.add(TO_CLOUD, payload)
        reply = self.transport.request(payload)
        self.transcript.add(TO_CLIENT, reply)
        return wire.decode_payload(reply)

    def open(self, algorithm, params=None):
        self.client.handle_ack(self._roundtrip(self.client.hello(algorithm, params)))

    def step(self, y, w=None):
        msg = self.client.send_input(y, w)
        self.last_ytilde = msg.vector
        reply = self._roundtrip(msg)
        u = self.client.receive_utility(reply)
        self.last_utilde = reply.vector
        return u

    def close(self):
        reply = self._roundtrip(self.client.done())
        self.client._check_reply(reply)
        if reply.kind != Kind.DONE:
            raise ProtocolError(f"expected DONE, got {reply.kind.name}")
        self.transport.close()


def run_session(client, transport, algorithm, inputs, params=None):
    """Open, exchange every ``(y, w)`` (or bare ``y``), close; returns ``(utilities, transcript)``."""
    ch = Channel(client, transport)
    ch.open(algorithm, params)
    us = []
    for item in inputs:
        y, w = item if isinstance(item, tuple) else (item, None)
        us.append(ch.step(y, w))
    ch.close()
    return np.array(us), ch.transcript


@dataclass
class ReplayResult:
    exchanges: int
    mismatches: list

    @property
    def ok(self):
        return not self.mismatches


def replay(transcript, service):
    """Feed the recorded client payloads to ``service`` and compare its replies byte for byte."""
    recs = transcript.records
    mismatches, n = [], 0
    for i in range(0, len(recs), 2):
        d, payload = recs[i]
        if d != TO_CLOUD or i + 1 >= len(recs) or recs[i + 1][0] != TO_CLIENT:
            raise ProtocolError(f"transcript record {i} breaks request/reply alternation")
        n += 1
        if service.handle_payload(payload) != recs[i + 1][1]:
            mismatches.append(i // 2)
    return ReplayResult(n, mismatches)


def find_plain_leaks(blob, vectors):
    """Indices of vectors whose raw little-endian float64 bytes occur in ``blob``."""
    hits = []
    for i, v in enumerate(vectors):
        pattern = np.ascontiguousarray(np.asarray(v, dtype="<f8").reshape(-1)).tobytes()
        if pattern and pattern in blob:
            hits.append(i)
    return hits
