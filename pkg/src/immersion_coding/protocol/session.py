"""Client and cloud session state machines.

The client holds the full scheme and retains each step's ``ytilde`` until the
matching utility has been decoded.  The cloud holds only the target keys and
one target algorithm per session.  Per session, messages strictly alternate
Input(k) -> Utility(k) with k = 0, 1, 2, ...
"""

import enum
import hashlib
import logging
import threading

import numpy as np

from ..algorithm import (TwoScaleAlgorithm, build_target, build_target_two_scale,
                         get_algorithm, target_step)
from ..errors import ImmersionError, NumericError, ProtocolError
from ..scheme import EncodedInput, EncodedUtility, decode_utility, encode_input
from . import wire
from .wire import ErrorCode, Kind

logger = logging.getLogger(__name__)


def session_id_from_seed(seed, label=b"session"):
    return hashlib.sha256(label + int(seed).to_bytes(16, "little", signed=True)).digest()[:16]


class ClientState(enum.Enum):
    NEW = "new"
    HELLO_SENT = "hello_sent"
    READY = "ready"
    AWAITING = "awaiting"
    DONE = "done"


class ClientSession:
    """User side.  All noise comes from ``default_rng(seed)``."""

    def __init__(self, scheme, seed=0, session_id=None):
        self.scheme = scheme
        self.session_id = session_id or session_id_from_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.state = ClientState.NEW
        self.next_step = 0
        self.retained = {}
        self.decoded = []

    def hello(self, algorithm, params=None):
        if self.state is not ClientState.NEW:
            raise ProtocolError(f"hello in state {self.state.value}")
        self.state = ClientState.HELLO_SENT
        fp = self.scheme.target_keys().fingerprint()
        return wire.hello(self.session_id, algorithm, params, fp)

    def handle_ack(self, msg):
        self._check_reply(msg)
        if self.state is not ClientState.HELLO_SENT or msg.kind != Kind.SCHEME_ACK:
            raise ProtocolError(f"unexpected {msg.kind.name} in state {self.state.value}")
        self.state = ClientState.READY

    def send_input(self, y, w=None):
        if self.state is ClientState.AWAITING:
            raise ProtocolError("input sent while a utility is still outstanding",
                                step=self.next_step)
        if self.state is not ClientState.READY:
            raise ProtocolError(f"cannot send input in state {self.state.value}")
        e = encode_input(self.scheme, y, self.rng, step=self.next_step)
        self.retained[e.step] = e
        self.state = ClientState.AWAITING
        return wire.WireMessage(Kind.INPUT, self.session_id, e.step, vector=e.ytilde,
                                w=None if w is None else np.asarray(w, dtype=np.float64))

    def receive_utility(self, msg):
        self._check_reply(msg)
        if msg.kind != Kind.UTILITY:
            raise ProtocolError(f"expected UTILITY, got {msg.kind.name}", step=msg.step)
        e = self.retained.get(msg.step)
        if e is None:
            raise ProtocolError("utility for a step with no retained input", step=msg.step)
        if msg.step != self.next_step:
            raise ProtocolError(f"utility step {msg.step}, expected {self.next_step}", step=msg.step)
        u = decode_utility(self.scheme, EncodedUtility(msg.vector, msg.step), e)
        del self.retained[msg.step]
        self.decoded.append(u)
        self.next_step += 1
        self.state = ClientState.READY
        return u

    def done(self):
        if self.state is not ClientState.READY:
            raise ProtocolError(f"cannot finish in state {self.state.value}")
        self.state = ClientState.DONE
        return wire.WireMessage(Kind.DONE, self.session_id, self.next_step)

    def _check_reply(self, msg):
        if msg.session_id != self.session_id:
            raise ProtocolError("reply for a different session")
        if msg.kind == Kind.ERROR:
            raise ProtocolError(f"cloud error {msg.code}: {msg.text}", code=msg.code,
                                step=msg.step)


class CloudState(enum.Enum):
    AWAIT_INPUT = "await_input"
    COMPUTING = "computing"
    DONE = "done"
    POISONED = "poisoned"


class CloudSession:
    def __init__(self, session_id, target):
        self.session_id = session_id
        self.target = target
        self.state = CloudState.AWAIT_INPUT
        self.lock = threading.Lock()

    @property
    def expected_step(self):
        return self.target.k


class CloudService:
    """Cloud side: target keys plus a table of independent sessions."""

    def __init__(self, keys, algorithms=None):
        self.keys = keys
        self.fingerprint = keys.fingerprint()
        self.algorithms = algorithms or get_algorithm
        self.sessions = {}
        self._lock = threading.Lock()

    def handle(self, msg):
        try:
            if msg.kind == Kind.HELLO:
                return self._hello(msg)
            with self._lock:
                sess = self.sessions.get(msg.session_id)
            if sess is None:
                return wire.error(msg.session_id, msg.step, ErrorCode.UNKNOWN_SESSION,
                                  "unknown session")
            with sess.lock:
                return self._dispatch(sess, msg)
        except ImmersionError as exc:
            logger.warning("session %s: %s", msg.session_id.hex(), exc)
            return wire.error(msg.session_id, msg.step, ErrorCode.MALFORMED, str(exc))

    def handle_payload(self, payload):
        """Bytes in, bytes out; undecodable payloads get an error reply."""
        try:
            msg = wire.decode_payload(payload)
        except ProtocolError as exc:
            sid = bytes(payload[1:17]).ljust(16, b"\0")
            return wire.encode_payload(wire.error(sid, 0, ErrorCode.MALFORMED, str(exc)))
        return wire.encode_payload(self.handle(msg))

    def _hello(self, msg):
        sid = msg.session_id
        if msg.fingerprint != self.fingerprint:
            return wire.error(sid, 0, ErrorCode.BAD_HELLO, "target key fingerprint mismatch")
        with self._lock:
            if sid in self.sessions:
                return wire.error(sid, 0, ErrorCode.BAD_HELLO, "session already exists")
        try:
            alg = self.algorithms(msg.algorithm, **(msg.params or {}))
            if isinstance(alg, TwoScaleAlgorithm):
                target = build_target_two_scale(alg, self.keys)
            else:
                target = build_target(alg, self.keys)
        except (ImmersionError, TypeError) as exc:
            return wire.error(sid, 0, ErrorCode.BAD_HELLO, str(exc))
        with self._lock:
            self.sessions[sid] = CloudSession(sid, target)
        return wire.WireMessage(Kind.SCHEME_ACK, sid, 0)

    def _dispatch(self, sess, msg):
        sid = msg.session_id
        if sess.state is CloudState.POISONED:
            return wire.error(sid, msg.step, ErrorCode.POISONED, "session is poisoned")
        if sess.state is CloudState.DONE:
            return self._poison(sess, msg, ErrorCode.OUT_OF_ORDER, "session already finished")
        if msg.kind == Kind.DONE:
            sess.state = CloudState.DONE
            return wire.WireMessage(Kind.DONE, sid, sess.expected_step)
        if msg.kind != Kind.INPUT:
            return self._poison(sess, msg, ErrorCode.OUT_OF_ORDER,
                                f"unexpected {msg.kind.name} from client")
        if msg.step != sess.expected_step:
            return self._poison(sess, msg, ErrorCode.OUT_OF_ORDER,
                                f"input step {msg.step}, expected {sess.expected_step}")
        sess.state = CloudState.COMPUTING
        try:
            eu = target_step(sess.target, EncodedInput(msg.vector, msg.step), msg.w)
        except NumericError as exc:
            return self._poison(sess, msg, ErrorCode.NUMERIC, str(exc))
        except ImmersionError as exc:
            return self._poison(sess, msg, ErrorCode.MALFORMED, str(exc))
        sess.state = CloudState.AWAIT_INPUT
        return wire.WireMessage(Kind.UTILITY, sid, eu.step, vector=eu.utilde)

    def _poison(self, sess, msg, code, text):
        sess.state = CloudState.POISONED
        logger.warning("poisoning session %s: %s", sess.session_id.hex(), text)
        return wire.error(msg.session_id, msg.step, code, text)
