"""User/cloud message exchange: wire format, sessions and transports."""

from .session import CloudService, ClientSession, session_id_from_seed
from .transport import (Channel, LoopbackTransport, SocketTransport, Transcript,
                        find_plain_leaks, replay, run_session, start_server)
from .wire import ErrorCode, Kind, WireMessage

__all__ = [
    "Channel", "ClientSession", "CloudService", "ErrorCode", "Kind", "LoopbackTransport",
    "SocketTransport", "Transcript", "WireMessage", "find_plain_leaks", "replay",
    "run_session", "session_id_from_seed", "start_server",
]
