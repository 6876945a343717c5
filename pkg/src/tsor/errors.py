"""Exception hierarchy and the numeric error codes carried on the wire."""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    OK = 0
    CONN_REFUSED = 1
    PERMISSION_DENIED = 2
    NET_UNREACHABLE = 3
    TIMEOUT = 4
    CONNECTION_CLOSED = 5
    NO_BACKENDS = 6
    ADDR_IN_USE = 7
    CONNECTION_RESET = 8
    PROTOCOL_ERROR = 9


class TsorError(OSError):
    code = ErrorCode.PROTOCOL_ERROR

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code.name.lower().replace("_", " "))


class ConnRefused(TsorError, ConnectionRefusedError):
    code = ErrorCode.CONN_REFUSED


class PermissionDenied(TsorError, PermissionError):
    code = ErrorCode.PERMISSION_DENIED


class NetUnreachable(TsorError):
    code = ErrorCode.NET_UNREACHABLE


class Timeout(TsorError, TimeoutError):
    code = ErrorCode.TIMEOUT


class ConnectionClosed(TsorError, BrokenPipeError):
    code = ErrorCode.CONNECTION_CLOSED


class ConnectionReset(TsorError, ConnectionResetError):
    code = ErrorCode.CONNECTION_RESET


class NoBackends(TsorError):
    code = ErrorCode.NO_BACKENDS


class AddrInUse(TsorError):
    code = ErrorCode.ADDR_IN_USE


class ProtocolError(TsorError):
    code = ErrorCode.PROTOCOL_ERROR


class QueueFull(Exception):
    """A bounded work queue rejected a push; retry after the consumer drains."""


class SlotsExhausted(Exception):
    pass


class FabricError(Exception):
    """Errors raised by the simulated fabric to the posting side."""


class NodeNotFound(FabricError):
    pass


class DeliveryError(FabricError):
    pass


class OverwriteError(FabricError):
    """A remote write would clobber bytes the consumer has not read yet."""


class ScenarioError(ValueError):
    pass


_BY_CODE = {cls.code: cls for cls in (
    ConnRefused, PermissionDenied, NetUnreachable, Timeout, ConnectionClosed,
    ConnectionReset, NoBackends, AddrInUse, ProtocolError)}


def error_for(code: int, message: str = "") -> TsorError:
    return _BY_CODE.get(ErrorCode(code), ProtocolError)(message)
