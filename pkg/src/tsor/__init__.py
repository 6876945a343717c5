"""Byte-stream sockets multiplexed over a simulated one-sided-write fabric."""

from .client import InlineWaiter, SockState, ThreadWaiter, TsorClient, TsorSocket
from .controlplane import ControlPlane, load_scenario, parse_scenario
from .endpoint import Endpoint, parse_endpoint
from .errors import (AddrInUse, ConnectionClosed, ConnectionReset, ConnRefused, ErrorCode, NetUnreachable,
                     NoBackends, PermissionDenied, Timeout, TsorError)
from .fabric import Fabric
from .ringbuf import RingBuffer
from .service import NodeService, start_service
from .sim import Cluster, SimClock

__version__ = "0.1.0"

__all__ = [
    "Cluster", "SimClock", "TsorClient", "TsorSocket", "SockState", "ThreadWaiter", "InlineWaiter",
    "ControlPlane", "load_scenario", "parse_scenario", "Endpoint", "parse_endpoint", "Fabric",
    "RingBuffer", "NodeService", "start_service", "ErrorCode", "TsorError", "ConnRefused",
    "PermissionDenied", "NetUnreachable", "Timeout", "ConnectionClosed", "ConnectionReset",
    "NoBackends", "AddrInUse",
]
