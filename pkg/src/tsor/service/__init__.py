"""Node service: channel manager, data pump and handshake handling."""

from __future__ import annotations

from typing import Callable

from ..controlplane import ControlPlane
from ..errors import NodeNotFound
from ..fabric import Fabric
from .channels import ChannelState, ClientRegion, ControlLink, DataChannel, ListenerShare, SocketShare
from .node import CLOSE_RELEASE, CLOSE_WRITE, NodeService
from .wire import CONTROL_RECORD_SIZE, ControlKind, ControlMessage

__all__ = [
    "NodeService", "start_service", "ChannelState", "ClientRegion", "ControlLink", "DataChannel",
    "ListenerShare", "SocketShare", "ControlKind", "ControlMessage", "CONTROL_RECORD_SIZE",
    "CLOSE_WRITE", "CLOSE_RELEASE",
]


def start_service(node_name: str, fabric: Fabric, controlplane: ControlPlane, *, threaded: bool = True,
                  clock: Callable[[], float] | None = None) -> NodeService:
    """Start the service for a node already registered with the control plane."""
    rec = controlplane.state.node_by_name(node_name)
    try:
        fabric.rendezvous.handler(rec.node_id)
    except NodeNotFound:
        pass
    else:
        raise RuntimeError(f"node id {rec.node_id} ({node_name}) already has a running service")
    kw = {"clock": clock} if clock is not None else {}
    svc = NodeService(rec, fabric, controlplane, **kw)
    svc.start(threaded=threaded)
    return svc
