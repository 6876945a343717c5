"""Channel state shared between a node service and its clients.

``SocketShare`` and ``ClientRegion`` model the per-client shared-memory
region: the client touches only these, the service keeps everything else
in ``DataChannel`` / ``ControlLink``.
"""

from __future__ import annotations

import collections
import enum
import itertools
import threading
from typing import TYPE_CHECKING, Callable

from ..endpoint import NULL_EP, Endpoint
from ..ringbuf import RingBuffer
from ..shmq import Doorbell, ReadinessBitmap, WorkMessage, WorkQueuePair

if TYPE_CHECKING:
    from ..fabric import FabricConnection

__all__ = ["ChannelState", "SocketShare", "ListenerShare", "ClientRegion", "DataChannel", "ControlLink"]


class ChannelState(enum.Enum):
    HANDSHAKING = "handshaking"
    OPEN = "open"
    HALF_CLOSED = "half_closed"
    CLOSED = "closed"


class SocketShare:
    """Per-socket part of the shared region.

    Flag protocol (each flag is flipped under ``lock``):

    * ``pump_idle``: set by the service when the write buffer is found
      empty; the client that flips it back sends exactly one WriteReq.
    * ``readready_pending``: set by the service when it queues ReadReady,
      cleared by the client when it pops that message.
    * ``want_write``: set by a client after a short write, cleared by the
      service when it queues WriteReady.
    """

    __slots__ = ("socket_id", "channel_key", "read_buf", "write_buf", "lock", "pump_idle",
                 "readready_pending", "want_write", "remote_closed", "error")

    def __init__(self, socket_id: int, channel_key: int, read_cap: int, write_cap: int) -> None:
        self.socket_id = socket_id
        self.channel_key = channel_key
        self.read_buf = RingBuffer(read_cap)
        self.write_buf = RingBuffer(write_cap)
        self.lock = threading.Lock()
        self.pump_idle = True
        self.readready_pending = False
        self.want_write = False
        self.remote_closed = False
        self.error = 0

    def try_activate(self) -> bool:
        """Client side: claim the idle pump. True means "send a WriteReq"."""
        with self.lock:
            if self.pump_idle:
                self.pump_idle = False
                return True
        return False

    def mark_readready(self) -> bool:
        with self.lock:
            if self.readready_pending:
                return False
            self.readready_pending = True
            return True

    def take_want_write(self) -> bool:
        if not self.want_write:
            return False
        with self.lock:
            was, self.want_write = self.want_write, False
            return was


class ListenerShare:
    def __init__(self, socket_id: int, endpoint: Endpoint, backlog: int) -> None:
        self.socket_id = socket_id
        self.endpoint = endpoint
        self.backlog = backlog
        self.pending = 0
        self.lock = threading.Lock()

    def try_reserve(self) -> bool:
        with self.lock:
            if self.pending >= self.backlog:
                return False
            self.pending += 1
            return True

    def release(self) -> None:
        with self.lock:
            self.pending -= 1


class ClientRegion:
    """What a registered client sees: its slot, queues and socket shares."""

    def __init__(self, slot: int, tenant: int, ip, depth: int, bitmap: ReadinessBitmap,
                 doorbell: Doorbell, buffer_size: int) -> None:
        self.slot = slot
        self.tenant = tenant
        self.ip = ip
        self.qp = WorkQueuePair(depth)
        self.buffer_size = buffer_size
        self.shares: dict[int, SocketShare] = {}
        self.listeners: dict[int, ListenerShare] = {}
        # CQ messages that did not fit; the service flushes them in order
        self.cq_backlog: collections.deque = collections.deque()
        self.notify: Callable[[], None] = lambda: None
        self._bitmap = bitmap
        self._doorbell = doorbell
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self.sq_pushes = 0
        self.departing = False

    def alloc_socket_id(self) -> int:
        with self._id_lock:
            return next(self._ids) & 0xFFFFFFFF

    def submit(self, m: WorkMessage) -> bool:
        """Push onto the SQ, then mark readiness and ring; False on QueueFull."""
        if not self.qp.sq.try_push(m):
            return False
        self.sq_pushes += 1
        self.kick()
        return True

    def kick(self) -> None:
        self._bitmap.set(self.slot)
        self._doorbell.ring()


class DataChannel:
    """Service-private state of one byte-stream channel."""

    __slots__ = (
        "key", "peer_key", "link", "share", "client", "socket_id", "src_ep", "dst_ep",
        "initiator", "state", "read_mr", "write_mr", "remote_mr", "remote_capacity",
        "remote_free", "remote_tail_shadow", "inflight", "inflight_q", "freed_since_notify",
        "local_shutdown", "close_sent", "remote_close_received", "released", "bytes_tx",
        "bytes_rx", "egress", "credits_sent", "destroyed", "flow",
    )

    def __init__(self, key: int, link: "ControlLink", share: SocketShare, client, socket_id: int,
                 src_ep: Endpoint = NULL_EP, dst_ep: Endpoint = NULL_EP, initiator: bool = True) -> None:
        self.key = key
        self.peer_key = 0
        self.link = link
        self.share = share
        self.client = client
        self.socket_id = socket_id
        self.src_ep = src_ep
        self.dst_ep = dst_ep
        self.initiator = initiator
        self.state = ChannelState.HANDSHAKING
        self.read_mr = 0
        self.write_mr = 0
        self.remote_mr = 0
        self.remote_capacity = 0
        self.remote_free = 0
        self.remote_tail_shadow = 0
        self.inflight = 0
        self.inflight_q: collections.deque = collections.deque()
        self.freed_since_notify = 0
        self.local_shutdown = False
        self.close_sent = False
        self.remote_close_received = False
        self.released = False
        self.bytes_tx = 0
        self.bytes_rx = 0
        self.egress = False
        self.credits_sent = 0
        self.destroyed = False
        # (conn_id, initiator node, initiator key): names the channel on both ends
        self.flow: tuple = ()

    def __repr__(self) -> str:
        return f"DataChannel(key={self.key}, peer_key={self.peer_key}, state={self.state.value})"

    @property
    def conn(self) -> "FabricConnection":
        return self.link.conn

    @property
    def write_buf(self) -> RingBuffer:
        return self.share.write_buf

    @property
    def read_buf(self) -> RingBuffer:
        return self.share.read_buf


class ControlLink:
    """One fabric connection as seen by a node: its control channel (key 0)
    plus the data channels multiplexed over it."""

    def __init__(self, conn: "FabricConnection", peer: int, capacity: int) -> None:
        self.conn = conn
        self.peer = peer
        self.read_buf = RingBuffer(capacity)
        self.write_buf = RingBuffer(capacity)
        self.read_mr = 0
        self.write_mr = 0
        self.remote_mr = 0
        self.remote_capacity = 0
        self.remote_free = 0
        self.remote_tail_shadow = 0
        self.inflight = 0
        self.inflight_q: collections.deque = collections.deque()
        self.pending: collections.deque = collections.deque()
        self.consumed_total = 0
        self.acked_sent = 0
        self.peer_acked = 0
        self.channels: dict[int, DataChannel] = {}
        self._keys = itertools.count(1)
        self.installed = False

    def next_key(self) -> int:
        while True:
            k = next(self._keys) & 0xFFFFFFFF
            if k and k not in self.channels:
                return k
