"""Simulated reliable-connection fabric with one-sided write-with-immediate.

This stands in for RDMA RC queue pairs. A :class:`Fabric` owns the memory
region registry, the per-node completion queues and the rendezvous used to
bootstrap connections. Writes are copied straight into the target region's
storage on the posting thread; the receiver's ``RecvImm`` completion is
queued only after the copy, so bytes are visible before the receiver can
learn about them.

``RecvImm.length`` covers every byte that landed in the region since the
previous immediate, so a logical message split into an unsignaled plain
write followed by a write-with-immediate yields one completion spanning
both pieces.
"""

from __future__ import annotations

import collections
import dataclasses
import enum
import itertools
import struct
import threading
import time
from typing import Callable, Optional

from .errors import DeliveryError, FabricError, NodeNotFound, OverwriteError
from .ringbuf import RingBuffer

__all__ = [
    "Fabric", "FabricConnection", "MemoryRegion", "Completion", "CompletionKind",
    "ConnState", "Rendezvous", "RendezvousRecord",
]

NodeId = int


class ConnState(enum.Enum):
    CONNECTING = "connecting"
    ESTABLISHED = "established"
    CLOSED = "closed"


class CompletionKind(enum.Enum):
    SEND_DONE = "send_done"
    RECV_IMM = "recv_imm"


@dataclasses.dataclass(frozen=True)
class Completion:
    kind: CompletionKind
    conn: "FabricConnection"
    imm: int
    mr_id: int
    offset: int
    length: int
    wr_id: int = 0


class MemoryRegion:
    """A ring buffer registered as a remote-write target.

    ``landed`` counts bytes written by the fabric (logical, free-running);
    it runs ahead of the ring's tail until the owner commits them.
    """

    __slots__ = ("mr_id", "node", "ring", "landed", "imm_mark")

    def __init__(self, mr_id: int, node: NodeId, ring: RingBuffer) -> None:
        self.mr_id = mr_id
        self.node = node
        self.ring = ring
        self.landed = ring.tail
        self.imm_mark = ring.tail

    @property
    def capacity(self) -> int:
        return self.ring.capacity

    def remote_copy(self, offset: int, data) -> None:
        ring = self.ring
        n = len(data)
        if offset < 0 or offset + n > ring.capacity:
            raise DeliveryError(f"write [{offset}, {offset + n}) exceeds MR {self.mr_id} of {ring.capacity}")
        if offset != self.landed & (ring.capacity - 1):
            raise OverwriteError(
                f"MR {self.mr_id}: write at offset {offset} is not at the landing point "
                f"{self.landed & (ring.capacity - 1)}")
        # head only moves forward, so a stale read here is conservative
        if self.landed + n - ring.head > ring.capacity:
            raise OverwriteError(
                f"MR {self.mr_id}: {n} bytes would overwrite unconsumed data "
                f"(landed={self.landed}, head={ring.head}, capacity={ring.capacity})")
        ring.write_at(offset, data)
        self.landed += n


class FabricConnection:
    """One reliable, ordered connection between two nodes (or a node and itself)."""

    def __init__(self, conn_id: int, a: NodeId, b: NodeId) -> None:
        self.conn_id = conn_id
        self.local_node = a
        self.remote_node = b
        self.state = ConnState.CONNECTING
        self.send_seq = {a: 0, b: 0}
        self.recv_seq = {a: 0, b: 0}
        self.meta: dict[NodeId, "RendezvousRecord"] = {}

    def __repr__(self) -> str:
        return f"FabricConnection({self.conn_id}, {self.local_node}<->{self.remote_node}, {self.state.value})"

    @property
    def loopback(self) -> bool:
        return self.local_node == self.remote_node

    def peer_of(self, node: NodeId) -> NodeId:
        if node == self.local_node:
            return self.remote_node
        if node == self.remote_node:
            return self.local_node
        raise FabricError(f"node {node} is not an endpoint of {self!r}")


_RDV = struct.Struct("<III")


@dataclasses.dataclass(frozen=True)
class RendezvousRecord:
    """Bootstrap metadata one side hands the other: node, control MR, capacity."""

    node_id: int
    control_mr: int
    control_capacity: int

    def pack(self) -> bytes:
        return _RDV.pack(self.node_id, self.control_mr, self.control_capacity)

    @classmethod
    def unpack(cls, raw: bytes) -> "RendezvousRecord":
        return cls(*_RDV.unpack(raw))


# bootstrap(conn) -> this node's record for that connection
BootstrapHandler = Callable[[FabricConnection], RendezvousRecord]


class Rendezvous:
    """Stand-in for the well-known-port TCP exchange of QP metadata."""

    def __init__(self) -> None:
        self._handlers: dict[NodeId, BootstrapHandler] = {}
        self._lock = threading.Lock()

    def register(self, node: NodeId, handler: BootstrapHandler) -> None:
        with self._lock:
            self._handlers[node] = handler

    def unregister(self, node: NodeId) -> None:
        with self._lock:
            self._handlers.pop(node, None)

    def handler(self, node: NodeId) -> BootstrapHandler:
        with self._lock:
            try:
                return self._handlers[node]
            except KeyError:
                raise NodeNotFound(f"node {node} is not registered with the rendezvous") from None


class Fabric:
    def __init__(self, setup_delay: float = 0.0) -> None:
        self.rendezvous = Rendezvous()
        self.setup_delay = setup_delay
        self._lock = threading.RLock()
        self._mr_ids = itertools.count(1)
        self._conn_ids = itertools.count(1)
        self._mrs: dict[tuple[NodeId, int], MemoryRegion] = {}
        self._mr_by_ring: dict[int, int] = {}
        self._conns: dict[tuple[NodeId, NodeId], FabricConnection] = {}
        self._cq: dict[NodeId, collections.deque] = {}
        self._notify: dict[NodeId, Callable[[], None]] = {}
        self.registrations = 0
        self.deregistrations = 0
        self.overwrites = 0
        self.connections_created = 0
        self.writes = 0
        self.bytes_written = 0

    # -- nodes and memory regions --------------------------------------

    def attach(self, node: NodeId, notify: Callable[[], None] = lambda: None) -> None:
        with self._lock:
            self._cq.setdefault(node, collections.deque())
            self._notify[node] = notify

    def register_mr(self, node: NodeId, backing: RingBuffer) -> int:
        with self._lock:
            if id(backing) in self._mr_by_ring:
                raise FabricError("buffer is already registered")
            mr_id = next(self._mr_ids) & 0xFFFFFFFF
            self._mrs[(node, mr_id)] = MemoryRegion(mr_id, node, backing)
            self._mr_by_ring[id(backing)] = mr_id
            self.registrations += 1
            return mr_id

    def deregister_mr(self, node: NodeId, mr_id: int) -> None:
        with self._lock:
            mr = self._mrs.pop((node, mr_id), None)
            if mr is not None:
                self._mr_by_ring.pop(id(mr.ring), None)
                self.deregistrations += 1

    def memory_region(self, node: NodeId, mr_id: int) -> MemoryRegion:
        try:
            return self._mrs[(node, mr_id)]
        except KeyError:
            raise DeliveryError(f"no memory region {mr_id} registered on node {node}") from None

    @property
    def live_registrations(self) -> int:
        return len(self._mrs)

    # -- connections ------------------------------------------------------

    def connect(self, a: NodeId, b: NodeId) -> FabricConnection:
        """Establish (or return the existing) connection for the pair {a, b}."""
        key = (min(a, b), max(a, b))
        with self._lock:
            existing = self._conns.get(key)
            if existing is not None and existing.state is ConnState.ESTABLISHED:
                return existing
        handler_a = self.rendezvous.handler(a)
        handler_b = self.rendezvous.handler(b)
        if self.setup_delay:
            time.sleep(self.setup_delay)
        with self._lock:
            existing = self._conns.get(key)
            if existing is not None and existing.state is ConnState.ESTABLISHED:
                return existing
            conn = FabricConnection(next(self._conn_ids), a, b)
            self._conns[key] = conn
            self.connections_created += 1
        conn.meta[a] = RendezvousRecord.unpack(handler_a(conn).pack())
        if b != a:
            conn.meta[b] = RendezvousRecord.unpack(handler_b(conn).pack())
        conn.state = ConnState.ESTABLISHED
        return conn

    def connection(self, a: NodeId, b: NodeId) -> Optional[FabricConnection]:
        return self._conns.get((min(a, b), max(a, b)))

    def disconnect(self, a: NodeId, b: NodeId) -> None:
        with self._lock:
            conn = self._conns.pop((min(a, b), max(a, b)), None)
        if conn is not None:
            conn.state = ConnState.CLOSED

    def connection_count(self, node: Optional[NodeId] = None) -> int:
        """Established inter-node connections (loopback excluded)."""
        with self._lock:
            conns = [c for c in self._conns.values()
                     if c.state is ConnState.ESTABLISHED and not c.loopback]
        if node is None:
            return len(conns)
        return sum(1 for c in conns if node in (c.local_node, c.remote_node))

    # -- data path ---------------------------------------------------------

    def write_imm(self, conn: FabricConnection, src: NodeId, remote_mr: int, offset: int, data,
                  imm: Optional[int], *, signaled: bool = True, wr_id: int = 0) -> None:
        """One-sided write into ``remote_mr`` at ``offset``.

        ``imm=None`` is a plain write: no receiver completion. ``signaled``
        controls whether the sender gets a ``SendDone``.
        """
        if conn.state is not ConnState.ESTABLISHED:
            raise FabricError(f"{conn!r} is not established")
        dst = conn.peer_of(src)
        mr = self.memory_region(dst, remote_mr)
        try:
            mr.remote_copy(offset, data)
        except OverwriteError:
            self.overwrites += 1
            raise
        n = len(data)
        conn.send_seq[src] += 1
        self.writes += 1
        self.bytes_written += n
        if imm is not None:
            start = mr.imm_mark
            length = mr.landed - start
            mr.imm_mark = mr.landed
            conn.recv_seq[dst] += 1
            self._cq[dst].append(Completion(
                CompletionKind.RECV_IMM, conn, imm & 0xFFFFFFFF, remote_mr,
                start & (mr.capacity - 1), length))
            self._notify[dst]()
        if signaled:
            self._cq[src].append(Completion(CompletionKind.SEND_DONE, conn, imm or 0, remote_mr, offset, n, wr_id))
            if dst != src:
                self._notify[src]()

    def poll_completions(self, node: NodeId, max_count: int = 1 << 30) -> list[Completion]:
        q = self._cq.get(node)
        out: list[Completion] = []
        if not q:
            return out
        pop = q.popleft
        try:
            while len(out) < max_count:
                out.append(pop())
        except IndexError:
            pass
        return out

    def has_completions(self, node: NodeId) -> bool:
        return bool(self._cq.get(node))
