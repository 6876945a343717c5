"""Socket-style client library over a node service's SQ/CQ pair.

A :class:`TsorClient` is one pod's view of the service. Blocking calls
drain the client's CQ on the calling thread and then park on a *waiter*:

* :class:`ThreadWaiter` parks on a condition variable that the service
  notifies whenever it pushes onto this client's CQ;
* :class:`InlineWaiter` instead steps a single-threaded simulated cluster,
  so blocking calls stay deterministic.
"""

from __future__ import annotations

import collections
import enum
import threading
import time
from ipaddress import IPv4Address
from typing import Callable, Optional, Union

from .endpoint import Endpoint, parse_endpoint
from .errors import (ConnectionClosed, ErrorCode, Timeout, TsorError,
                     error_for)
from .service.channels import ListenerShare, SocketShare
from .service.node import CLOSE_RELEASE, CLOSE_WRITE, NodeService
from .shmq import MsgType, WorkMessage

__all__ = ["TsorClient", "TsorSocket", "SockState", "ThreadWaiter", "InlineWaiter", "EPHEMERAL_PORTS",
           "DeadlockError"]

EPHEMERAL_PORTS = range(32768, 61000)
DEFAULT_READ = 65536

EndpointLike = Union[Endpoint, str, tuple]


class DeadlockError(RuntimeError):
    """An inline blocking call can never complete: the cluster is idle."""


class ThreadWaiter:
    def __init__(self) -> None:
        self._cond = threading.Condition()
        self.seq = 0

    def now(self) -> float:
        return time.monotonic()

    def notify(self) -> None:
        with self._cond:
            self.seq += 1
            self._cond.notify_all()

    def wait(self, seen: int, timeout: Optional[float]) -> None:
        with self._cond:
            if self.seq == seen:
                self._cond.wait(timeout)

    def pause(self) -> None:
        time.sleep(0.0002)


class InlineWaiter:
    def __init__(self, cluster) -> None:
        self.cluster = cluster
        self.seq = 0

    def now(self) -> float:
        return self.cluster.clock()

    def notify(self) -> None:
        self.seq += 1

    def wait(self, seen: int, timeout: Optional[float]) -> None:
        if self.cluster.step():
            return
        if timeout is None:
            raise DeadlockError("blocking call with no deadline on an idle cluster")
        self.cluster.clock.advance(timeout)

    def pause(self) -> None:
        if self.cluster._in_step:
            raise RuntimeError("SQ full inside an inline app; yield until the queue has room")
        self.cluster.step()


class SockState(enum.Enum):
    FRESH = "fresh"
    LISTENING = "listening"
    CONNECTING = "connecting"
    PENDING = "pending"  # egress leg awaiting confirm()/reject()
    OPEN = "open"
    HALF_CLOSED = "half_closed"
    CLOSED = "closed"


class TsorSocket:
    def __init__(self, client: "TsorClient", socket_id: int) -> None:
        self.client = client
        self.socket_id = socket_id
        self.state = SockState.FRESH
        self.local_ep: Optional[Endpoint] = None
        self.remote_ep: Optional[Endpoint] = None
        self.share: Optional[SocketShare] = None
        self.listener: Optional[ListenerShare] = None
        self.accept_q: collections.deque = collections.deque()
        self.error = 0
        self.write_shut = False
        self.abandoned = False

    def __repr__(self) -> str:
        return f"TsorSocket({self.socket_id}, {self.state.value}, {self.local_ep} -> {self.remote_ep})"

    # -- control primitives ------------------------------------------------

    def connect(self, dst: EndpointLike, timeout: Optional[float] = None, block: bool = True) -> "TsorSocket":
        if self.state is not SockState.FRESH:
            raise TsorError(f"connect on a {self.state.value} socket")
        c = self.client
        dst_ep = c.endpoint(dst)
        self.local_ep = Endpoint(c.tenant, c.ip, c.alloc_port())
        self.remote_ep = dst_ep
        self.state = SockState.CONNECTING
        with c._lock:
            c._sockets[self.socket_id] = self
        c._submit(WorkMessage(MsgType.CONNECT_REQ, self.socket_id, 0, self.local_ep, dst_ep))
        if block:
            self.wait_connected(timeout)
        return self

    def wait_connected(self, timeout: Optional[float] = None) -> "TsorSocket":
        ok = self.client._wait_until(lambda: self.state is not SockState.CONNECTING, timeout)
        if not ok:
            self.abandoned = True
            raise Timeout(f"connect to {self.remote_ep} timed out")
        if self.error:
            raise error_for(self.error, f"connect to {self.remote_ep}")
        return self

    def listen(self, port: Union[int, EndpointLike], backlog: int = 128) -> "TsorSocket":
        if self.state is not SockState.FRESH:
            raise TsorError(f"listen on a {self.state.value} socket")
        c = self.client
        ep = Endpoint(c.tenant, c.ip, port) if isinstance(port, int) else c.endpoint(port)
        self.listener = c.service.listen(c.region, ep, self.socket_id, backlog)
        self.local_ep = ep
        self.state = SockState.LISTENING
        with c._lock:
            c._sockets[self.socket_id] = self
            c._listeners[self.socket_id] = self
        return self

    def try_accept(self) -> Optional["TsorSocket"]:
        if self.state is not SockState.LISTENING:
            raise TsorError(f"accept on a {self.state.value} socket")
        self.client.poll()
        if not self.accept_q:
            return None
        sock = self.accept_q.popleft()
        self.listener.release()
        return sock

    def accept(self, timeout: Optional[float] = None) -> "TsorSocket":
        if self.state is not SockState.LISTENING:
            raise TsorError(f"accept on a {self.state.value} socket")
        if not self.client._wait_until(lambda: bool(self.accept_q), timeout):
            raise Timeout(f"accept on {self.local_ep} timed out")
        sock = self.accept_q.popleft()
        self.listener.release()
        return sock

    def confirm(self) -> None:
        """Egress leg: the external connection is up; finish the handshake."""
        self._answer(0)
        self.state = SockState.OPEN

    def reject(self, code: ErrorCode = ErrorCode.CONN_REFUSED) -> None:
        self._answer(int(code))
        self.state = SockState.CLOSED

    def _answer(self, code: int) -> None:
        if self.state is not SockState.PENDING:
            raise TsorError(f"confirm/reject on a {self.state.value} socket")
        self.client._submit(WorkMessage(MsgType.CONNECT_RESP, self.socket_id, payload_u32=code))

    # -- data primitives -----------------------------------------------------

    def _check_writable(self) -> None:
        if self.state not in (SockState.OPEN, SockState.HALF_CLOSED) or self.write_shut:
            raise ConnectionClosed(f"write on {self.state.value} socket {self.socket_id}")
        if self.share.error:
            raise error_for(self.share.error, f"socket {self.socket_id}")

    def write(self, data) -> int:
        """Copy what fits into the write buffer; may return a partial count."""
        self._check_writable()
        share = self.share
        was_empty = share.write_buf.is_empty()
        n = share.write_buf.produce(data)
        if n and was_empty:
            self.client.counters["write_transitions"] += 1
        if n and share.try_activate():
            self.client.counters["writereq_sent"] += 1
            self.client._submit(WorkMessage(MsgType.WRITE_REQ, self.socket_id))
        if n < len(data):
            with share.lock:
                share.want_write = True
        return n

    def writable(self) -> bool:
        return self.share is not None and (self.share.write_buf.free_space > 0 or bool(self.share.error))

    def sendall(self, data, timeout: Optional[float] = None) -> None:
        view = memoryview(data).cast("B")
        deadline = None if timeout is None else self.client.waiter.now() + timeout
        while view:
            n = self.write(view)
            view = view[n:]
            if view:
                left = None if deadline is None else deadline - self.client.waiter.now()
                if not self.client._wait_until(self.writable, left):
                    raise Timeout("sendall timed out")

    def readable(self) -> bool:
        s = self.share
        return s is not None and (s.read_buf.available_data > 0 or s.remote_closed or bool(s.error))

    def try_read(self, max_bytes: int = DEFAULT_READ) -> Optional[bytes]:
        """Bytes if any are buffered, ``b""`` at end-of-stream, else None."""
        share = self.share
        if self.state is SockState.CLOSED:
            raise ConnectionClosed(f"read on closed socket {self.socket_id}")
        if share is None:
            return None
        eof = share.remote_closed  # sampled first: data before the Close is never lost
        data = share.read_buf.consume(max_bytes)
        if data:
            self.client.counters["credit_hints"] += 1
            self.client._submit(WorkMessage(MsgType.CREDIT_HINT, self.socket_id, payload_u32=len(data)))
            return data
        if share.error and share.error != ErrorCode.OK:
            raise error_for(share.error, f"socket {self.socket_id}")
        if eof:
            return b""
        return None

    def read(self, max_bytes: int = DEFAULT_READ, timeout: Optional[float] = None) -> bytes:
        """Block until data or end-of-stream (``b""``)."""
        out = self.try_read(max_bytes)
        if out is not None:
            return out
        if not self.client._wait_until(self.readable, timeout):
            raise Timeout(f"read on socket {self.socket_id} timed out")
        out = self.try_read(max_bytes)
        return out if out is not None else b""

    def recv_exactly(self, n: int, timeout: Optional[float] = None) -> bytes:
        parts, got = [], 0
        while got < n:
            chunk = self.read(n - got, timeout)
            if not chunk:
                raise ConnectionClosed(f"end of stream after {got} of {n} bytes")
            parts.append(chunk)
            got += len(chunk)
        return b"".join(parts)

    def shutdown(self) -> None:
        """Half-close: no more writes; the peer reads end-of-stream after the buffered data."""
        if self.write_shut or self.state not in (SockState.OPEN, SockState.HALF_CLOSED):
            return
        self.write_shut = True
        self.client._submit(WorkMessage(MsgType.CLOSE_REQ, self.socket_id, payload_u32=CLOSE_WRITE))

    def close(self) -> None:
        c = self.client
        if self.state is SockState.CLOSED:
            return
        if self.state is SockState.LISTENING:
            c.service.unlisten(c.region, self.listener)
            while self.accept_q:
                self.accept_q.popleft().close()
                self.listener.release()
            with c._lock:
                c._listeners.pop(self.socket_id, None)
        elif self.state is SockState.CONNECTING:
            self.abandoned = True
        elif self.state is SockState.PENDING:
            self.reject()
        elif self.share is not None:
            c._submit(WorkMessage(MsgType.CLOSE_REQ, self.socket_id, payload_u32=CLOSE_RELEASE))
        self.state = SockState.CLOSED
        with c._lock:
            if not self.abandoned:
                c._sockets.pop(self.socket_id, None)

    def __enter__(self) -> "TsorSocket":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class TsorClient:
    """One pod's client: a registered slot on its node's service."""

    def __init__(self, service: NodeService, tenant: int, ip, *, waiter=None,
                 buffer_size: Optional[int] = None, name: str = "") -> None:
        self.service = service
        self.waiter = waiter if waiter is not None else ThreadWaiter()
        self.region = service.register_client(tenant, ip, buffer_size)
        self.region.notify = self.waiter.notify
        self.name = name or f"{IPv4Address(ip)}"
        self.counters: collections.Counter = collections.Counter(dict.fromkeys(
            ("credit_hints", "readready_popped", "sq_full_retries", "write_transitions", "writeready_popped",
             "writereq_sent"), 0))
        self._lock = threading.RLock()
        self._sockets: dict[int, TsorSocket] = {}
        self._listeners: dict[int, TsorSocket] = {}
        self._egress: Optional[TsorSocket] = None
        self._port_cursor = 0
        self._ports_in_use: set[int] = set()

    def __repr__(self) -> str:
        return f"TsorClient({self.name}, slot={self.region.slot})"

    @property
    def tenant(self) -> int:
        return self.region.tenant

    @property
    def ip(self) -> IPv4Address:
        return self.region.ip

    def endpoint(self, ep: EndpointLike) -> Endpoint:
        if isinstance(ep, Endpoint):
            return ep if ep.tenant else ep.with_tenant(self.tenant)
        if isinstance(ep, tuple):
            return Endpoint(self.tenant, IPv4Address(ep[0]), int(ep[1]))
        return parse_endpoint(ep, self.tenant)

    def alloc_port(self) -> int:
        with self._lock:
            n = len(EPHEMERAL_PORTS)
            for _ in range(n):
                port = EPHEMERAL_PORTS[self._port_cursor % n]
                self._port_cursor += 1
                if port not in self._ports_in_use:
                    return port
        raise TsorError("ephemeral ports exhausted")

    # -- sockets -------------------------------------------------------

    def socket(self) -> TsorSocket:
        return TsorSocket(self, self.region.alloc_socket_id())

    def connect(self, dst: EndpointLike, timeout: Optional[float] = None) -> TsorSocket:
        return self.socket().connect(dst, timeout)

    def listen(self, port: Union[int, EndpointLike], backlog: int = 128) -> TsorSocket:
        sock = self.socket().listen(port, backlog)
        if isinstance(port, int):
            with self._lock:
                self._ports_in_use.add(port)
        return sock

    def listen_egress(self) -> TsorSocket:
        """Become this node's egress gateway; accepted sockets arrive PENDING."""
        sock = self.socket()
        sock.listener = self.service.register_egress(self.region, sock.socket_id)
        sock.state = SockState.LISTENING
        with self._lock:
            self._sockets[sock.socket_id] = sock
            self._listeners[sock.socket_id] = sock
            self._egress = sock
        return sock

    def close(self) -> None:
        for sock in list(self._sockets.values()):
            sock.close()
        self.service.unregister_client(self.region)

    # -- plumbing ------------------------------------------------------

    def _submit(self, m: WorkMessage) -> None:
        while not self.region.submit(m):
            self.counters["sq_full_retries"] += 1
            self.poll()
            self.waiter.pause()

    def poll(self) -> int:
        """Drain the CQ without blocking; returns the number of messages handled."""
        with self._lock:
            return self._dispatch()

    def _dispatch(self) -> int:
        cq = self.region.qp.cq
        region = self.region
        handled = 0
        while True:
            m = cq.pop()
            if m is None:
                break
            handled += 1
            t = m.msg_type
            sock = self._sockets.get(m.socket_id)
            if t is MsgType.READ_READY:
                self.counters["readready_popped"] += 1
                share = region.shares.get(m.socket_id)
                if share is not None:
                    with share.lock:
                        share.readready_pending = False
            elif t is MsgType.CONNECT_RESP:
                if sock is None or sock.abandoned:
                    self._sockets.pop(m.socket_id, None)
                    self._submit(WorkMessage(MsgType.CLOSE_REQ, m.socket_id, payload_u32=CLOSE_RELEASE))
                elif sock.state is SockState.CONNECTING:
                    sock.share = region.shares[m.socket_id]
                    sock.local_ep, sock.remote_ep = m.src_ep, m.dst_ep
                    sock.state = SockState.OPEN
            elif t is MsgType.ACCEPT_READY:
                lst = self._listeners.get(m.payload_u32)
                new = TsorSocket(self, m.socket_id)
                new.share = region.shares[m.socket_id]
                new.local_ep, new.remote_ep = m.dst_ep, m.src_ep
                self._sockets[m.socket_id] = new
                if lst is None or lst.state is not SockState.LISTENING:
                    new.state = SockState.OPEN
                    if lst is self._egress and lst is not None:
                        new.state = SockState.PENDING
                    new.close()
                    continue
                new.state = SockState.PENDING if lst is self._egress else SockState.OPEN
                lst.accept_q.append(new)
            elif t is MsgType.ERROR:
                if sock is not None:
                    sock.error = m.payload_u32
                    if sock.state is SockState.CONNECTING:
                        sock.state = SockState.CLOSED
                        if sock.abandoned:
                            self._sockets.pop(m.socket_id, None)
            elif t is MsgType.WRITE_READY:
                self.counters["writeready_popped"] += 1
        if region.cq_backlog:
            region.kick()
        return handled

    def _wait_until(self, pred: Callable[[], bool], timeout: Optional[float]) -> bool:
        w = self.waiter
        deadline = None if timeout is None else w.now() + timeout
        while True:
            seen = w.seq
            self.poll()
            if pred():
                return True
            left = None
            if deadline is not None:
                left = deadline - w.now()
                if left <= 0:
                    return False
            w.wait(seen, left)
