"""Ingress and egress gateways: real loopback TCP on one side, cluster
sockets on the other, bytes relayed unchanged in both directions.

Each :class:`BridgeSession` runs one relay thread per direction. A side
that reaches end-of-stream is half-closed on the other leg; the session
ends when both directions have finished or either leg fails.
"""

from __future__ import annotations

import hashlib
import logging
import socket
import struct
import threading
from typing import Optional

import numpy as np

from .client import SockState, TsorClient, TsorSocket
from .endpoint import Endpoint, parse_endpoint
from .errors import ErrorCode, Timeout, TsorError
from .routing import ingress_lookup

__all__ = ["BridgeSession", "IngressGateway", "EgressGateway", "RELAY_CHUNK", "reset", "serve_echo",
           "TcpEchoServer", "run_ingress_echo"]

log = logging.getLogger(__name__)

RELAY_CHUNK = 16 * 1024
_POLL = 0.25  # relays re-check for an aborted sibling this often
_LINGER_RESET = struct.pack("ii", 1, 0)


def reset(conn: socket.socket) -> None:
    """Close with RST instead of FIN."""
    try:
        conn.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, _LINGER_RESET)
    except OSError:
        pass
    conn.close()


class _Sessions:
    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.live = 0
        self.total = 0

    def opened(self) -> None:
        with self.lock:
            self.live += 1
            self.total += 1

    def closed(self) -> None:
        with self.lock:
            self.live -= 1


class BridgeSession:
    def __init__(self, external: socket.socket, internal: TsorSocket, direction: str, registry: _Sessions) -> None:
        self.external = external
        self.internal = internal
        self.direction = direction
        self.bytes_in = 0   # external -> internal
        self.bytes_out = 0  # internal -> external
        self.error: Optional[BaseException] = None
        self._registry = registry
        self._done = threading.Event()
        self._left = 2
        self._lock = threading.Lock()
        self._failed = False

    def start(self) -> "BridgeSession":
        self._registry.opened()
        for fn, tag in ((self._ext_to_int, "in"), (self._int_to_ext, "out")):
            threading.Thread(target=self._guard, args=(fn,), name=f"bridge-{self.direction}-{tag}",
                             daemon=True).start()
        return self

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    def _guard(self, fn) -> None:
        try:
            fn()
        except (OSError, TsorError) as exc:
            with self._lock:
                if self.error is None:
                    self.error = exc
                self._failed = True
            self._abort()
        finally:
            with self._lock:
                self._left -= 1
                last = self._left == 0
            if last:
                self._finish()

    def _ext_to_int(self) -> None:
        while True:
            data = self.external.recv(RELAY_CHUNK)
            if not data:
                self.internal.shutdown()
                return
            view = memoryview(data)
            while view:
                if self._failed:
                    return
                n = self.internal.write(view)
                view = view[n:]
                if view:
                    self.internal.client._wait_until(self.internal.writable, _POLL)
            self.bytes_in += len(data)

    def _int_to_ext(self) -> None:
        while True:
            try:
                data = self.internal.read(RELAY_CHUNK, timeout=_POLL)
            except Timeout:
                if self._failed:
                    return
                continue
            if not data:
                try:
                    self.external.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            self.external.sendall(data)
            self.bytes_out += len(data)

    def _abort(self) -> None:
        # unblock the sibling relay; errors here are expected
        try:
            self.external.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        if self.internal.state in (SockState.OPEN, SockState.HALF_CLOSED):
            self.internal.close()

    def _finish(self) -> None:
        if self._failed:
            reset(self.external)
        else:
            self.external.close()
        self.internal.close()
        self._registry.closed()
        self._done.set()


class _Gateway:
    def __init__(self, client: TsorClient) -> None:
        if not hasattr(client.waiter, "_cond"):
            raise TsorError("gateways need a threaded cluster")
        self.client = client
        self.sessions = _Sessions()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.bridges: list[BridgeSession] = []
        self.counters: dict[str, int] = {"resets": 0, "internal_connects": 0}

    @property
    def live_sessions(self) -> int:
        return self.sessions.live

    def _spawn(self, target, *args, name: str) -> None:
        t = threading.Thread(target=target, args=args, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def close(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for b in list(self.bridges):
            b.wait(timeout)
        for t in self._threads:
            t.join(timeout)


class IngressGateway(_Gateway):
    """Maps external endpoints to loopback TCP listeners."""

    def __init__(self, client: TsorClient, host: str = "127.0.0.1") -> None:
        super().__init__(client)
        self.host = host
        self.listeners: dict[Endpoint, socket.socket] = {}
        self.addresses: dict[Endpoint, tuple[str, int]] = {}

    def expose(self, external, port: int = 0) -> tuple[str, int]:
        """Start accepting for ``external`` on ``host:port`` (0 picks a free port)."""
        ext = external if isinstance(external, Endpoint) else parse_endpoint(external, self.client.tenant)
        ls = socket.create_server((self.host, port), backlog=128)
        ls.settimeout(0.05)
        self.listeners[ext] = ls
        self.addresses[ext] = ls.getsockname()[:2]
        self._spawn(self._accept_loop, ext, ls, name=f"ingress-{ext}")
        return self.addresses[ext]

    def expose_all(self) -> dict[Endpoint, tuple[str, int]]:
        for ext, _ in self.client.service.tables.ingress.items():
            if ext not in self.listeners:
                self.expose(ext)
        return dict(self.addresses)

    def _accept_loop(self, ext: Endpoint, ls: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = ls.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            self._handle(ext, conn)
        ls.close()

    def _handle(self, ext: Endpoint, conn: socket.socket) -> None:
        svc = ingress_lookup(self.client.service.tables, ext)
        if svc is None:
            self.counters["resets"] += 1
            reset(conn)
            return
        try:
            self.counters["internal_connects"] += 1
            inner = self.client.connect(svc, timeout=10.0)
        except (TsorError, Timeout):
            self.counters["resets"] += 1
            reset(conn)
            return
        b = BridgeSession(conn, inner, "ingress", self.sessions)
        self.bridges.append(b)
        b.start()


class EgressGateway(_Gateway):
    """Accepts channels for out-of-cluster addresses and dials them over TCP."""

    def __init__(self, client: TsorClient, connect_timeout: float = 5.0) -> None:
        super().__init__(client)
        self.connect_timeout = connect_timeout
        self.listener = client.listen_egress()
        self._spawn(self._accept_loop, name="egress")

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                inner = self.listener.accept(timeout=0.05)
            except Timeout:
                continue
            self._spawn(self._dial, inner, name=f"egress-dial-{inner.local_ep}")

    def _dial(self, inner: TsorSocket) -> None:
        target = inner.local_ep
        try:
            ext = socket.create_connection((str(target.ip), target.port), timeout=self.connect_timeout)
        except OSError:
            self.counters["resets"] += 1
            inner.reject(ErrorCode.CONN_REFUSED)
            return
        ext.settimeout(None)
        inner.confirm()
        b = BridgeSession(ext, inner, "egress", self.sessions)
        self.bridges.append(b)
        b.start()


# -- echo endpoints used by the gateway workloads ---------------------------

def serve_echo(client: TsorClient, port: int, stop: threading.Event) -> threading.Thread:
    """Pod-side echo server (threaded cluster): one thread per connection."""
    lst = client.listen(port, backlog=1024)

    def one(s: TsorSocket) -> None:
        try:
            while True:
                data = s.read(RELAY_CHUNK)
                if not data:
                    break
                s.sendall(data)
            s.shutdown()
        except TsorError:
            pass
        finally:
            s.close()

    def loop() -> None:
        while not stop.is_set():
            try:
                s = lst.accept(timeout=0.05)
            except Timeout:
                continue
            threading.Thread(target=one, args=(s,), daemon=True).start()
        lst.close()

    t = threading.Thread(target=loop, name=f"echo-{port}", daemon=True)
    t.start()
    return t


class TcpEchoServer:
    """Plain loopback TCP echo server standing in for an external service."""

    def __init__(self, host: str = "127.0.0.1") -> None:
        self.sock = socket.create_server((host, 0), backlog=128)
        self.sock.settimeout(0.05)
        self.address = self.sock.getsockname()[:2]
        self._stop = threading.Event()
        self._t = threading.Thread(target=self._loop, name="tcp-echo", daemon=True)
        self._t.start()

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            conn.settimeout(None)
            threading.Thread(target=self._one, args=(conn,), daemon=True).start()
        self.sock.close()

    @staticmethod
    def _one(conn: socket.socket) -> None:
        with conn:
            try:
                while True:
                    data = conn.recv(RELAY_CHUNK)
                    if not data:
                        break
                    conn.sendall(data)
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def close(self) -> None:
        self._stop.set()
        self._t.join(2.0)


def tcp_roundtrip(addr: tuple[str, int], payload: bytes, timeout: float = 60.0) -> bytes:
    """Send ``payload`` while reading the echo concurrently; returns what came back."""
    conn = socket.create_connection(addr, timeout=timeout)
    err: list = []

    def sender() -> None:
        try:
            view = memoryview(payload)
            for i in range(0, len(view), RELAY_CHUNK):
                conn.sendall(view[i:i + RELAY_CHUNK])
            conn.shutdown(socket.SHUT_WR)
        except OSError as exc:
            err.append(exc)

    t = threading.Thread(target=sender, daemon=True)
    t.start()
    parts = []
    try:
        while True:
            data = conn.recv(1 << 16)
            if not data:
                break
            parts.append(data)
    finally:
        t.join(timeout)
        conn.close()
    if err:
        raise err[0]
    return b"".join(parts)


def pod_roundtrip(client: TsorClient, dst, payload: bytes, timeout: float = 60.0) -> bytes:
    s = client.connect(dst, timeout=timeout)
    out: list = []

    def sender() -> None:
        try:
            view = memoryview(payload)
            for i in range(0, len(view), RELAY_CHUNK):
                s.sendall(view[i:i + RELAY_CHUNK], timeout=timeout)
            s.shutdown()
        except TsorError as exc:
            out.append(exc)

    t = threading.Thread(target=sender, daemon=True)
    t.start()
    parts = []
    while True:
        data = s.read(1 << 16, timeout=timeout)
        if not data:
            break
        parts.append(data)
    t.join(timeout)
    s.close()
    if out:
        raise out[0]
    return b"".join(parts)


def _digest(b: bytes) -> str:
    return hashlib.blake2b(b, digest_size=16).hexdigest()


def run_ingress_echo(cluster, p, seed: int):
    """External TCP clients -> ingress -> pod echo server, and the egress mirror."""
    if not cluster.threaded:
        raise TsorError("ingress-echo needs a threaded cluster (run with --threaded)")
    sessions = p.get("sessions", 8)
    size = p.get("bytes", 64 * 1024)
    egress = p.get("egress", True)
    st = cluster.state
    rules = sorted(st.ingress, key=lambda r: r.external)
    if not rules:
        raise TsorError("scenario has no ingress rules")
    rule = rules[0]
    members = cluster.service(st.nodes_by_join()[0].node_id).tables.services.members(rule.service)
    if not members:
        raise TsorError(f"service {rule.service} has no members")
    backend = next(pod for pod in st.pods.values() if pod.ip == members[0].ip and pod.tenant == members[0].tenant)
    gw_pod = p.get("gateway", "")
    if not gw_pod:
        first = st.nodes_by_join()[0]
        gw_pod = cluster.cp.add_pod("ingress-gw", first.name, tenant=str(rule.service.tenant)).name
        cluster.settle()

    stop = threading.Event()
    srv = cluster.client(backend.name)
    serve_echo(srv, members[0].port, stop)
    gw = IngressGateway(cluster.client(gw_pod))
    addr = gw.expose(rule.external)

    rng = np.random.default_rng(seed)
    payloads = [rng.bytes(size) for _ in range(sessions)]
    results: list = [None] * sessions

    def ext_client(i: int) -> None:
        try:
            results[i] = tcp_roundtrip(addr, payloads[i]) == payloads[i]
        except OSError:
            results[i] = False

    threads = [threading.Thread(target=ext_client, args=(i,), daemon=True) for i in range(sessions)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120)
    ingress_ok = sum(1 for r in results if r)

    # a connection to an external endpoint with no table entry is reset
    miss = Endpoint(rule.external.tenant, rule.external.ip, (rule.external.port % 65535) + 1)
    miss_addr = gw.expose(miss)
    miss_reset = False
    try:
        c = socket.create_connection(miss_addr, timeout=5)
        try:
            miss_reset = c.recv(1) == b""
        except ConnectionResetError:
            miss_reset = True
        c.close()
    except OSError:
        miss_reset = True

    egress_ok = 0
    eg_leaks = 0
    if egress:
        ext_srv = TcpEchoServer()
        eg_node = st.egress_node()
        if eg_node is None:
            eg_pod = cluster.cp.add_pod("egress-gw", st.nodes_by_join()[-1].name).name
            cluster.cp.set_egress(eg_pod)
            cluster.settle()
        else:
            eg_pod = st.egress_pod
        eg = EgressGateway(cluster.client(eg_pod))
        inner = cluster.client(backend.name)
        for i in range(sessions):
            try:
                egress_ok += pod_roundtrip(inner, ext_srv.address, payloads[i]) == payloads[i]
            except TsorError:
                pass
        for b in list(eg.bridges):
            b.wait(10)
        eg.close()
        eg_leaks = eg.live_sessions
        ext_srv.close()

    for b in list(gw.bridges):
        b.wait(10)
    gw.close()
    stop.set()
    cluster.quiesce()
    return {
        "sessions": sessions, "bytes_per_session": size, "ingress_ok": ingress_ok,
        "egress_ok": egress_ok if egress else None, "miss_reset": miss_reset,
        "leaked_sessions": gw.live_sessions + eg_leaks,
        "payload_digest": _digest(b"".join(payloads)),
    }, []
