"""The per-node service loop.

One ``NodeService`` owns every channel, link and table of its node. All
state below is touched only from the service loop; clients reach it through
their SQ/CQ pair, their socket shares and the few lock-protected
registration calls (``register_client``, ``listen``, ``register_egress``).
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from ipaddress import IPv4Address, IPv4Network
from typing import Callable, Optional

from ..controlplane import (ControlPlane, EgressChanged, NodeJoined, NodeLeft, NodeRecord, PodAdded,
                            PodRemoved, PolicyChanged, ServiceChanged, Snapshot)
from ..endpoint import NULL_EP, Endpoint
from ..errors import (AddrInUse, ErrorCode, FabricError, NetUnreachable, NoBackends, NodeNotFound,
                      SlotsExhausted)
from ..fabric import Completion, CompletionKind, ConnState, Fabric, FabricConnection, RendezvousRecord
from ..policy import TokenBucket, Verdict, enforce
from ..routing import ConnTarget, EgressTarget, RouteTables, ServiceHandler, resolve
from ..shmq import MAX_SLOTS, Doorbell, MsgType, ReadinessBitmap, WaitStats, WorkMessage, service_wait
from .channels import ChannelState, ClientRegion, ControlLink, DataChannel, ListenerShare
from .wire import CONTROL_RECORD_SIZE as REC
from .wire import ControlKind, ControlMessage

__all__ = ["NodeService", "CLOSE_WRITE", "CLOSE_RELEASE"]

log = logging.getLogger(__name__)

# CloseReq payloads
CLOSE_WRITE = 1
CLOSE_RELEASE = 2

_OPEN_STATES = (ChannelState.OPEN, ChannelState.HALF_CLOSED)
_ANY = IPv4Network("0.0.0.0/0")


COUNTERS = (
    "backlog_full", "bytes_rx", "bytes_tx", "channels_closed", "channels_opened", "clients_registered",
    "control_msgs", "cq_overflow", "cq_readready", "credit_msgs", "credit_stalls", "credit_violations",
    "ctrl_acks", "data_writes", "handshake_msgs", "links_up", "policy_denied", "protocol_errors", "refused",
    "sq_msgs", "sq_writereq",
)


class NodeService:
    def __init__(self, node: NodeRecord, fabric: Fabric, controlplane: ControlPlane, *,
                 clock: Callable[[], float] = time.monotonic) -> None:
        opts = controlplane.state.options
        self.node = node
        self.node_id = node.node_id
        self.name = node.name
        self.fabric = fabric
        self.cp = controlplane
        self.clock = clock
        self.buffer_size = opts.buffer_size
        self.control_buffer_size = opts.control_buffer_size
        self.sq_depth = opts.sq_depth
        self.spin_budget = opts.spin_budget

        self.bitmap = ReadinessBitmap()
        self.doorbell = Doorbell()
        self.wait_stats = WaitStats()
        self.counters: collections.Counter = collections.Counter(dict.fromkeys(COUNTERS, 0))
        self.credit_min_amount: Optional[int] = None
        self.trace: Optional[list] = None

        self.clients: list[Optional[ClientRegion]] = [None] * MAX_SLOTS
        self._reg_lock = threading.Lock()
        self._listeners: dict[tuple[int, IPv4Address, int], tuple[ClientRegion, ListenerShare]] = {}
        self._egress: Optional[tuple[ClientRegion, ListenerShare]] = None

        self.tables = RouteTables()
        self.policies: list = []
        self.buckets: dict[int, TokenBucket] = {}
        self.nodes: dict[int, NodeRecord] = {}
        self._pod_tenants: dict[IPv4Address, collections.Counter] = {}
        self._service_cidr = opts.service_cidr

        self.links: dict[int, ControlLink] = {}
        self._links_by_conn: dict[int, ControlLink] = {}
        self._unready_links: list[ControlLink] = []
        self._inbox: collections.deque = collections.deque()
        self._by_socket: dict[tuple[int, int], DataChannel] = {}
        self._pump_ready: dict[DataChannel, None] = {}
        self._rate_blocked: dict[DataChannel, None] = {}
        self._cq_backlog: dict[int, ClientRegion] = {}
        self.closed_flows: list[dict] = []

        self._watch = None
        self._thread: Optional[threading.Thread] = None
        self._stopping = False
        self.started = False
        self.crashed: Optional[BaseException] = None

    def __repr__(self) -> str:
        return f"NodeService({self.name}, id={self.node_id})"

    # ------------------------------------------------------------------
    # lifecycle

    def start(self, threaded: bool = False) -> None:
        """Attach to the fabric, load the snapshot and dial earlier nodes."""
        if self.started:
            raise RuntimeError(f"{self!r} already started")
        self.fabric.attach(self.node_id, self._wake)
        self.fabric.rendezvous.register(self.node_id, self._bootstrap)
        self._watch = self.cp.watch(self.node_id)
        self._watch.notify = self._wake
        self._drain_events()
        self.started = True
        self.fabric.connect(self.node_id, self.node_id)
        for peer in sorted(self.nodes.values(), key=lambda n: n.join_seq):
            if peer.join_seq < self.node.join_seq:
                try:
                    self.fabric.connect(self.node_id, peer.node_id)
                except NodeNotFound:
                    log.warning("%s: peer %s has no service yet", self.name, peer.name)
        self._install_links()
        if threaded:
            self._thread = threading.Thread(target=self.serve_forever, name=f"tsor-{self.name}", daemon=True)
            self._thread.start()

    def stop(self, timeout: Optional[float] = 5.0) -> None:
        self._stopping = True
        self._force_wake()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)
        self._thread = None

    def shutdown(self) -> None:
        """Stop the loop and drop every link (the node is leaving)."""
        self.stop()
        for peer in list(self.links):
            self._drop_link(peer, ErrorCode.CONNECTION_RESET)
        self.fabric.rendezvous.unregister(self.node_id)
        self.cp.unwatch(self.node_id)

    @property
    def threaded(self) -> bool:
        return self._thread is not None

    def _wake(self) -> None:
        self.doorbell.ring()

    def _force_wake(self) -> None:
        with self.doorbell._lock:
            self.doorbell._event.set()

    def serve_forever(self) -> None:
        try:
            while not self._stopping:
                if self.run_once():
                    continue
                slots = service_wait(self.bitmap, self.doorbell, self.spin_budget, self._has_pending,
                                     self.wait_stats, self.next_timer())
                if self._stopping:
                    break
                self.run_once(slots)
        except BaseException as exc:  # surfaced by the cluster's invariant check
            self.crashed = exc
            log.exception("%s: service loop crashed", self.name)
            raise

    def _has_pending(self) -> bool:
        if self._stopping or self._inbox or self._unready_links:
            return True
        if self.fabric.has_completions(self.node_id) or self._watch.pending():
            return True
        return bool(self._rate_blocked) and self.next_timer() == 0.0

    def next_timer(self) -> Optional[float]:
        """Seconds until a rate-limited channel may send again (None: no timer)."""
        if not self._rate_blocked:
            return None
        now = self.clock()
        best = None
        for ch in self._rate_blocked:
            b = self.buckets.get(ch.client.tenant)
            if b is None:
                return 0.0
            pending = max(1, ch.write_buf.available_data - ch.inflight)
            t = b.time_until(pending, now)
            best = t if best is None else min(best, t)
        return best

    def idle(self, polls: Optional[int] = None) -> None:
        """Inline-driver hook: charge ``polls`` empty polls (default: the rest
        of the spin budget) and go to sleep once the budget is spent."""
        if self.doorbell.sleeping or self._rate_blocked:
            return
        left = self.spin_budget - self.wait_stats.idle_run
        self.wait_stats.spin(left if polls is None else min(polls, left))
        if self.wait_stats.idle_run >= self.spin_budget:
            self.doorbell.prepare_sleep()
            self.doorbell.sleeps += 1

    # ------------------------------------------------------------------
    # client manager

    def register_client(self, tenant: int, ip, buffer_size: Optional[int] = None,
                        depth: Optional[int] = None) -> ClientRegion:
        with self._reg_lock:
            for slot, c in enumerate(self.clients):
                if c is None:
                    break
            else:
                raise SlotsExhausted(f"all {MAX_SLOTS} client slots on {self.name} are in use")
            region = ClientRegion(slot, tenant, IPv4Address(ip), depth or self.sq_depth, self.bitmap,
                                  self.doorbell, buffer_size or self.buffer_size)
            self.clients[slot] = region
            self.counters["clients_registered"] += 1
            return region

    def unregister_client(self, region: ClientRegion) -> None:
        with self._reg_lock:
            for key, (r, _) in list(self._listeners.items()):
                if r is region:
                    del self._listeners[key]
            if self._egress is not None and self._egress[0] is region:
                self._egress = None
        # the slot is freed by the service once the queued SQ work is drained
        region.departing = True
        region.kick()

    def listen(self, region: ClientRegion, endpoint: Endpoint, socket_id: int, backlog: int) -> ListenerShare:
        if endpoint.ip != region.ip:
            raise AddrInUse(f"{endpoint} is outside this pod's identity {region.ip}")
        key = (endpoint.tenant, endpoint.ip, endpoint.port)
        with self._reg_lock:
            if key in self._listeners:
                raise AddrInUse(f"{endpoint} is already listening")
            share = ListenerShare(socket_id, endpoint, max(1, backlog))
            self._listeners[key] = (region, share)
            region.listeners[socket_id] = share
            return share

    def unlisten(self, region: ClientRegion, share: ListenerShare) -> None:
        ep = share.endpoint
        with self._reg_lock:
            entry = self._listeners.get((ep.tenant, ep.ip, ep.port))
            if entry is not None and entry[1] is share:
                del self._listeners[(ep.tenant, ep.ip, ep.port)]
            region.listeners.pop(share.socket_id, None)

    def register_egress(self, region: ClientRegion, socket_id: int, backlog: int = 1 << 16) -> ListenerShare:
        with self._reg_lock:
            if self._egress is not None:
                raise AddrInUse(f"{self.name} already has an egress gateway")
            share = ListenerShare(socket_id, NULL_EP, backlog)
            self._egress = (region, share)
            region.listeners[socket_id] = share
            return share

    # ------------------------------------------------------------------
    # mesh bootstrap

    def _bootstrap(self, conn: FabricConnection) -> RendezvousRecord:
        # runs on the dialing thread: touch only the fabric and the inbox
        peer = conn.peer_of(self.node_id)
        link = ControlLink(conn, peer, self.control_buffer_size)
        link.read_mr = self.fabric.register_mr(self.node_id, link.read_buf)
        link.write_mr = self.fabric.register_mr(self.node_id, link.write_buf)
        self._inbox.append(link)
        self._wake()
        return RendezvousRecord(self.node_id, link.read_mr, link.read_buf.capacity)

    def _install_links(self) -> bool:
        if not self._inbox and not self._unready_links:
            return False
        while self._inbox:
            self._unready_links.append(self._inbox.popleft())
        waiting = []
        for link in self._unready_links:
            conn = link.conn
            if conn.state is ConnState.CLOSED:
                self._free_link_mrs(link)
                continue
            if conn.state is not ConnState.ESTABLISHED or link.peer not in conn.meta:
                waiting.append(link)
                continue
            meta = conn.meta[link.peer]
            link.remote_mr = meta.control_mr
            link.remote_capacity = meta.control_capacity
            link.remote_free = meta.control_capacity
            link.installed = True
            old = self.links.get(link.peer)
            if old is not None and old is not link:
                self._drop_link(link.peer, ErrorCode.CONNECTION_RESET)
            self.links[link.peer] = link
            self._links_by_conn[conn.conn_id] = link
            self.counters["links_up"] += 1
            self._ctrl_flush(link)
        self._unready_links = waiting
        return True

    def _free_link_mrs(self, link: ControlLink) -> None:
        self.fabric.deregister_mr(self.node_id, link.read_mr)
        self.fabric.deregister_mr(self.node_id, link.write_mr)

    def _drop_link(self, peer: int, code: ErrorCode) -> None:
        link = self.links.pop(peer, None)
        if link is None:
            return
        self._links_by_conn.pop(link.conn.conn_id, None)
        for ch in list(link.channels.values()):
            self._fail_channel(ch, code)
        self._free_link_mrs(link)
        if peer != self.node_id:
            self.fabric.disconnect(self.node_id, peer)

    # ------------------------------------------------------------------
    # control-plane events

    def _drain_events(self) -> bool:
        if self._watch is None or not self._watch.pending():
            return False
        for ev in self._watch.poll():
            self._apply_event(ev)
        return True

    def _apply_event(self, ev) -> None:
        if isinstance(ev, Snapshot):
            self._load_snapshot(ev.state)
        elif isinstance(ev, NodeJoined):
            self.nodes[ev.node.node_id] = ev.node
            self.tables.routes.set(ev.node.cidr, ConnTarget(ev.node.node_id, ev.node.name))
        elif isinstance(ev, NodeLeft):
            self.nodes.pop(ev.node.node_id, None)
            if ev.node.cidr in self.tables.routes:
                self.tables.routes.remove(ev.node.cidr)
            self._drop_link(ev.node.node_id, ErrorCode.CONNECTION_RESET)
        elif isinstance(ev, PodAdded):
            self._pod_tenants.setdefault(ev.pod.ip, collections.Counter())[ev.pod.tenant] += 1
        elif isinstance(ev, PodRemoved):
            c = self._pod_tenants.get(ev.pod.ip)
            if c is not None:
                c[ev.pod.tenant] -= 1
                if c[ev.pod.tenant] <= 0:
                    del c[ev.pod.tenant]
                if not c:
                    del self._pod_tenants[ev.pod.ip]
        elif isinstance(ev, ServiceChanged):
            if ev.removed:
                self.tables.services.remove(ev.service.endpoint)
            else:
                self.tables.services.set(ev.service.endpoint, ev.service.members)
        elif isinstance(ev, PolicyChanged):
            self.policies = list(ev.rules)
        elif isinstance(ev, EgressChanged):
            n = ev.node
            self.tables.routes.set(_ANY, EgressTarget(n.node_id, n.name) if n else EgressTarget())

    def _load_snapshot(self, st) -> None:
        self.nodes = dict(st.nodes)
        self.tables = RouteTables()
        for n in st.nodes_by_join():
            self.tables.routes.set(n.cidr, ConnTarget(n.node_id, n.name))
        self.tables.routes.set(st.options.service_cidr, ServiceHandler())
        eg = st.egress_node()
        if eg is not None:
            self.tables.routes.set(_ANY, EgressTarget(eg, st.nodes[eg].name))
        else:
            self.tables.routes.set(_ANY, EgressTarget())
        for svc in sorted(st.services.values(), key=lambda s: s.name):
            self.tables.services.set(svc.endpoint, svc.members)
        for rule in st.ingress:
            self.tables.ingress.set(rule.external, rule.service)
        self.policies = list(st.policies)
        now = self.clock()
        self.buckets = {t: TokenBucket(rl.rate, rl.burst, now) for t, rl in sorted(st.ratelimits.items())}
        self._pod_tenants = {}
        for pod in st.pods.values():
            self._pod_tenants.setdefault(pod.ip, collections.Counter())[pod.tenant] += 1
        self._service_cidr = st.options.service_cidr

    # ------------------------------------------------------------------
    # main loop

    def run_once(self, slots: Optional[list[int]] = None) -> bool:
        """One service round. Returns True if any work was done."""
        db = self.doorbell
        if db.sleeping:
            # inline mode only: a sleeping service runs nothing until rung
            if not db.is_set():
                return False
            db.cancel_sleep()
            self.wait_stats.reset()
        worked = self._drain_events()
        worked |= self._install_links()
        ready = self.bitmap.scan()
        if slots:
            ready = sorted(set(ready).union(slots))
        for slot in ready:
            region = self.clients[slot]
            if region is not None:
                worked = True
                self._drain_sq(region)
                if region.departing:
                    self._retire_client(region)
        comps = self.fabric.poll_completions(self.node_id)
        if comps:
            worked = True
            for c in comps:
                self._on_completion(c)
        if self._rate_blocked:
            blocked, self._rate_blocked = self._rate_blocked, {}
            for ch in blocked:
                self._pump_ready[ch] = None
        while self._pump_ready:
            ready_chs, self._pump_ready = self._pump_ready, {}
            sent = False
            for ch in ready_chs:
                if not ch.destroyed:
                    sent |= self._pump(ch)
            worked |= sent
        if self._cq_backlog:
            self._flush_cq_backlogs()
        if worked:
            self.wait_stats.reset()
        return worked

    def _emit(self, event: str, **kw) -> None:
        if self.trace is not None:
            self.trace.append((self.clock(), self.name, event, kw))

    # -- CQ -------------------------------------------------------------

    def _cq(self, region: ClientRegion, m: WorkMessage) -> None:
        if region.cq_backlog or not region.qp.cq.try_push(m):
            region.cq_backlog.append(m)
            self._cq_backlog[region.slot] = region
            self.counters["cq_overflow"] += 1
        region.notify()

    def _flush_cq_backlogs(self) -> None:
        for slot, region in list(self._cq_backlog.items()):
            q = region.cq_backlog
            while q and region.qp.cq.try_push(q[0]):
                q.popleft()
            if not q:
                del self._cq_backlog[slot]
            region.notify()

    def _cq_error(self, region: ClientRegion, socket_id: int, code: ErrorCode) -> None:
        self._cq(region, WorkMessage(MsgType.ERROR, socket_id, payload_u32=int(code)))

    # -- SQ -------------------------------------------------------------

    def _drain_sq(self, region: ClientRegion) -> None:
        sq = region.qp.sq
        slot = region.slot
        while True:
            m = sq.pop()
            if m is None:
                break
            t = m.msg_type
            self.counters["sq_msgs"] += 1
            if t is MsgType.WRITE_REQ:
                self.counters["sq_writereq"] += 1
                ch = self._by_socket.get((slot, m.socket_id))
                self._emit("write_req", socket=m.socket_id)
                if ch is not None:
                    self._pump_ready[ch] = None
            elif t is MsgType.CREDIT_HINT:
                ch = self._by_socket.get((slot, m.socket_id))
                if ch is not None:
                    self.post_read_credit(ch, m.payload_u32)
            elif t is MsgType.CONNECT_REQ:
                self.handle_connect_req(region, m)
            elif t is MsgType.CLOSE_REQ:
                ch = self._by_socket.get((slot, m.socket_id))
                if ch is not None:
                    self._handle_close_req(ch, m.payload_u32)
            elif t is MsgType.CONNECT_RESP:
                ch = self._by_socket.get((slot, m.socket_id))
                if ch is not None:
                    self._handle_egress_confirm(ch, m.payload_u32)
            else:
                self.counters["protocol_errors"] += 1

    # -- policy / QoS ---------------------------------------------------

    def dst_tenants(self, ip) -> set[int]:
        out = set(self._pod_tenants.get(ip, ()))
        if ip in self._service_cidr:
            out |= self.tables.services.tenants_at(ip)
        return out

    def enforce(self, src: Endpoint, dst: Endpoint) -> Verdict:
        return enforce(self.policies, src, dst, self.dst_tenants(dst.ip))

    def rate_limit(self, ch: DataChannel, want: int) -> int:
        bucket = self.buckets.get(ch.client.tenant)
        if bucket is None:
            return want
        now = self.clock()
        # wait for a full burst (or the whole backlog) rather than trickle bytes
        if bucket.available(now) < min(want, bucket.burst):
            return 0
        return bucket.take(want, now)

    # -- connection setup: initiator -----------------------------------

    def handle_connect_req(self, region: ClientRegion, m: WorkMessage) -> None:
        sid = m.socket_id
        src = Endpoint(region.tenant, region.ip, m.src_ep.port)
        dst = m.dst_ep if m.dst_ep.tenant else m.dst_ep.with_tenant(region.tenant)
        verdict = self.enforce(src, dst)
        if not verdict:
            self.counters["policy_denied"] += 1
            return self._cq_error(region, sid, ErrorCode.PERMISSION_DENIED)
        target = resolve(self.tables, dst)
        if isinstance(target, ServiceHandler):
            try:
                dst = self.tables.services.select(dst)
            except NoBackends:
                return self._cq_error(region, sid, ErrorCode.NO_BACKENDS)
            except NetUnreachable:
                return self._cq_error(region, sid, ErrorCode.NET_UNREACHABLE)
            if not self.enforce(src, dst):
                self.counters["policy_denied"] += 1
                return self._cq_error(region, sid, ErrorCode.PERMISSION_DENIED)
            target = resolve(self.tables, dst)
        if isinstance(target, ServiceHandler) or target.node is None:
            return self._cq_error(region, sid, ErrorCode.NET_UNREACHABLE)
        link = self.links.get(target.node)
        if link is None:
            return self._cq_error(region, sid, ErrorCode.NET_UNREACHABLE)
        ch = self._new_channel(region, sid, link, src, dst, initiator=True)
        ch.flow = (link.conn.conn_id, self.node_id, ch.key)
        self._ctrl_send(link, ControlMessage(
            ControlKind.CONN_REQ, src_ep=src, dst_ep=dst, initiator_channel_key=ch.key,
            read_mr=ch.read_mr, read_capacity=ch.read_buf.capacity))

    def _retire_client(self, region: ClientRegion) -> None:
        for key, ch in list(self._by_socket.items()):
            if key[0] != region.slot:
                continue
            if not ch.released:
                self._handle_close_req(ch, CLOSE_RELEASE)
            # later lookups must not hit a new client that reuses the slot
            if self._by_socket.get(key) is ch:
                del self._by_socket[key]
        self._cq_backlog.pop(region.slot, None)
        with self._reg_lock:
            if self.clients[region.slot] is region:
                self.clients[region.slot] = None

    def _new_channel(self, region: ClientRegion, sid: int, link: ControlLink, src: Endpoint,
                     dst: Endpoint, initiator: bool) -> DataChannel:
        from .channels import SocketShare
        key = link.next_key()
        share = SocketShare(sid, key, region.buffer_size, region.buffer_size)
        ch = DataChannel(key, link, share, region, sid, src, dst, initiator)
        ch.read_mr = self.fabric.register_mr(self.node_id, share.read_buf)
        ch.write_mr = self.fabric.register_mr(self.node_id, share.write_buf)
        link.channels[key] = ch
        self._by_socket[(region.slot, sid)] = ch
        region.shares[sid] = share
        self.counters["channels_opened"] += 1
        return ch

    def _destroy_channel(self, ch: DataChannel) -> None:
        if ch.destroyed:
            return
        ch.destroyed = True
        ch.state = ChannelState.CLOSED
        self.fabric.deregister_mr(self.node_id, ch.read_mr)
        self.fabric.deregister_mr(self.node_id, ch.write_mr)
        if ch.link.channels.get(ch.key) is ch:
            del ch.link.channels[ch.key]
        if self._by_socket.get((ch.client.slot, ch.socket_id)) is ch:
            del self._by_socket[(ch.client.slot, ch.socket_id)]
        self._pump_ready.pop(ch, None)
        self._rate_blocked.pop(ch, None)
        self.counters["channels_closed"] += 1
        if ch.flow:
            self.closed_flows.append(self._flow_stats(ch))

    def _flow_stats(self, ch: DataChannel) -> dict:
        return {"flow": list(ch.flow), "node": self.node_id, "initiator": ch.initiator,
                "bytes_tx": ch.bytes_tx, "bytes_rx": ch.bytes_rx, "credits": ch.credits_sent}

    def flow_stats(self) -> list[dict]:
        live = [self._flow_stats(ch) for link in self.links.values()
                for ch in link.channels.values() if ch.flow]
        return self.closed_flows + live

    def _fail_channel(self, ch: DataChannel, code: ErrorCode) -> None:
        share = ch.share
        if ch.state is ChannelState.HANDSHAKING and ch.initiator:
            self._cq_error(ch.client, ch.socket_id, code)
        elif not ch.released:
            share.error = int(code)
            share.remote_closed = True
            self._cq_error(ch.client, ch.socket_id, code)
        self._destroy_channel(ch)

    # -- connection setup: acceptor ------------------------------------

    def handle_conn_req_remote(self, link: ControlLink, cm: ControlMessage) -> None:
        dst, src = cm.dst_ep, cm.src_ep
        entry = self._listeners.get((dst.tenant, dst.ip, dst.port))
        egress = False
        if entry is None:
            if self._egress is not None and isinstance(resolve(self.tables, dst), EgressTarget) \
                    and not self.dst_tenants(dst.ip):
                entry, egress = self._egress, True
            else:
                other = any(k[1] == dst.ip and k[2] == dst.port for k in self._listeners)
                code = ErrorCode.PERMISSION_DENIED if other else ErrorCode.CONN_REFUSED
                return self._refuse(link, cm, code)
        region, lst = entry
        if not lst.try_reserve():
            self.counters["backlog_full"] += 1
            return self._refuse(link, cm, ErrorCode.CONN_REFUSED)
        ch = self._new_channel(region, region.alloc_socket_id(), link, dst, src, initiator=False)
        ch.flow = (link.conn.conn_id, link.peer, cm.initiator_channel_key)
        ch.peer_key = cm.initiator_channel_key
        ch.remote_mr = cm.read_mr
        ch.remote_capacity = cm.read_capacity
        ch.remote_free = cm.read_capacity
        ch.egress = egress
        self._cq(region, WorkMessage(MsgType.ACCEPT_READY, ch.socket_id, ch.key, src, dst, lst.socket_id))
        if not egress:
            ch.state = ChannelState.OPEN
            self._send_conn_resp(ch)

    def _send_conn_resp(self, ch: DataChannel) -> None:
        self._ctrl_send(ch.link, ControlMessage(
            ControlKind.CONN_RESP, src_ep=ch.dst_ep, dst_ep=ch.src_ep, initiator_channel_key=ch.peer_key,
            responder_channel_key=ch.key, read_mr=ch.read_mr, read_capacity=ch.read_buf.capacity,
            initial_credit=ch.read_buf.capacity))

    def _refuse(self, link: ControlLink, cm: ControlMessage, code: ErrorCode) -> None:
        self.counters["refused"] += 1
        self._ctrl_send(link, ControlMessage(
            ControlKind.REFUSE, src_ep=cm.src_ep, dst_ep=cm.dst_ep,
            initiator_channel_key=cm.initiator_channel_key, reason=int(code)))

    def _handle_egress_confirm(self, ch: DataChannel, code: int) -> None:
        if not ch.egress or ch.state is not ChannelState.HANDSHAKING:
            self.counters["protocol_errors"] += 1
            return
        if code == 0:
            ch.state = ChannelState.OPEN
            self._send_conn_resp(ch)
            if ch.local_shutdown:
                self._pump_ready[ch] = None
        else:
            self._refuse(ch.link, ControlMessage(ControlKind.CONN_REQ, ch.dst_ep, ch.src_ep,
                                                  initiator_channel_key=ch.peer_key), ErrorCode(code))
            self._destroy_channel(ch)

    def _on_conn_resp(self, link: ControlLink, cm: ControlMessage) -> None:
        ch = link.channels.get(cm.initiator_channel_key)
        if ch is None or ch.state is not ChannelState.HANDSHAKING or not ch.initiator:
            self.counters["protocol_errors"] += 1
            return
        ch.peer_key = cm.responder_channel_key
        ch.remote_mr = cm.read_mr
        ch.remote_capacity = cm.read_capacity
        ch.remote_free = cm.initial_credit
        ch.state = ChannelState.OPEN
        ch.dst_ep = cm.dst_ep
        self._cq(ch.client, WorkMessage(MsgType.CONNECT_RESP, ch.socket_id, ch.key, ch.src_ep, ch.dst_ep))
        if ch.local_shutdown:
            self._pump_ready[ch] = None

    def _on_refuse(self, link: ControlLink, cm: ControlMessage) -> None:
        ch = link.channels.get(cm.initiator_channel_key)
        if ch is None or ch.state is not ChannelState.HANDSHAKING:
            self.counters["protocol_errors"] += 1
            return
        code = ErrorCode(cm.reason) if cm.reason in ErrorCode._value2member_map_ else ErrorCode.CONN_REFUSED
        self._cq_error(ch.client, ch.socket_id, code)
        self._destroy_channel(ch)

    # -- close ----------------------------------------------------------

    def _handle_close_req(self, ch: DataChannel, how: int) -> None:
        ch.local_shutdown = True
        if how == CLOSE_RELEASE and not ch.released:
            ch.released = True
            n = ch.read_buf.available_data
            if n:
                ch.read_buf.advance_head(n)
                self.post_read_credit(ch, n)
        if ch.state is ChannelState.HANDSHAKING and ch.initiator and ch.released:
            # the reply will find the channel released and close it then
            return
        if ch.state in _OPEN_STATES:
            self._pump_ready[ch] = None
        self._maybe_destroy(ch)

    def _send_close(self, ch: DataChannel) -> None:
        ch.close_sent = True
        ch.state = ChannelState.CLOSED if ch.remote_close_received else ChannelState.HALF_CLOSED
        self._ctrl_send(ch.link, ControlMessage(
            ControlKind.CLOSE, src_ep=ch.src_ep, dst_ep=ch.dst_ep, initiator_channel_key=ch.key,
            responder_channel_key=ch.peer_key))
        self._maybe_destroy(ch)

    def _on_close(self, link: ControlLink, cm: ControlMessage) -> None:
        ch = link.channels.get(cm.responder_channel_key)
        if ch is None:
            self.counters["protocol_errors"] += 1
            return
        ch.remote_close_received = True
        ch.share.remote_closed = True
        ch.state = ChannelState.CLOSED if ch.close_sent else ChannelState.HALF_CLOSED
        if not ch.released:
            self._notify_readable(ch, force=True)
        self._maybe_destroy(ch)

    def _maybe_destroy(self, ch: DataChannel) -> None:
        if ch.close_sent and ch.remote_close_received and ch.released:
            self._destroy_channel(ch)

    # -- completions ----------------------------------------------------

    def _on_completion(self, c: Completion) -> None:
        link = self._links_by_conn.get(c.conn.conn_id)
        if link is None:
            self._install_links()
            link = self._links_by_conn.get(c.conn.conn_id)
            if link is None:
                self.counters["protocol_errors"] += 1
                return
        if c.kind is CompletionKind.SEND_DONE:
            if c.wr_id == 0:
                n = link.inflight_q.popleft()
                link.write_buf.advance_head(n)
                link.inflight -= n
                if link.pending:
                    self._ctrl_flush(link)
                return
            ch = link.channels.get(c.wr_id)
            if ch is None:
                self.counters["protocol_errors"] += 1
                return
            n = ch.inflight_q.popleft()
            ch.write_buf.advance_head(n)
            ch.inflight -= n
            if ch.share.take_want_write():
                self._cq(ch.client, WorkMessage(MsgType.WRITE_READY, ch.socket_id, ch.key))
            self._pump_ready[ch] = None
        elif c.imm == 0:
            self._on_control_data(link, c)
        else:
            self.on_recv_imm(link, c)

    def on_recv_imm(self, link: ControlLink, c: Completion) -> None:
        ch = link.channels.get(c.imm)
        if ch is None or c.mr_id != ch.read_mr:
            self.counters["protocol_errors"] += 1
            return
        n = c.length
        ch.read_buf.commit(n)
        ch.bytes_rx += n
        self.counters["bytes_rx"] += n
        if ch.released:
            avail = ch.read_buf.available_data
            ch.read_buf.advance_head(avail)
            self.post_read_credit(ch, avail)
        else:
            self._notify_readable(ch)

    def _notify_readable(self, ch: DataChannel, force: bool = False) -> None:
        if ch.share.mark_readready() or force:
            self.counters["cq_readready"] += 1
            self._emit("read_ready", socket=ch.socket_id)
            self._cq(ch.client, WorkMessage(MsgType.READ_READY, ch.socket_id, ch.key))

    def post_read_credit(self, ch: DataChannel, freed: int) -> None:
        ch.freed_since_notify += freed
        if ch.freed_since_notify * 2 <= ch.read_buf.capacity:
            return
        amount, ch.freed_since_notify = ch.freed_since_notify, 0
        if ch.remote_close_received or ch.state not in _OPEN_STATES or ch.destroyed:
            return
        self.counters["credit_msgs"] += 1
        ch.credits_sent += 1
        if self.credit_min_amount is None or amount < self.credit_min_amount:
            self.credit_min_amount = amount
        self._ctrl_send(ch.link, ControlMessage(
            ControlKind.CREDIT, initiator_channel_key=ch.key, responder_channel_key=ch.peer_key,
            initial_credit=amount))

    # -- control channel ------------------------------------------------

    def _on_control_data(self, link: ControlLink, c: Completion) -> None:
        rb = link.read_buf
        rb.commit(c.length)
        while rb.available_data >= REC:
            raw = rb.consume(REC)
            link.consumed_total += REC
            cm = ControlMessage.unpack(raw)
            delta = (cm.ctrl_ack - link.peer_acked) & 0xFFFFFFFF
            link.peer_acked = cm.ctrl_ack
            link.remote_free += delta
            kind = cm.kind
            if kind is ControlKind.CONN_REQ:
                self.handle_conn_req_remote(link, cm)
            elif kind is ControlKind.CONN_RESP:
                self._on_conn_resp(link, cm)
            elif kind is ControlKind.CREDIT:
                if cm.responder_channel_key:
                    ch = link.channels.get(cm.responder_channel_key)
                    if ch is None:
                        self.counters["protocol_errors"] += 1
                    else:
                        ch.remote_free += cm.initial_credit
                        self._pump_ready[ch] = None
            elif kind is ControlKind.CLOSE:
                self._on_close(link, cm)
            elif kind is ControlKind.REFUSE:
                self._on_refuse(link, cm)
        self._ctrl_flush(link)

    def _ctrl_send(self, link: ControlLink, cm: ControlMessage) -> None:
        self.counters["control_msgs"] += 1
        if cm.kind in (ControlKind.CONN_REQ, ControlKind.CONN_RESP, ControlKind.REFUSE):
            self.counters["handshake_msgs"] += 1
        link.pending.append(cm)
        self._ctrl_flush(link)

    def _ctrl_flush(self, link: ControlLink) -> None:
        if not link.installed or link.conn.state is not ConnState.ESTABLISHED:
            return
        staged = 0
        wb = link.write_buf
        # regular records keep one slot in reserve so an ack can always go out
        while link.pending and link.remote_free - staged >= 2 * REC:
            cm = link.pending.popleft()
            cm.ctrl_ack = link.consumed_total
            wb.produce(cm.pack())
            staged += REC
        unacked = link.consumed_total - link.acked_sent
        if not staged and unacked * 2 >= link.read_buf.capacity and link.remote_free >= REC:
            wb.produce(ControlMessage(ControlKind.CREDIT, ctrl_ack=link.consumed_total).pack())
            staged += REC
            self.counters["ctrl_acks"] += 1
            self.counters["control_msgs"] += 1
        if staged:
            link.acked_sent = link.consumed_total
            self._post(link, staged, 0, 0)

    # -- data pump ------------------------------------------------------

    def _post(self, x, n: int, imm: int, wr_id: int) -> None:
        """Write ``n`` pending bytes of ``x`` (a channel or link) to its peer.

        Source and destination rings may wrap at different points, so the
        write is cut at both; only the final piece carries ``imm``.
        """
        if n > x.remote_free:
            # never expected; the fabric's overwrite check is the backstop
            self.counters["credit_violations"] += 1
        src = x.write_buf.peek(x.write_buf.head + x.inflight, n)
        cap = x.remote_capacity
        dst_off = x.remote_tail_shadow & (cap - 1)
        pieces = []
        for view in src:
            pos = 0
            while pos < len(view):
                take = min(len(view) - pos, cap - dst_off)
                pieces.append((dst_off, view[pos:pos + take]))
                pos += take
                dst_off = (dst_off + take) & (cap - 1)
        conn = x.link.conn if isinstance(x, DataChannel) else x.conn
        last = len(pieces) - 1
        for i, (off, data) in enumerate(pieces):
            self.fabric.write_imm(conn, self.node_id, x.remote_mr, off, data,
                                  imm if i == last else None, signaled=i == last, wr_id=wr_id)
        x.remote_tail_shadow += n
        x.remote_free -= n
        x.inflight += n
        x.inflight_q.append(n)

    def _pump(self, ch: DataChannel) -> bool:
        if ch.state not in _OPEN_STATES or ch.close_sent:
            return False
        pending = ch.write_buf.available_data - ch.inflight
        if pending <= 0:
            if ch.inflight == 0:
                self._pump_drained(ch)
            return False
        if ch.remote_free <= 0:
            self.counters["credit_stalls"] += 1
            return False
        n = min(pending, ch.remote_free)
        if ch.client.tenant in self.buckets:
            n = self.rate_limit(ch, n)
            if n == 0:
                self._rate_blocked[ch] = None
                return False
        try:
            self._post(ch, n, ch.peer_key, ch.key)
        except FabricError:
            if ch.link.conn.state is not ConnState.ESTABLISHED:
                self._fail_channel(ch, ErrorCode.CONNECTION_RESET)
                return False
            raise
        ch.bytes_tx += n
        self.counters["bytes_tx"] += n
        self.counters["data_writes"] += 1
        return True

    def _pump_drained(self, ch: DataChannel) -> None:
        if ch.local_shutdown:
            self._send_close(ch)
            return
        share = ch.share
        with share.lock:
            share.pump_idle = True
        # a write that raced the flag must not be stranded
        if ch.write_buf.available_data and share.try_activate():
            self._pump_ready[ch] = None

    # -- introspection --------------------------------------------------

    def stats(self) -> dict:
        out = dict(self.counters)
        out["sleeps"] = self.doorbell.sleeps
        out["wakes"] = self.doorbell.wakes
        out["poll_iterations"] = self.wait_stats.poll_iterations
        out["max_idle_run"] = self.wait_stats.max_idle_run
        out["fabric_connections"] = self.fabric.connection_count(self.node_id)
        out["credit_min_amount"] = self.credit_min_amount or 0
        out["live_channels"] = sum(len(link.channels) for link in self.links.values())
        return out

    def dump_table(self, what: str) -> str:
        if what == "policies":
            return "".join(f"{r}\n" for r in self.policies)
        return self.tables.dump(what, self.cp.state.tenant_names())
