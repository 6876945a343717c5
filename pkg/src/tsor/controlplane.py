"""Mock orchestration control plane: cluster state, scenario files and
change notifications to node services.

Scenario grammar (``#`` starts a comment, blank lines ignored)::

    tsor-scenario v1
    [options]
    buffer_size = 65536          # per-direction socket ring, power of two
    control_buffer_size = 65536
    sq_depth = 1024
    spin_budget = 10000
    hop_us = 1                   # simulated cost of one service round
    shared_tenant_cidr = false
    service_cidr = 10.5.0.0/16
    [tenants]
    default                      # ids are assigned 1, 2, ... in order
    acme
    [nodes]
    Node1 10.244.1.0/24          # CIDR optional: default 10.244.<n>.0/24
    [pods]
    pod1 Node1 tenant=default ip=10.244.1.1    # tenant/ip optional
    [services]
    svc1 10.5.6.7:546 -> pod3:546, 10.244.2.6:546   # tenant=T before ->
    [ingress]
    202.2.3.4:8080 -> svc1       # or a service ip:port
    [policies]
    deny src=10.244.1.0/24 port=6379           # first match wins
    [ratelimits]
    acme rate=1000000 burst=65536
    [gateways]
    egress gwpod
"""

from __future__ import annotations

import collections
import copy
import dataclasses
import hashlib
import os
import threading
from ipaddress import IPv4Address, IPv4Network
from typing import Callable, Optional, Union

from .endpoint import Endpoint, parse_endpoint
from .errors import ScenarioError
from .policy import PolicyRule, parse_rule
from .routing import DEFAULT_SERVICE_CIDR, PodIpAllocator

__all__ = [
    "Options", "NodeRecord", "PodRecord", "ServiceRecord", "IngressRule", "RateLimit",
    "ClusterState", "ControlPlane", "Watch", "load_scenario", "parse_scenario",
    "Snapshot", "NodeJoined", "NodeLeft", "PodAdded", "PodRemoved", "ServiceChanged",
    "PolicyChanged", "EgressChanged", "HEADER", "BUNDLED_DIR", "scenario_path",
]

HEADER = "tsor-scenario v1"
BUNDLED_DIR = os.path.join(os.path.dirname(__file__), "scenarios")


@dataclasses.dataclass
class Options:
    buffer_size: int = 65536
    control_buffer_size: int = 65536
    sq_depth: int = 1024
    spin_budget: int = 10_000
    hop_us: float = 1.0
    shared_tenant_cidr: bool = False
    service_cidr: IPv4Network = DEFAULT_SERVICE_CIDR

    def set(self, key: str, value: str) -> None:
        if key not in {f.name for f in dataclasses.fields(self)}:
            raise ScenarioError(f"unknown option {key!r}")
        cur = getattr(self, key)
        if isinstance(cur, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ScenarioError(f"option {key} expects a boolean")
            setattr(self, key, value.lower() in ("true", "1", "yes"))
        elif isinstance(cur, IPv4Network):
            setattr(self, key, IPv4Network(value))
        elif isinstance(cur, float):
            setattr(self, key, float(value))
        else:
            setattr(self, key, int(value))


@dataclasses.dataclass(frozen=True)
class NodeRecord:
    node_id: int
    name: str
    cidr: IPv4Network
    join_seq: int


@dataclasses.dataclass(frozen=True)
class PodRecord:
    name: str
    tenant: int
    node: int
    ip: IPv4Address

    def endpoint(self, port: int = 0) -> Endpoint:
        return Endpoint(self.tenant, self.ip, port)


@dataclasses.dataclass(frozen=True)
class ServiceRecord:
    name: str
    endpoint: Endpoint
    members: tuple[Endpoint, ...]


@dataclasses.dataclass(frozen=True)
class IngressRule:
    external: Endpoint
    service: Endpoint


@dataclasses.dataclass(frozen=True)
class RateLimit:
    tenant: int
    rate: float
    burst: int


@dataclasses.dataclass
class ClusterState:
    options: Options = dataclasses.field(default_factory=Options)
    tenants: dict[str, int] = dataclasses.field(default_factory=dict)
    nodes: dict[int, NodeRecord] = dataclasses.field(default_factory=dict)
    pods: dict[str, PodRecord] = dataclasses.field(default_factory=dict)
    services: dict[str, ServiceRecord] = dataclasses.field(default_factory=dict)
    ingress: list[IngressRule] = dataclasses.field(default_factory=list)
    policies: list[PolicyRule] = dataclasses.field(default_factory=list)
    ratelimits: dict[int, RateLimit] = dataclasses.field(default_factory=dict)
    egress_pod: Optional[str] = None
    allocators: dict[int, PodIpAllocator] = dataclasses.field(default_factory=dict, repr=False)
    source_sha256: str = ""

    # -- lookups --------------------------------------------------------

    def tenant_id(self, name: str) -> int:
        if name in self.tenants:
            return self.tenants[name]
        try:
            return int(name)
        except ValueError:
            raise ScenarioError(f"unknown tenant {name!r}") from None

    def tenant_names(self) -> dict[int, str]:
        return {v: k for k, v in self.tenants.items()}

    def default_tenant(self) -> int:
        return min(self.tenants.values()) if self.tenants else 1

    def node_by_name(self, name: str) -> NodeRecord:
        for n in self.nodes.values():
            if n.name == name:
                return n
        raise ScenarioError(f"unknown node {name!r}")

    def node_ids(self) -> dict[str, int]:
        return {n.name: n.node_id for n in self.nodes.values()}

    def nodes_by_join(self) -> list[NodeRecord]:
        return sorted(self.nodes.values(), key=lambda n: n.join_seq)

    def pods_on(self, node: int) -> list[PodRecord]:
        return [p for p in self.pods.values() if p.node == node]

    def egress_node(self) -> Optional[int]:
        if self.egress_pod and self.egress_pod in self.pods:
            return self.pods[self.egress_pod].node
        return None

    def allocate_pod_ip(self, node: int, tenant: int) -> IPv4Address:
        return self.allocators[node].allocate(tenant)

    # -- canonical text -------------------------------------------------

    def dump(self) -> str:
        tnames = self.tenant_names()
        nodes = self.nodes_by_join()
        out = [HEADER, "[options]"]
        for f in dataclasses.fields(self.options):
            v = getattr(self.options, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        out.append("[tenants]")
        out += [f"{name} id={tid}" for name, tid in sorted(self.tenants.items(), key=lambda kv: kv[1])]
        out.append("[nodes]")
        out += [f"{n.name} {n.cidr}" for n in nodes]
        out.append("[pods]")
        names = {n.node_id: n.name for n in nodes}
        for p in sorted(self.pods.values(), key=lambda p: (p.name,)):
            out.append(f"{p.name} {names[p.node]} tenant={tnames.get(p.tenant, p.tenant)} ip={p.ip}")
        out.append("[services]")
        for s in sorted(self.services.values(), key=lambda s: s.name):
            members = ", ".join(str(m) for m in s.members)
            out.append(f"{s.name} {s.endpoint} tenant={tnames.get(s.endpoint.tenant, s.endpoint.tenant)} -> {members}")
        out.append("[ingress]")
        out += [f"{r.external} -> {r.service}" for r in sorted(self.ingress, key=lambda r: r.external)]
        out.append("[policies]")
        for r in self.policies:
            text = str(r)
            if r.tenant is not None:
                text = text.replace(f"tenant={r.tenant}", f"tenant={tnames.get(r.tenant, r.tenant)}")
            out.append(text)
        out.append("[ratelimits]")
        for t in sorted(self.ratelimits):
            rl = self.ratelimits[t]
            out.append(f"{tnames.get(t, t)} rate={rl.rate:g} burst={rl.burst}")
        out.append("[gateways]")
        if self.egress_pod:
            out.append(f"egress {self.egress_pod}")
        return "\n".join(out) + "\n"


# -- parsing ---------------------------------------------------------------

_SECTIONS = ("options", "tenants", "nodes", "pods", "services", "ingress", "policies", "ratelimits", "gateways")


def _kv(words: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for w in words:
        k, sep, v = w.partition("=")
        if not sep:
            raise ScenarioError(f"line {lineno}: expected key=value, got {w!r}")
        out[k] = v
    return out


def parse_scenario(text: str) -> ClusterState:
    """Parse scenario text into a fully materialized :class:`ClusterState`."""
    lines = text.splitlines()
    body = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(lines)]
    body = [(i, ln) for i, ln in body if ln]
    if not body or body[0][1] != HEADER:
        raise ScenarioError(f"scenario must start with the header line {HEADER!r}")
    sections: dict[str, list[tuple[int, str]]] = collections.defaultdict(list)
    current = None
    for lineno, ln in body[1:]:
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1].strip()
            if current not in _SECTIONS:
                raise ScenarioError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ScenarioError(f"line {lineno}: content before any section")
        sections[current].append((lineno, ln))

    st = ClusterState()
    st.source_sha256 = hashlib.sha256(text.encode()).hexdigest()
    for lineno, ln in sections["options"]:
        key, sep, val = ln.partition("=")
        if not sep:
            raise ScenarioError(f"line {lineno}: option needs key = value")
        try:
            st.options.set(key.strip(), val.strip())
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    for opt in ("buffer_size", "control_buffer_size", "sq_depth"):
        v = getattr(st.options, opt)
        if v <= 0 or v & (v - 1):
            raise ScenarioError(f"option {opt} must be a power of two, got {v}")
    if st.options.control_buffer_size < 128:
        raise ScenarioError("control_buffer_size must hold at least two control records")

    for lineno, ln in sections["tenants"]:
        words = ln.split()
        kw = _kv(words[1:], lineno)
        if words[0] in st.tenants:
            raise ScenarioError(f"line {lineno}: duplicate tenant {words[0]!r}")
        tid = int(kw.get("id", len(st.tenants) + 1))
        if tid in st.tenants.values() or tid == 0:
            raise ScenarioError(f"line {lineno}: tenant id {tid} invalid or already used")
        st.tenants[words[0]] = tid
    if not st.tenants:
        st.tenants["default"] = 1

    seen_cidrs: list[IPv4Network] = []
    for seq, (lineno, ln) in enumerate(sections["nodes"], start=1):
        words = ln.split()
        name = words[0]
        if any(n.name == name for n in st.nodes.values()):
            raise ScenarioError(f"line {lineno}: duplicate node {name!r}")
        try:
            cidr = IPv4Network(words[1]) if len(words) > 1 else IPv4Network(f"10.244.{seq}.0/24")
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        for other in seen_cidrs + [st.options.service_cidr]:
            if cidr.overlaps(other):
                raise ScenarioError(f"line {lineno}: CIDR {cidr} of node {name!r} overlaps {other}")
        seen_cidrs.append(cidr)
        st.nodes[seq] = NodeRecord(seq, name, cidr, seq)
        st.allocators[seq] = PodIpAllocator(cidr, st.options.shared_tenant_cidr)

    for lineno, ln in sections["pods"]:
        words = ln.split()
        if len(words) < 2:
            raise ScenarioError(f"line {lineno}: pod needs a name and a node")
        name, node_name = words[0], words[1]
        kw = _kv(words[2:], lineno)
        if name in st.pods:
            raise ScenarioError(f"line {lineno}: duplicate pod {name!r}")
        node = st.node_by_name(node_name)
        tenant = st.tenant_id(kw["tenant"]) if "tenant" in kw else st.default_tenant()
        try:
            if "ip" in kw:
                ip = st.allocators[node.node_id].reserve(tenant, kw["ip"])
            else:
                ip = st.allocate_pod_ip(node.node_id, tenant)
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        st.pods[name] = PodRecord(name, tenant, node.node_id, ip)

    for lineno, ln in sections["services"]:
        left, sep, right = ln.partition("->")
        if not sep:
            raise ScenarioError(f"line {lineno}: service needs '->' and a member list")
        words = left.split()
        name = words[0]
        if name in st.services:
            raise ScenarioError(f"line {lineno}: duplicate service {name!r}")
        kw = _kv(words[2:], lineno)
        tenant = st.tenant_id(kw["tenant"]) if "tenant" in kw else st.default_tenant()
        svc_ep = parse_endpoint(words[1], tenant)
        if svc_ep.ip not in st.options.service_cidr:
            raise ScenarioError(f"line {lineno}: service IP {svc_ep.ip} outside {st.options.service_cidr}")
        members = []
        for m in (s.strip() for s in right.split(",")):
            if not m:
                continue
            host, _, port = m.rpartition(":")
            if host in st.pods:
                pod = st.pods[host]
                if pod.tenant != tenant:
                    raise ScenarioError(f"line {lineno}: member {host!r} belongs to another tenant")
                members.append(pod.endpoint(int(port)))
            else:
                members.append(parse_endpoint(m, tenant))
        st.services[name] = ServiceRecord(name, svc_ep, tuple(members))

    for lineno, ln in sections["ingress"]:
        left, sep, right = ln.partition("->")
        if not sep:
            raise ScenarioError(f"line {lineno}: ingress rule needs '->'")
        right = right.strip()
        if right in st.services:
            svc = st.services[right].endpoint
        else:
            svc = parse_endpoint(right, st.default_tenant())
            known = {s.endpoint for s in st.services.values()}
            if svc not in known:
                raise ScenarioError(f"line {lineno}: ingress target {right} is not a declared service")
        ext = parse_endpoint(left, svc.tenant)
        if any(r.external == ext for r in st.ingress):
            raise ScenarioError(f"line {lineno}: duplicate external endpoint {ext}")
        st.ingress.append(IngressRule(ext, svc))

    for lineno, ln in sections["policies"]:
        try:
            st.policies.append(parse_rule(ln, st.tenants))
        except (ValueError, KeyError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None

    for lineno, ln in sections["ratelimits"]:
        words = ln.split()
        kw = _kv(words[1:], lineno)
        tenant = st.tenant_id(words[0])
        st.ratelimits[tenant] = RateLimit(tenant, float(kw["rate"]), int(kw.get("burst", kw["rate"])))

    for lineno, ln in sections["gateways"]:
        words = ln.split()
        if len(words) != 2 or words[0] != "egress":
            raise ScenarioError(f"line {lineno}: expected 'egress <pod>'")
        if words[1] not in st.pods:
            raise ScenarioError(f"line {lineno}: unknown pod {words[1]!r}")
        st.egress_pod = words[1]
    return st


def scenario_path(name: Union[str, os.PathLike]) -> str:
    """An existing path as-is; otherwise a bundled scenario by stem (``ingress-demo``)."""
    if os.path.exists(name):
        return os.fspath(name)
    stem = os.path.basename(os.fspath(name))
    cand = os.path.join(BUNDLED_DIR, stem if stem.endswith(".tsor") else stem + ".tsor")
    if os.path.exists(cand):
        return cand
    raise ScenarioError(f"no scenario file {os.fspath(name)!r} and no bundled scenario of that name")


def load_scenario(source: Union[str, os.PathLike]) -> ClusterState:
    """Load from a path, or from scenario text if ``source`` starts with the header."""
    if isinstance(source, str) and source.lstrip().startswith(HEADER):
        return parse_scenario(source)
    with open(scenario_path(source), encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# -- change notification ------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Snapshot:
    state: ClusterState


@dataclasses.dataclass(frozen=True)
class NodeJoined:
    node: NodeRecord


@dataclasses.dataclass(frozen=True)
class NodeLeft:
    node: NodeRecord


@dataclasses.dataclass(frozen=True)
class PodAdded:
    pod: PodRecord


@dataclasses.dataclass(frozen=True)
class PodRemoved:
    pod: PodRecord


@dataclasses.dataclass(frozen=True)
class ServiceChanged:
    service: ServiceRecord
    removed: bool = False


@dataclasses.dataclass(frozen=True)
class PolicyChanged:
    rules: tuple[PolicyRule, ...]


@dataclasses.dataclass(frozen=True)
class EgressChanged:
    node: Optional[NodeRecord]


class Watch:
    """Bounded, lossless event stream for one subscriber."""

    def __init__(self, node: int, bound: int = 1 << 20) -> None:
        self.node = node
        self.bound = bound
        self._q: collections.deque = collections.deque()
        self.notify: Callable[[], None] = lambda: None

    def _put(self, ev) -> None:
        if len(self._q) >= self.bound:
            raise OverflowError(f"watch stream for node {self.node} exceeded {self.bound} events")
        self._q.append(ev)
        self.notify()

    def poll(self) -> list:
        out = []
        try:
            while True:
                out.append(self._q.popleft())
        except IndexError:
            return out

    def pending(self) -> bool:
        return bool(self._q)


class ControlPlane:
    """Single owner of cluster state; publishes changes to subscribers."""

    def __init__(self, state: Optional[ClusterState] = None) -> None:
        self.state = state if state is not None else ClusterState()
        self._watches: dict[int, Watch] = {}
        self._lock = threading.RLock()
        self.log: list = []

    def watch(self, node: int) -> Watch:
        with self._lock:
            if node not in self.state.nodes:
                raise ScenarioError(f"node {node} is not registered")
            w = Watch(node)
            w._put(Snapshot(self.snapshot()))
            self._watches[node] = w
            return w

    def unwatch(self, node: int) -> None:
        with self._lock:
            self._watches.pop(node, None)

    def snapshot(self) -> ClusterState:
        with self._lock:
            return copy.deepcopy(self.state)

    def _publish(self, ev) -> None:
        self.log.append(ev)
        for w in list(self._watches.values()):
            w._put(ev)

    def add_node(self, name: str, cidr: Optional[str] = None) -> NodeRecord:
        with self._lock:
            st = self.state
            if any(n.name == name for n in st.nodes.values()):
                raise ScenarioError(f"duplicate node {name!r}")
            node_id = max(st.nodes, default=0) + 1
            join_seq = max((n.join_seq for n in st.nodes.values()), default=0) + 1
            net = IPv4Network(cidr) if cidr else IPv4Network(f"10.244.{node_id}.0/24")
            for n in st.nodes.values():
                if net.overlaps(n.cidr):
                    raise ScenarioError(f"CIDR {net} overlaps node {n.name}")
            rec = NodeRecord(node_id, name, net, join_seq)
            st.nodes[node_id] = rec
            st.allocators[node_id] = PodIpAllocator(net, st.options.shared_tenant_cidr)
            self._publish(NodeJoined(rec))
            return rec

    def remove_node(self, name: str) -> NodeRecord:
        with self._lock:
            rec = self.state.node_by_name(name)
            for pod in list(self.state.pods_on(rec.node_id)):
                self.remove_pod(pod.name)
            del self.state.nodes[rec.node_id]
            del self.state.allocators[rec.node_id]
            self._watches.pop(rec.node_id, None)
            self._publish(NodeLeft(rec))
            return rec

    def add_pod(self, name: str, node: str, tenant: Optional[str] = None, ip: Optional[str] = None) -> PodRecord:
        with self._lock:
            st = self.state
            if name in st.pods:
                raise ScenarioError(f"duplicate pod {name!r}")
            n = st.node_by_name(node)
            tid = st.tenant_id(tenant) if tenant is not None else st.default_tenant()
            addr = st.allocators[n.node_id].reserve(tid, ip) if ip else st.allocate_pod_ip(n.node_id, tid)
            rec = PodRecord(name, tid, n.node_id, addr)
            st.pods[name] = rec
            self._publish(PodAdded(rec))
            return rec

    def remove_pod(self, name: str) -> PodRecord:
        with self._lock:
            rec = self.state.pods.pop(name)
            self.state.allocators[rec.node].release(rec.tenant, rec.ip)
            self._publish(PodRemoved(rec))
            return rec

    def set_service(self, name: str, endpoint: Endpoint, members) -> ServiceRecord:
        with self._lock:
            rec = ServiceRecord(name, endpoint, tuple(members))
            self.state.services[name] = rec
            self._publish(ServiceChanged(rec))
            return rec

    def remove_service(self, name: str) -> None:
        with self._lock:
            rec = self.state.services.pop(name)
            self._publish(ServiceChanged(rec, removed=True))

    def set_policies(self, rules) -> None:
        with self._lock:
            self.state.policies = list(rules)
            self._publish(PolicyChanged(tuple(self.state.policies)))

    def set_egress(self, pod: Optional[str]) -> None:
        """Make ``pod`` the cluster's egress gateway (None removes it)."""
        with self._lock:
            if pod is not None and pod not in self.state.pods:
                raise ScenarioError(f"unknown pod {pod!r}")
            self.state.egress_pod = pod
            node = self.state.nodes[self.state.pods[pod].node] if pod else None
            self._publish(EgressChanged(node))
