"""Pod IP allocation and the three routing tables.

* ``RouteTable``: subnet CIDR -> where to send a connection request
  (a node's fabric connection, the service handler, or the egress gateway).
* ``ClusterEPTable``: service endpoint -> ordered pod endpoints, selected
  round robin.
* ``IngressGatewayTable``: external endpoint -> service endpoint.

All three dump to, and load from, a line-oriented text form::

    10.244.2.0/24 -> conn(Node2)
    10.5.6.7:546 -> [10.244.2.5:546]
    202.2.3.4:8080 -> 10.5.6.7:546
"""

from __future__ import annotations

import dataclasses
import ipaddress
import re
from ipaddress import IPv4Address, IPv4Network
from typing import Iterable, Mapping, Optional, Union

from .endpoint import Endpoint, parse_endpoint
from .errors import NetUnreachable, NoBackends

__all__ = [
    "Endpoint", "ConnTarget", "ServiceHandler", "EgressTarget", "RouteTarget",
    "RouteTable", "ClusterEPTable", "IngressGatewayTable", "RouteTables",
    "PodIpAllocator", "resolve", "service_select", "ingress_lookup",
    "DEFAULT_SERVICE_CIDR", "DEFAULT_ROUTE",
]

DEFAULT_SERVICE_CIDR = IPv4Network("10.5.0.0/16")
DEFAULT_ROUTE = IPv4Network("0.0.0.0/0")


@dataclasses.dataclass(frozen=True)
class ConnTarget:
    node: int
    name: str = ""

    def __str__(self) -> str:
        return f"conn({self.name or self.node})"


@dataclasses.dataclass(frozen=True)
class ServiceHandler:
    def __str__(self) -> str:
        return "service"


@dataclasses.dataclass(frozen=True)
class EgressTarget:
    node: Optional[int] = None
    name: str = ""

    def __str__(self) -> str:
        if self.node is None:
            return "egress"
        return f"egress({self.name or self.node})"


RouteTarget = Union[ConnTarget, ServiceHandler, EgressTarget]


def _fmt_ep(ep: Endpoint, tenants: Optional[Mapping[int, str]] = None) -> str:
    # tenant 1 is the default tenant and is left implicit
    if ep.tenant in (0, 1):
        return str(ep)
    name = tenants.get(ep.tenant, str(ep.tenant)) if tenants else str(ep.tenant)
    return f"{ep}@{name}"


def _parse_ep(text: str, tenants: Optional[Mapping[str, int]] = None) -> Endpoint:
    body, _, tname = text.strip().partition("@")
    tenant = 1
    if tname:
        tenant = tenants[tname] if tenants and tname in tenants else int(tname)
    return parse_endpoint(body, tenant)


class RouteTable:
    """Longest-prefix-match table; ``mutations`` counts every change."""

    def __init__(self) -> None:
        self._entries: dict[IPv4Network, RouteTarget] = {}
        self._ordered: list[tuple[IPv4Network, RouteTarget]] = []
        self.mutations = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, net) -> bool:
        return IPv4Network(net) in self._entries

    def set(self, net, target: RouteTarget) -> None:
        net = IPv4Network(net)
        if self._entries.get(net) == target:
            return
        self._entries[net] = target
        self._reindex()

    def remove(self, net) -> None:
        if self._entries.pop(IPv4Network(net), None) is not None:
            self._reindex()

    def _reindex(self) -> None:
        self.mutations += 1
        self._ordered = sorted(self._entries.items(), key=lambda kv: -kv[0].prefixlen)

    def lookup(self, ip) -> Optional[RouteTarget]:
        addr = int(IPv4Address(ip))
        for net, target in self._ordered:
            if addr & int(net.netmask) == int(net.network_address):
                return target
        return None

    def entries(self) -> list[tuple[IPv4Network, RouteTarget]]:
        return sorted(self._entries.items(), key=lambda kv: (int(kv[0].network_address), kv[0].prefixlen))

    def dump(self) -> str:
        return "".join(f"{net} -> {target}\n" for net, target in self.entries())


class ClusterEPTable:
    """Service endpoint -> member pods with a per-table round-robin cursor."""

    def __init__(self) -> None:
        self._members: dict[Endpoint, list[Endpoint]] = {}
        self._cursor: dict[Endpoint, int] = {}

    def __contains__(self, svc: Endpoint) -> bool:
        return svc in self._members

    def __len__(self) -> int:
        return len(self._members)

    def set(self, svc: Endpoint, members: Iterable[Endpoint]) -> None:
        self._members[svc] = list(members)
        self._cursor[svc] = self._cursor.get(svc, 0) % max(1, len(self._members[svc]))

    def remove(self, svc: Endpoint) -> None:
        self._members.pop(svc, None)
        self._cursor.pop(svc, None)

    def members(self, svc: Endpoint) -> list[Endpoint]:
        return list(self._members.get(svc, ()))

    def services(self) -> list[Endpoint]:
        return list(self._members)

    def has_ip(self, ip) -> bool:
        ip = IPv4Address(ip)
        return any(s.ip == ip for s in self._members)

    def tenants_at(self, ip) -> set[int]:
        ip = IPv4Address(ip)
        return {s.tenant for s in self._members if s.ip == ip}

    def select(self, svc: Endpoint) -> Endpoint:
        try:
            members = self._members[svc]
        except KeyError:
            raise NetUnreachable(f"unknown service {svc}") from None
        if not members:
            raise NoBackends(f"service {svc} has no backends")
        i = self._cursor[svc] % len(members)
        self._cursor[svc] = (i + 1) % len(members)
        return members[i]

    def dump(self, tenants: Optional[Mapping[int, str]] = None) -> str:
        lines = []
        for svc in sorted(self._members):
            members = ", ".join(_fmt_ep(m, tenants) for m in self._members[svc])
            lines.append(f"{_fmt_ep(svc, tenants)} -> [{members}]\n")
        return "".join(lines)


class IngressGatewayTable:
    def __init__(self) -> None:
        self._map: dict[Endpoint, Endpoint] = {}

    def __len__(self) -> int:
        return len(self._map)

    def set(self, ext: Endpoint, svc: Endpoint) -> None:
        if ext in self._map and self._map[ext] != svc:
            raise ValueError(f"external endpoint {ext} already mapped")
        self._map[ext] = svc

    def lookup(self, ext: Endpoint) -> Optional[Endpoint]:
        return self._map.get(ext)

    def items(self) -> list[tuple[Endpoint, Endpoint]]:
        return sorted(self._map.items())

    def dump(self, tenants: Optional[Mapping[int, str]] = None) -> str:
        return "".join(f"{_fmt_ep(e, tenants)} -> {_fmt_ep(s, tenants)}\n" for e, s in self.items())


@dataclasses.dataclass
class RouteTables:
    routes: RouteTable = dataclasses.field(default_factory=RouteTable)
    services: ClusterEPTable = dataclasses.field(default_factory=ClusterEPTable)
    ingress: IngressGatewayTable = dataclasses.field(default_factory=IngressGatewayTable)

    def dump(self, what: str, tenants: Optional[Mapping[int, str]] = None) -> str:
        if what == "routes":
            return self.routes.dump()
        if what == "services":
            return self.services.dump(tenants)
        if what == "ingress":
            return self.ingress.dump(tenants)
        raise KeyError(what)

    @classmethod
    def load(cls, routes: str = "", services: str = "", ingress: str = "",
             node_ids: Optional[Mapping[str, int]] = None,
             tenants: Optional[Mapping[str, int]] = None) -> "RouteTables":
        """Rebuild tables from their dumped text form."""
        t = cls()
        for line in _lines(routes):
            net, target = (s.strip() for s in line.split("->"))
            t.routes.set(net, _parse_target(target, node_ids or {}))
        for line in _lines(services):
            svc, members = (s.strip() for s in line.split("->"))
            inner = members.strip()[1:-1].strip()
            t.services.set(_parse_ep(svc, tenants),
                           [_parse_ep(m, tenants) for m in inner.split(",") if m.strip()])
        for line in _lines(ingress):
            ext, svc = (s.strip() for s in line.split("->"))
            t.ingress.set(_parse_ep(ext, tenants), _parse_ep(svc, tenants))
        return t


def _lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]


_TARGET_RE = re.compile(r"^(conn|egress)\((.+)\)$")


def _parse_target(text: str, node_ids: Mapping[str, int]) -> RouteTarget:
    if text == "service":
        return ServiceHandler()
    if text == "egress":
        return EgressTarget()
    m = _TARGET_RE.match(text)
    if not m:
        raise ValueError(f"bad route target {text!r}")
    name = m.group(2)
    node = node_ids[name] if name in node_ids else int(name)
    return ConnTarget(node, name) if m.group(1) == "conn" else EgressTarget(node, name)


def resolve(tables: RouteTables, dst: Endpoint) -> RouteTarget:
    target = tables.routes.lookup(dst.ip)
    # the default route is always installed; this guards a bare table
    return target if target is not None else EgressTarget()


def service_select(tables: RouteTables, svc: Endpoint) -> Endpoint:
    return tables.services.select(svc)


def ingress_lookup(tables: RouteTables, ext: Endpoint) -> Optional[Endpoint]:
    return tables.ingress.lookup(ext)


class PodIpAllocator:
    """Lowest-free host allocation inside one node's static CIDR.

    With ``shared_tenant_cidr`` each tenant draws from its own pool, so two
    tenants may hold the same address; otherwise addresses are unique on
    the node regardless of tenant.
    """

    def __init__(self, cidr, shared_tenant_cidr: bool = False) -> None:
        self.cidr = IPv4Network(cidr)
        self.shared_tenant_cidr = shared_tenant_cidr
        self._used: dict[int, set[int]] = {}
        self._first = int(self.cidr.network_address) + 1
        self._last = int(self.cidr.broadcast_address) - 1
        if self.cidr.prefixlen >= 31:
            self._first, self._last = int(self.cidr.network_address), int(self.cidr.broadcast_address)

    def _pool(self, tenant: int) -> set[int]:
        return self._used.setdefault(tenant if self.shared_tenant_cidr else 0, set())

    def allocate(self, tenant: int) -> IPv4Address:
        used = self._pool(tenant)
        for a in range(self._first, self._last + 1):
            if a not in used:
                used.add(a)
                return IPv4Address(a)
        raise ValueError(f"CIDR {self.cidr} exhausted")

    def reserve(self, tenant: int, ip) -> IPv4Address:
        a = int(IPv4Address(ip))
        if not self._first <= a <= self._last:
            raise ValueError(f"{IPv4Address(a)} is not a host address of {self.cidr}")
        used = self._pool(tenant)
        if a in used:
            raise ValueError(f"{IPv4Address(a)} already allocated")
        used.add(a)
        return IPv4Address(a)

    def release(self, tenant: int, ip) -> None:
        self._pool(tenant).discard(int(IPv4Address(ip)))

    def allocated(self, tenant: int) -> list[IPv4Address]:
        return [IPv4Address(a) for a in sorted(self._pool(tenant))]


def parse_network(text: str) -> IPv4Network:
    return ipaddress.IPv4Network(text.strip(), strict=True)
