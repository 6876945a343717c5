from __future__ import annotations

import dataclasses
import ipaddress
import struct
from ipaddress import IPv4Address

__all__ = ["Endpoint", "EP_STRUCT", "NULL_EP", "parse_endpoint"]

# tenant u32, IPv4 u32, port u16
EP_STRUCT = struct.Struct("<IIH")


@dataclasses.dataclass(frozen=True, order=True)
class Endpoint:
    """(tenant, IPv4, port). The tenant takes part in equality and lookups."""

    tenant: int
    ip: IPv4Address
    port: int

    def __post_init__(self) -> None:
        if not isinstance(self.ip, IPv4Address):
            object.__setattr__(self, "ip", IPv4Address(self.ip))
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")
        if not 0 <= self.tenant <= 0xFFFFFFFF:
            raise ValueError(f"tenant out of range: {self.tenant}")

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"

    def with_port(self, port: int) -> "Endpoint":
        return dataclasses.replace(self, port=port)

    def with_tenant(self, tenant: int) -> "Endpoint":
        return dataclasses.replace(self, tenant=tenant)

    def pack(self) -> bytes:
        return EP_STRUCT.pack(self.tenant, int(self.ip), self.port)

    @classmethod
    def unpack(cls, tenant: int, ip: int, port: int) -> "Endpoint":
        return cls(tenant, IPv4Address(ip), port)


NULL_EP = Endpoint(0, IPv4Address(0), 0)


def parse_endpoint(text: str, tenant: int = 0) -> Endpoint:
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        raise ValueError(f"endpoint needs ip:port, got {text!r}")
    return Endpoint(tenant, ipaddress.IPv4Address(host), int(port))
