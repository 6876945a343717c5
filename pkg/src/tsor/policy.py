"""Connection admission rules and per-tenant token buckets."""

from __future__ import annotations

import dataclasses
import math
from ipaddress import IPv4Network
from typing import Iterable, Optional

from .endpoint import Endpoint

__all__ = ["PolicyRule", "Verdict", "ALLOW", "enforce", "TokenBucket", "parse_rule"]

ANY = IPv4Network("0.0.0.0/0")


@dataclasses.dataclass(frozen=True)
class PolicyRule:
    action: str  # "allow" | "deny"
    tenant: Optional[int] = None
    src: IPv4Network = ANY
    dst: IPv4Network = ANY
    port: Optional[int] = None

    def __post_init__(self) -> None:
        if self.action not in ("allow", "deny"):
            raise ValueError(f"unknown policy action {self.action!r}")

    def matches(self, src: Endpoint, dst: Endpoint) -> bool:
        if self.tenant is not None and src.tenant != self.tenant:
            return False
        if self.port is not None and dst.port != self.port:
            return False
        return src.ip in self.src and dst.ip in self.dst

    def __str__(self) -> str:
        parts = [self.action]
        if self.tenant is not None:
            parts.append(f"tenant={self.tenant}")
        if self.src != ANY:
            parts.append(f"src={self.src}")
        if self.dst != ANY:
            parts.append(f"dst={self.dst}")
        if self.port is not None:
            parts.append(f"port={self.port}")
        return " ".join(parts)


def parse_rule(text: str, tenants: Optional[dict[str, int]] = None) -> PolicyRule:
    """Parse ``deny [tenant=T] [src=CIDR] [dst=CIDR] [port=N]``."""
    words = text.split()
    if not words:
        raise ValueError("empty policy rule")
    kw: dict = {}
    for w in words[1:]:
        key, sep, val = w.partition("=")
        if not sep:
            raise ValueError(f"policy field must be key=value, got {w!r}")
        if key == "tenant":
            kw["tenant"] = tenants[val] if tenants and val in tenants else int(val)
        elif key in ("src", "dst"):
            kw[key] = IPv4Network(val, strict=False)
        elif key == "port":
            kw["port"] = int(val)
        else:
            raise ValueError(f"unknown policy field {key!r}")
    return PolicyRule(words[0], **kw)


@dataclasses.dataclass(frozen=True)
class Verdict:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Verdict(True)


def enforce(rules: Iterable[PolicyRule], src: Endpoint, dst: Endpoint,
            dst_tenants: Optional[set[int]] = None) -> Verdict:
    """Tenant isolation first, then the first matching rule, then allow.

    ``dst_tenants`` are the tenants known to own ``dst.ip`` (empty or None
    when the address belongs to no known pod or service).
    """
    if dst_tenants and src.tenant not in dst_tenants:
        return Verdict(False, "cross-tenant")
    for i, rule in enumerate(rules):
        if rule.matches(src, dst):
            return ALLOW if rule.action == "allow" else Verdict(False, f"rule {i}: {rule}")
    return ALLOW


class TokenBucket:
    """Classic token bucket; starts full. ``now`` is in seconds."""

    def __init__(self, rate: float, burst: int, now: float = 0.0) -> None:
        if rate <= 0 or burst <= 0:
            raise ValueError("rate and burst must be positive")
        self.rate = float(rate)
        self.burst = int(burst)
        self.tokens = float(burst)
        self.last = now
        self.granted = 0

    def _refill(self, now: float) -> None:
        if now > self.last:
            self.tokens = min(float(self.burst), self.tokens + (now - self.last) * self.rate)
            self.last = now

    def available(self, now: float) -> int:
        self._refill(now)
        # tolerate float residue like 999.9999999 from tick arithmetic
        return int(math.floor(self.tokens + 1e-6))

    def take(self, want: int, now: float) -> int:
        avail = self.available(now)
        grant = max(0, min(want, avail))
        self.tokens = max(0.0, self.tokens - grant)
        self.granted += grant
        return grant

    def time_until(self, n: int, now: float) -> float:
        """Seconds until at least ``min(n, burst)`` tokens are available."""
        self._refill(now)
        need = min(n, self.burst) - self.tokens
        return 0.0 if need <= 0 else need / self.rate
