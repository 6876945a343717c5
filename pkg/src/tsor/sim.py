"""Cluster harness: one control plane, one fabric and a service per node.

Two drivers share everything below the service loop:

* inline (default): ``step()`` runs registered apps, then every service
  once in join order, then advances a simulated clock by ``hop_us``.
  Nothing depends on thread scheduling, so runs are reproducible.
* threaded: each service runs ``serve_forever`` on its own thread and
  clients block on condition variables.
"""

from __future__ import annotations

import os
import time
from typing import Callable, Optional, Union

from .client import InlineWaiter, ThreadWaiter, TsorClient
from .controlplane import ClusterState, ControlPlane, load_scenario
from .fabric import Fabric
from .service import NodeService

__all__ = ["Cluster", "SimClock", "InvariantViolation"]

App = Callable[[], bool]


class InvariantViolation(AssertionError):
    pass


class SimClock:
    """Simulated seconds. Callable, so it can stand in for ``time.monotonic``."""

    def __init__(self, t: float = 0.0) -> None:
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> None:
        if dt > 0:
            self.t += dt


class Cluster:
    def __init__(self, scenario: Union[ClusterState, str, "os.PathLike[str]"], *, threaded: bool = False,
                 autostart: bool = True) -> None:
        self.state = scenario if isinstance(scenario, ClusterState) else load_scenario(scenario)
        self.cp = ControlPlane(self.state)
        self.fabric = Fabric()
        self.threaded = threaded
        self.clock: Callable[[], float] = time.monotonic if threaded else SimClock()
        self.hop = self.state.options.hop_us * 1e-6
        self.services: dict[str, NodeService] = {}
        self.apps: list[App] = []
        self.clients: list[TsorClient] = []
        self.steps = 0
        self._in_step = False
        if autostart:
            self.start()

    # -- topology -------------------------------------------------------

    def start(self) -> None:
        for rec in self.state.nodes_by_join():
            if rec.name not in self.services:
                self._start(rec)
        self.settle()

    def _start(self, rec) -> NodeService:
        svc = NodeService(rec, self.fabric, self.cp, clock=self.clock)
        self.services[rec.name] = svc
        svc.start(threaded=self.threaded)
        return svc

    def add_node(self, name: str, cidr: Optional[str] = None) -> NodeService:
        rec = self.cp.add_node(name, cidr)
        self.settle()
        svc = self._start(rec)
        self.settle()
        return svc

    def remove_node(self, name: str) -> None:
        svc = self.services.pop(name)
        svc.shutdown()
        self.cp.remove_node(name)
        self.settle()

    def service(self, node: Union[str, int]) -> NodeService:
        if isinstance(node, int):
            node = self.state.nodes[node].name
        return self.services[node]

    def service_of(self, pod: str) -> NodeService:
        return self.service(self.state.pods[pod].node)

    def client(self, pod: str, buffer_size: Optional[int] = None) -> TsorClient:
        rec = self.state.pods[pod]
        waiter = ThreadWaiter() if self.threaded else InlineWaiter(self)
        c = TsorClient(self.service_of(pod), rec.tenant, rec.ip, waiter=waiter,
                       buffer_size=buffer_size, name=pod)
        self.clients.append(c)
        return c

    def add_app(self, app: App) -> None:
        self.apps.append(app)

    # -- inline driver ----------------------------------------------------

    def step(self) -> bool:
        """One round of every app and service. False when nothing happened."""
        if self.threaded:
            raise RuntimeError("step() drives inline clusters only")
        if self._in_step:
            raise RuntimeError("re-entrant step(): apps must use non-blocking calls")
        self._in_step = True
        try:
            worked = False
            for app in list(self.apps):
                if app():
                    worked = True
            busy = []
            for svc in self.services.values():
                did = svc.run_once()
                busy.append(did)
                worked |= did
            self.clock.advance(self.hop)
            self.steps += 1
            if worked:
                for svc, did in zip(self.services.values(), busy):
                    if not did:
                        svc.idle(1)
                return True
            timers = [t for t in (s.next_timer() for s in self.services.values()) if t is not None]
            if timers:
                self.clock.advance(min(timers))
                return True
            for svc in self.services.values():
                svc.idle()
            return False
        finally:
            self._in_step = False

    def run(self, until: Optional[Callable[[], bool]] = None, max_steps: int = 10_000_000) -> int:
        """Step until ``until()`` holds (or, without it, until idle)."""
        n = 0
        while n < max_steps:
            if until is not None and until():
                return n
            worked = self.step()
            n += 1
            if until is None and not worked:
                return n
        raise InvariantViolation(f"cluster did not settle within {max_steps} steps")

    def settle(self, timeout: float = 10.0) -> None:
        if self.threaded:
            self.quiesce(timeout)
        else:
            self.run()

    # -- threaded driver -------------------------------------------------

    def quiesce(self, timeout: float = 10.0) -> bool:
        """Wait until no service has queued work (threaded mode)."""
        if not self.threaded:
            self.run()
            return True
        deadline = time.monotonic() + timeout
        calm = 0
        while time.monotonic() < deadline:
            busy = any(s._has_pending() or s.bitmap.any() or s._pump_ready or s.fabric.has_completions(s.node_id)
                       for s in self.services.values())
            calm = 0 if busy else calm + 1
            if calm >= 5:
                return True
            time.sleep(0.002)
        return False

    def stop(self) -> None:
        for svc in self.services.values():
            svc.stop()

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- reporting -------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = []
        if self.fabric.overwrites:
            problems.append(f"fabric reported {self.fabric.overwrites} ring-buffer overwrites")
        for name, svc in self.services.items():
            if svc.crashed is not None:
                problems.append(f"{name}: service loop crashed: {svc.crashed!r}")
            if svc.counters["protocol_errors"]:
                problems.append(f"{name}: {svc.counters['protocol_errors']} protocol errors")
            if svc.counters["credit_violations"]:
                problems.append(f"{name}: {svc.counters['credit_violations']} writes exceeded remote credit")
        flows: dict[tuple, dict] = {}
        for svc in self.services.values():
            for f in svc.flow_stats():
                flows.setdefault(tuple(f["flow"]), {})[f["initiator"]] = f
        for key, ends in flows.items():
            if len(ends) == 2 and (ends[True]["bytes_tx"] != ends[False]["bytes_rx"]
                                   or ends[False]["bytes_tx"] != ends[True]["bytes_rx"]):
                problems.append(f"flow {key}: byte counts differ across ends: {ends}")
        return problems

    def totals(self) -> dict:
        out: dict = {}
        for svc in self.services.values():
            for k, v in svc.stats().items():
                if k == "fabric_connections":
                    continue
                if k in ("max_idle_run", "credit_min_amount"):
                    if k == "credit_min_amount" and v == 0:
                        continue
                    out[k] = v if k not in out else (max if k == "max_idle_run" else min)(out[k], v)
                else:
                    out[k] = out.get(k, 0) + v
        out["fabric_connections"] = self.fabric.connection_count()
        out["overwrites"] = self.fabric.overwrites
        for c in self.clients:
            for k, v in c.counters.items():
                key = f"client_{k}"
                out[key] = out.get(key, 0) + v
        return dict(sorted(out.items()))
