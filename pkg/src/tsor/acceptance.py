"""Acceptance criteria as runnable checks (``tsorsim check N``).

Each check builds its own cluster, runs a workload and returns whether the
measured values meet the bound, along with the measurements themselves.
"""

from __future__ import annotations

import dataclasses
import ipaddress
import json
import random
import time
from typing import Callable, Iterable

from .controlplane import scenario_path
from .endpoint import Endpoint
from .errors import ErrorCode
from .policy import TokenBucket
from .routing import ConnTarget, ServiceHandler, resolve
from .shmq import Doorbell, ReadinessBitmap
from .sim import Cluster
from .workloads import idle_for, run_workload

__all__ = ["CRITERIA", "Criterion", "Outcome", "select", "run_criterion", "doorbell_interleavings",
           "policy_oracle", "policy_cases", "report_without_wall_clock"]


@dataclasses.dataclass(frozen=True)
class Criterion:
    number: int
    key: str
    name: str
    fn: Callable[[], tuple[bool, dict]]


@dataclasses.dataclass
class Outcome:
    criterion: Criterion
    ok: bool
    measured: dict
    elapsed: float

    def line(self) -> str:
        c = self.criterion
        shown = ", ".join(f"{k}={v}" for k, v in self.measured.items())
        return f"{'PASS' if self.ok else 'FAIL'} {c.number:>2} {c.key:<15} {shown} [{self.elapsed:.1f}s]"


def _clean(cl: Cluster) -> list[str]:
    cl.settle()
    return cl.check_invariants()


# -- 1 ---------------------------------------------------------------------

def multiplexing(sockets: int = 10_000, buffer_size: int = 8192) -> tuple[bool, dict]:
    with Cluster("two-node") as cl:
        res, _, _ = run_workload(cl, "echo", {"sockets": sockets, "buffer_size": buffer_size})
        bad = _clean(cl)
        t = cl.totals()
    m = {"sockets": sockets, "round_trips_ok": res["round_trips_ok"], "fabric_connections": t["fabric_connections"],
         "channels_opened": t["channels_opened"], "invariants_ok": not bad}
    return t["fabric_connections"] == 1 and res["round_trips_ok"] == sockets and not bad, m


# -- 2 ---------------------------------------------------------------------

def handshake(count: int = 1000, refused: int = 1000) -> tuple[bool, dict]:
    with Cluster("two-node") as cl:
        res, _, _ = run_workload(cl, "connsetup", {"count": count, "refused": refused})
        bad = _clean(cl)
        conns = cl.totals()["fabric_connections"]
    m = {k: res[k] for k in ("handshake_msgs_connect", "handshake_msgs_refused", "control_msgs_refused",
                             "refused_observed", "data_writes_before_accept_max")}
    m["fabric_connections"] = conns
    ok = (res["handshake_msgs_connect"] == 2 * count and res["handshake_msgs_refused"] == 2 * refused
          and res["control_msgs_refused"] == 2 * refused and res["refused_observed"] == refused
          and res["data_writes_before_accept_max"] == 0 and conns == 1 and not bad)
    return ok, m


# -- 3 ---------------------------------------------------------------------

def flow_control(total: int = 10 ** 7, seed: int = 3) -> tuple[bool, dict]:
    params = {"bytes": total, "chunk_min": 1, "chunk_max": 65536, "burst": 64,
              "read_prob": 0.05, "read_min": 1, "read_max": 4096}
    with Cluster("two-node") as cl:
        res, _, _ = run_workload(cl, "stream", params, seed)
        bad = _clean(cl)
        t = cl.totals()
    m = {"bytes": total, "overwrites": cl.fabric.overwrites, "credit_violations": t.get("credit_violations", 0),
         "credit_stalls": t.get("credit_stalls", 0), "checksum_ok": res["checksums_matched"] == 1}
    ok = (m["overwrites"] == 0 and m["credit_violations"] == 0 and m["credit_stalls"] > 0
          and m["checksum_ok"] and not bad)
    return ok, m


# -- 4 ---------------------------------------------------------------------

def credit_bound(total: int = 16 << 20, buffer_size: int = 65536) -> tuple[bool, dict]:
    with Cluster("two-node") as cl:
        res, _, _ = run_workload(cl, "stream", {"bytes": total, "chunk": 4096, "buffer_size": buffer_size,
                                                "read_min": 1, "read_max": 20000})
        bad = _clean(cl)
        t = cl.totals()
    half = buffer_size // 2
    bound = -(-total // half) + 1
    m = {"credit_msgs": t["credit_msgs"], "bound": bound, "min_credit_bytes": t["credit_min_amount"],
         "half_buffer": half, "checksum_ok": res["checksums_matched"] == 1}
    ok = t["credit_msgs"] <= bound and t["credit_min_amount"] > half and m["checksum_ok"] and not bad
    return ok, m


# -- 5 ---------------------------------------------------------------------

def coalescing(total: int = 1 << 20, chunk: int = 256) -> tuple[bool, dict]:
    m: dict = {}
    ok = True
    # gap=0 keeps the writer ahead of the pump; gap=2 lets the buffer drain after each burst
    for gap in (0, 2):
        with Cluster("two-node") as cl:
            res, _, _ = run_workload(cl, "stream", {"bytes": total, "chunk": chunk, "burst": 16, "gap": gap})
            bad = _clean(cl)
            t = cl.totals()
        req, trans = t["sq_writereq"], t["client_write_transitions"]
        m[f"gap{gap}"] = f"{res['chunks']}chunks/{req}req/{trans}transitions"
        ok &= req == trans and res["chunks"] >= 10 * req and res["chunks"] == total // chunk and not bad
    return ok, m


# -- 6 ---------------------------------------------------------------------

def doorbell_interleavings(trials: int = 100_000, seed: int = 6, check_first: bool = False) -> dict:
    """Random schedules of producers (publish, ring) against one consumer.

    The consumer runs prepare_sleep, scan, block; ``check_first`` swaps the
    first two steps, which is the broken order and must lose wakeups.
    """
    rng = random.Random(seed)
    lost = woke = found = 0
    for _ in range(trials):
        bitmap, bell = ReadinessBitmap(), Doorbell()
        producers = rng.randint(1, 3)
        ops = {("p", i): ["publish", "ring"] for i in range(producers)}
        ops["c"] = ["scan", "prepare", "block"] if check_first else ["prepare", "scan", "block"]
        state = "running"
        while ops:
            actor = rng.choice(sorted(ops, key=str))
            op = ops[actor].pop(0)
            if not ops[actor]:
                del ops[actor]
            if actor == "c":
                if state != "running":
                    continue
                if op == "prepare":
                    bell.prepare_sleep()
                elif op == "scan":
                    if bitmap.any():
                        bell.cancel_sleep()
                        state = "found"
                        ops.pop("c", None)
                elif op == "block":
                    state = "woke" if bell.is_set() else "blocked"
            elif op == "publish":
                bitmap.set(actor[1] + 1)
            else:
                bell.ring()
        if state == "blocked" and not bell.is_set():
            lost += 1
        elif state == "found":
            found += 1
        else:
            woke += 1
    return {"trials": trials, "lost": lost, "found": found, "woke": woke}


def _idle_window(threaded: bool, idle_s: float) -> dict:
    with Cluster("two-node", threaded=threaded) as cl:
        run_workload(cl, "pingpong", {"rounds": 20})
        cl.settle()
        before = {n: s.stats() for n, s in cl.services.items()}
        idle_for(cl, idle_s)
        after = {n: s.stats() for n, s in cl.services.items()}
        bad = _clean(cl)
    d = {n: {k: after[n][k] - before[n][k] for k in ("sleeps", "wakes", "poll_iterations")} for n in after}
    return {"sleeps": min(a["sleeps"] for a in after.values()),
            # each sleep episode is preceded by at most one spin budget of polls
            "idle_polls_per_episode": max(v["poll_iterations"] / (v["wakes"] + 1) for v in d.values()),
            "max_idle_run": max(a["max_idle_run"] for a in after.values()),
            "ok": not bad}


def idle_economy(idle_s: float = 1.0, trials: int = 100_000) -> tuple[bool, dict]:
    budget = Cluster("two-node", autostart=False).state.options.spin_budget
    inline = _idle_window(False, idle_s)
    threaded = _idle_window(True, idle_s)
    il = doorbell_interleavings(trials)
    m = {"spin_budget": budget, "inline_sleeps": inline["sleeps"], "threaded_sleeps": threaded["sleeps"],
         "polls_per_episode_max": max(inline["idle_polls_per_episode"], threaded["idle_polls_per_episode"]),
         "max_idle_run": max(inline["max_idle_run"], threaded["max_idle_run"]),
         "interleavings": il["trials"], "lost_wakeups": il["lost"]}
    ok = (inline["sleeps"] >= 1 and threaded["sleeps"] >= 1 and m["polls_per_episode_max"] <= budget
          and m["max_idle_run"] <= budget and il["lost"] == 0 and inline["ok"] and threaded["ok"])
    return ok, m


# -- 7 ---------------------------------------------------------------------

def integrity(sockets: int = 100, total: int = 10 << 20, seed: int = 7) -> tuple[bool, dict]:
    params = {"sockets": sockets, "bytes": total, "spread": 1, "chunk_min": 1, "chunk_max": 65536,
              "read_min": 1, "read_max": 65536, "burst": 4}
    with Cluster("three-node") as cl:
        res, _, _ = run_workload(cl, "stream", params, seed)
        bad = _clean(cl)
        flows: dict = {}
        for svc in cl.services.values():
            for f in svc.flow_stats():
                flows.setdefault(tuple(f["flow"]), {})[f["initiator"]] = f
        t = cl.totals()
    paired = [e for e in flows.values() if len(e) == 2]
    balanced = sum(1 for e in paired if e[True]["bytes_tx"] == e[False]["bytes_rx"]
                   and e[False]["bytes_tx"] == e[True]["bytes_rx"])
    m = {"sockets": sockets, "checksums_matched": res["checksums_matched"], "lengths_matched": res["lengths_matched"],
         "channels_balanced": f"{balanced}/{len(flows)}", "fabric_connections": t["fabric_connections"]}
    ok = (res["checksums_matched"] == sockets and res["lengths_matched"] == sockets
          and balanced == len(flows) == sockets and not bad)
    return ok, m


# -- 8 ---------------------------------------------------------------------

def routing_golden() -> tuple[bool, dict]:
    with Cluster("ingress-demo") as cl:
        st = cl.state
        tables = cl.service("Node1").tables
        tenant = st.pods["pod3"].tenant
        pod1 = str(st.pods["pod1"].ip)
        r_pod = resolve(tables, Endpoint(tenant, "10.244.2.5", 546))
        r_svc = resolve(tables, Endpoint(tenant, "10.5.6.7", 546))
        ing = tables.ingress.lookup(Endpoint(tenant, "202.2.3.4", 8080))
        sel = tables.services.select(Endpoint(tenant, "10.5.6.7", 546))
        routes = cl.service("Node1").dump_table("routes")
    m = {"pod1": pod1, "resolve_pod3": str(r_pod), "resolve_svc1": str(r_svc), "ingress": f"{ing.ip}:{ing.port}",
         "select": f"{sel.ip}:{sel.port}"}
    ok = (pod1 == "10.244.1.1" and r_pod == ConnTarget(st.node_ids()["Node2"], "Node2")
          and isinstance(r_svc, ServiceHandler) and m["ingress"] == "10.5.6.7:546"
          and m["select"] == "10.244.2.5:546" and "10.244.2.0/24 -> conn(Node2)\n" in routes)
    return ok, m


# -- 9 ---------------------------------------------------------------------

CHURN_SCENARIO = """tsor-scenario v1
[nodes]
Node1 10.244.0.0/22
Node2 10.244.4.0/22
"""


def route_stability(pods: int = 1000) -> tuple[bool, dict]:
    with Cluster(CHURN_SCENARIO) as cl:
        base = {n: s.tables.routes.mutations for n, s in cl.services.items()}
        names = list(cl.services)
        for i in range(pods):
            cl.cp.add_pod(f"churn{i}", names[i % len(names)])
        cl.settle()
        for i in range(pods):
            cl.cp.remove_pod(f"churn{i}")
        cl.settle()
        churn = {n: cl.services[n].tables.routes.mutations - base[n] for n in names}
        cl.add_node("Node3", "10.244.8.0/22")
        join = {n: cl.services[n].tables.routes.mutations - base[n] - churn[n] for n in names}
        bad = _clean(cl)
    m = {"pods": pods, "mutations_after_churn": sum(churn.values()), "mutations_per_node_on_join": sorted(join.values())}
    ok = all(v == 0 for v in churn.values()) and all(v == 1 for v in join.values()) and not bad
    return ok, m


# -- 10 ----------------------------------------------------------------------

def _net(text: str) -> tuple[int, int]:
    addr, _, plen = text.partition("/")
    n = int(plen or 32)
    mask = ((1 << 32) - 1) ^ ((1 << (32 - n)) - 1)
    return int(ipaddress.IPv4Address(addr)) & mask, mask


def policy_oracle(scenario_text: str) -> Callable[[int, str, int, str, int], bool]:
    """Independent evaluator over the scenario's own text.

    Returns ``allowed(src_tenant, src_ip, dst_tenant_owner, dst_ip, port)``;
    ``dst_tenant_owner`` is 0 for addresses no tenant owns.
    """
    section, tenants, rules = "", [], []
    for raw in scenario_text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
        elif section == "tenants":
            tenants.append(line.split()[0])
        elif section == "policies":
            action, *fields = line.split()
            kv = dict(f.split("=", 1) for f in fields)
            rules.append((action == "allow",
                          tenants.index(kv["tenant"]) + 1 if "tenant" in kv else None,
                          _net(kv.get("src", "0.0.0.0/0")), _net(kv.get("dst", "0.0.0.0/0")),
                          int(kv["port"]) if "port" in kv else None))

    def allowed(src_tenant: int, src_ip: str, owner: int, dst_ip: str, port: int) -> bool:
        if owner and owner != src_tenant:
            return False
        s, d = int(ipaddress.IPv4Address(src_ip)), int(ipaddress.IPv4Address(dst_ip))
        for allow, tenant, (sn, sm), (dn, dm), p in rules:
            if tenant is not None and tenant != src_tenant:
                continue
            if p is not None and p != port:
                continue
            if s & sm == sn and d & dm == dn:
                return allow
        return True

    return allowed


# one case aimed at each rule of the tenants scenario, in rule order
POLICY_PROBES = [
    ("a1", "10.244.2.10", 6379), ("a1", "10.244.1.99", 6379), ("d3", "10.244.1.70", 9000),
    ("d1", "10.244.2.20", 80), ("d1", "10.244.2.20", 22), ("g1", "10.244.2.200", 8080),
    ("a1", "10.244.2.150", 8080), ("d1", "10.244.2.20", 8080), ("d1", "10.244.2.20", 443),
    ("a2", "10.244.3.5", 6379),
]


def policy_cases(state, n: int = 50, seed: int = 10) -> list[tuple[str, str, int]]:
    """(src pod, dst ip, port) triples: the rule probes, then random cases.

    Random destinations are mostly same-tenant pods or unowned addresses so
    the rule table decides; the rest cross tenants and must be refused first.
    """
    rng = random.Random(seed)
    pods = sorted(state.pods)
    unowned = ["10.244.1.99", "10.244.2.99", "10.244.2.222", "10.244.3.99"]
    ports = [22, 80, 443, 6379, 8080, 9000]
    out = list(POLICY_PROBES[:n])
    while len(out) < n:
        src = state.pods[rng.choice(pods)]
        same = sorted(str(p.ip) for p in state.pods.values() if p.tenant == src.tenant)
        other = sorted(str(p.ip) for p in state.pods.values() if p.tenant != src.tenant)
        roll = rng.random()
        dst = rng.choice(same if roll < 0.5 else unowned if roll < 0.8 else other)
        out.append((src.name, dst, rng.choice(ports)))
    return out


def isolation() -> tuple[bool, dict]:
    path = scenario_path("tenants")
    with open(path, encoding="utf-8") as fh:
        oracle = policy_oracle(fh.read())
    with Cluster(path) as cl:
        st = cl.state
        owner = {str(p.ip): p.tenant for p in st.pods.values()}
        mismatches = 0
        denied = 0
        cases = policy_cases(st)
        for pod, dst_ip, port in cases:
            src = st.pods[pod]
            svc = cl.service_of(pod)
            got = bool(svc.enforce(Endpoint(src.tenant, src.ip, 40000), Endpoint(src.tenant, dst_ip, port)))
            want = oracle(src.tenant, str(src.ip), owner.get(dst_ip, 0), dst_ip, port)
            mismatches += got != want
            denied += not want

        # every pod listens on 5000; every pod connects to every pod of another tenant
        clients = {name: cl.client(name) for name in sorted(st.pods)}
        for c in clients.values():
            c.listen(5000)
        cl.settle()
        writes0 = cl.fabric.writes
        socks = []
        for a, ca in clients.items():
            for b, cb in clients.items():
                if st.pods[a].tenant != st.pods[b].tenant:
                    socks.append(ca.socket().connect((str(cb.ip), 5000), block=False))
        cl.settle()
        for c in clients.values():
            c.poll()
        cross_denied = sum(1 for s in socks if s.error == ErrorCode.PERMISSION_DENIED)
        cross_writes = cl.fabric.writes - writes0
        # a same-tenant connect over the same path does reach the fabric
        ok_sock = clients["a1"].socket().connect((str(clients["a2"].ip), 5000), block=False)
        cl.settle()
        clients["a1"].poll()
        control_writes = cl.fabric.writes - writes0 - cross_writes
        bad = _clean(cl)
    m = {"truth_table_cases": len(cases), "denied_cases": denied, "mismatches": mismatches,
         "cross_tenant_connects": len(socks), "cross_denied": cross_denied, "cross_fabric_writes": cross_writes,
         "same_tenant_fabric_writes": control_writes}
    ok = (mismatches == 0 and cross_denied == len(socks) and cross_writes == 0 and control_writes > 0
          and ok_sock.error == 0 and not bad)
    return ok, m


# -- 11 ----------------------------------------------------------------------

def gateway(sessions: int = 50, size: int = 1 << 20) -> tuple[bool, dict]:
    from .cli import execute
    rep = execute("ingress-demo", "ingress-echo", {"sessions": sessions, "bytes": size, "egress": True}, seed=11)
    r = rep["results"]
    m = {k: r.get(k) for k in ("sessions", "ingress_ok", "egress_ok", "miss_reset", "leaked_sessions")}
    m["channels_balanced"] = rep["channels"][0]["balanced"] if rep["channels"] else True
    m["invariants_ok"] = rep["invariants"]["ok"]
    ok = (r.get("ingress_ok") == sessions and r.get("egress_ok") == sessions and r.get("miss_reset") is True
          and r.get("leaked_sessions") == 0 and m["channels_balanced"] and m["invariants_ok"])
    return ok, m


# -- 12 ----------------------------------------------------------------------

def qos(rate: int = 1_000_000, tick: float = 1e-3) -> tuple[bool, dict]:
    quantum = int(rate * tick)
    bucket = TokenBucket(rate, quantum, now=0.0)
    granted = sum(bucket.take(1 << 40, k * tick) for k in range(int(round(1 / tick)) + 1))

    # the same limit enforced by the service on a live stream
    with Cluster("qos") as cl:
        svc = cl.service_of("sender")
        mark: dict = {}

        def probe() -> bool:
            tx, now = svc.counters["bytes_tx"], cl.clock()
            if "t0" not in mark and tx:
                mark.update(t0=now, b0=tx)
            elif "t0" in mark and "b1" not in mark and now >= mark["t0"] + 1.0:
                mark["b1"] = tx
            return False

        cl.add_app(probe)
        res, _, _ = run_workload(cl, "stream", {"bytes": 3 * rate // 2, "client": "sender", "server": "receiver"})
        bad = _clean(cl)
        burst = cl.state.ratelimits[cl.state.tenant_id("acme")].burst
    live = mark.get("b1", 0) - mark.get("b0", 0)
    m = {"bucket_granted": granted, "service_bytes_1s": live, "target": rate, "quantum": quantum,
         "service_burst": burst, "checksum_ok": res["checksums_matched"] == 1}
    ok = (abs(granted - rate) <= quantum and abs(live - rate) <= burst and m["checksum_ok"] and not bad)
    return ok, m


# -- 13 ----------------------------------------------------------------------

DETERMINISM_RUNS = [
    ("two-node", "echo", {"sockets": 64, "size": 512}),
    ("three-node", "stream", {"sockets": 6, "bytes": 1 << 18, "spread": 1, "chunk_min": 1, "chunk_max": 8192,
                              "read_min": 1, "read_max": 16384, "read_prob": 0.5}),
    ("two-node", "pingpong", {"rounds": 50, "idle": 0.01}),
    ("two-node", "connsetup", {"count": 100, "refused": 20}),
    ("ingress-demo", "ingress-echo", {"sessions": 4, "bytes": 65536}),
]


def report_without_wall_clock(report: dict) -> str:
    rest = {k: v for k, v in report.items() if k != "wall_clock"}
    return json.dumps(rest, indent=2, sort_keys=True)


def determinism(runs: Iterable = DETERMINISM_RUNS, seed: int = 13) -> tuple[bool, dict]:
    from .cli import execute
    m: dict = {}
    ok = True
    for scenario, workload, params in runs:
        a = execute(scenario, workload, params, seed)
        b = execute(scenario, workload, params, seed)
        same = report_without_wall_clock(a) == report_without_wall_clock(b)
        clean = a["invariants"]["ok"] and b["invariants"]["ok"]
        m[workload] = "identical" if same and clean else ("invariant-failure" if not clean else "differs")
        ok &= same and clean
    return ok, m


CRITERIA: dict[int, Criterion] = {c.number: c for c in [
    Criterion(1, "multiplexing", "10,000 sockets share one fabric connection", multiplexing),
    Criterion(2, "handshake", "two control messages per connect or refusal", handshake),
    Criterion(3, "flow-control", "no overwrites under a slow reader", flow_control),
    Criterion(4, "credit-bound", "credit messages bounded, each over half a buffer", credit_bound),
    Criterion(5, "coalescing", "one write request per empty-to-nonempty transition", coalescing),
    Criterion(6, "idle", "bounded polling, sleeps, no lost wakeups", idle_economy),
    Criterion(7, "integrity", "100 x 10 MiB over three nodes", integrity),
    Criterion(8, "routing-golden", "two-node service and ingress example", routing_golden),
    Criterion(9, "route-stability", "pod churn leaves route tables alone", route_stability),
    Criterion(10, "isolation", "tenant isolation and policy truth table", isolation),
    Criterion(11, "gateway", "ingress and egress TCP bridging", gateway),
    Criterion(12, "qos", "token bucket rate over one simulated second", qos),
    Criterion(13, "determinism", "identical seeds give identical reports", determinism),
]}


def select(names: Iterable[str]) -> list[Criterion]:
    names = list(names) or ["all"]
    if "all" in names:
        return list(CRITERIA.values())
    by_key = {c.key: c for c in CRITERIA.values()}
    out = []
    for n in names:
        if n.isdigit() and int(n) in CRITERIA:
            out.append(CRITERIA[int(n)])
        elif n in by_key:
            out.append(by_key[n])
        else:
            raise ValueError(f"unknown criterion {n!r}; see tsorsim check --list")
    return out


def run_criterion(c: Criterion) -> Outcome:
    t0 = time.perf_counter()
    try:
        ok, measured = c.fn()
    except Exception as exc:  # noqa: BLE001 - a crash is a failed criterion
        ok, measured = False, {"error": repr(exc)}
    return Outcome(c, bool(ok), measured, time.perf_counter() - t0)
