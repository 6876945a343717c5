"""Built-in workloads driven by ``tsorsim run``.

Every workload takes ``(cluster, params, seed)`` and returns a result dict
plus a list of latency samples (simulated microseconds). Parameters arrive
as strings from the command line and are coerced against typed defaults.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Optional

import numpy as np

from .client import SockState, TsorClient, TsorSocket
from .errors import TsorError
from .tasks import Task, accept, read, run_tasks, sendall

__all__ = ["WORKLOADS", "run_workload", "Params", "pick_pods"]

_HDR = struct.Struct("<Q")


class Params:
    """Typed view over ``k=v`` strings; records what was actually used."""

    def __init__(self, raw: Optional[dict] = None) -> None:
        self.raw = {k: str(v) for k, v in (raw or {}).items()}
        self.used: dict = {}

    def get(self, key: str, default, kind: Callable = None):
        kind = kind or type(default)
        if key in self.raw:
            text = self.raw[key]
            if kind is bool:
                val = text.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    val = kind(text)
                except ValueError:
                    raise ValueError(f"parameter {key}={text!r} is not a valid {kind.__name__}") from None
        else:
            val = default
        self.used[key] = val
        return val

    def unknown(self) -> list[str]:
        return sorted(set(self.raw) - set(self.used))


def pick_pods(cluster, client_pod: str = "", server_pod: str = "") -> tuple[str, str]:
    """Defaults: first pod on the first node and first pod on the last node."""
    st = cluster.state
    nodes = st.nodes_by_join()
    if not nodes:
        raise TsorError("scenario has no nodes")
    if not client_pod:
        pods = sorted(p.name for p in st.pods_on(nodes[0].node_id))
        client_pod = pods[0] if pods else cluster.cp.add_pod("wl-client", nodes[0].name).name
    if not server_pod:
        pods = sorted(p.name for p in st.pods_on(nodes[-1].node_id) if p.name != client_pod)
        server_pod = pods[0] if pods else cluster.cp.add_pod("wl-server", nodes[-1].name).name
    cluster.settle()
    return client_pod, server_pod


def _room(c: TsorClient):
    while c.region.qp.sq.full():
        c.poll()
        yield False


def _wait_connected(c: TsorClient, socks: list[TsorSocket]):
    pending = list(socks)
    while pending:
        c.poll()
        pending = [s for s in pending if s.state is SockState.CONNECTING]
        if pending:
            yield False


# -- echo ------------------------------------------------------------------

def echo_server(c: TsorClient, port: int, expected: int, backlog: int):
    lst = c.listen(port, backlog=backlog)
    conns: list[list] = []  # [sock, unsent bytes]
    finished = 0
    while finished < expected:
        progressed = False
        while True:
            s = lst.try_accept()
            if s is None:
                break
            conns.append([s, b""])
            progressed = True
        c.poll()
        keep = []
        for entry in conns:
            s, out = entry
            if out:
                n = s.write(out)
                entry[1] = out[n:]
                progressed |= n > 0
            if not entry[1]:
                yield from _room(c)
                data = s.try_read()
                if data == b"":
                    yield from _room(c)
                    s.close()
                    finished += 1
                    progressed = True
                    continue
                if data:
                    n = s.write(data)
                    entry[1] = data[n:]
                    progressed = True
            keep.append(entry)
        conns = keep
        yield progressed
    lst.close()
    return finished


def echo_client(c: TsorClient, dst, count: int, size: int, seed: int, lat: list):
    rng = np.random.default_rng(seed)
    socks = []
    for i in range(count):
        yield from _room(c)
        socks.append(c.socket().connect(dst, block=False))
        if i % 256 == 255:
            yield True
    yield from _wait_connected(c, socks)
    errors = [s for s in socks if s.error]
    if errors:
        raise TsorError(f"{len(errors)} of {count} connects failed (first: error {errors[0].error})")
    clock = c.waiter.now
    payloads = [rng.bytes(size) for _ in socks]
    started = []
    for s, p in zip(socks, payloads):
        yield from _room(c)
        if s.write(p) != size:
            raise TsorError("echo payload larger than the socket buffer")
        started.append(clock())
    got = [bytearray() for _ in socks]
    remaining = set(range(count))
    ok = 0
    while remaining:
        c.poll()
        progressed = False
        for i in sorted(remaining):
            yield from _room(c)
            data = socks[i].try_read()
            if data:
                got[i] += data
                progressed = True
            if len(got[i]) >= size:
                remaining.discard(i)
                lat.append((clock() - started[i]) * 1e6)
                ok += bytes(got[i]) == payloads[i]
                yield from _room(c)
                socks[i].close()
        yield progressed
    return ok


def run_echo(cluster, p: Params, seed: int):
    cpod, spod = pick_pods(cluster, p.get("client", ""), p.get("server", ""))
    count = p.get("sockets", 10)
    size = p.get("size", 64)
    port = p.get("port", 7000)
    buf = p.get("buffer_size", 0) or None
    server = cluster.client(spod, buffer_size=buf)
    client = cluster.client(cpod, buffer_size=buf)
    dst = (str(server.ip), port)
    lat: list = []
    srv = Task(echo_server(server, port, count, max(128, count)), "echo-server", server)
    cli = Task(echo_client(client, dst, count, size, seed, lat), "echo-client", client)
    run_tasks(cluster, [srv, cli])
    cluster.settle()
    return {"sockets": count, "size": size, "round_trips_ok": cli.result, "server_closed": srv.result}, lat


# -- stream ----------------------------------------------------------------

def stream_writer(c: TsorClient, dst, stream_id: int, total: int, seed: int, chunk_min: int, chunk_max: int,
                  burst: int, digests: dict, chunks: list, gap: int = 0):
    rng = np.random.default_rng([seed, stream_id, 1])
    sock = c.socket()
    yield from _room(c)
    sock.connect(dst, block=False)
    yield from _wait_connected(c, [sock])
    if sock.error:
        raise TsorError(f"stream {stream_id}: connect failed with error {sock.error}")
    h = hashlib.blake2b(digest_size=16)
    yield from sendall(sock, _HDR.pack(stream_id))
    sent = 0
    n_chunks = 0
    while sent < total:
        for _ in range(burst):
            k = min(int(rng.integers(chunk_min, chunk_max + 1)), total - sent)
            data = rng.bytes(k)
            h.update(data)
            yield from _room(c)
            yield from sendall(sock, data)
            sent += k
            n_chunks += 1
            if sent >= total:
                break
        yield True
        for _ in range(gap):
            yield False
    digests[stream_id] = h.hexdigest()
    chunks.append(n_chunks)
    yield from _room(c)
    sock.close()
    return sent


def stream_reader(c: TsorClient, port: int, expected: int, seed: int, read_prob: float, read_min: int,
                  read_max: int, digests: dict, first_read: list):
    rng = np.random.default_rng([seed, 2, port, c.region.slot])
    lst = c.listen(port, backlog=max(128, expected))
    live: list[list] = []  # [sock, stream_id or None, header bytes, hasher, count]
    done = 0
    accepted = 0
    while done < expected:
        progressed = False
        while accepted < expected:
            s = lst.try_accept()
            if s is None:
                break
            live.append([s, None, b"", hashlib.blake2b(digest_size=16), 0])
            accepted += 1
            progressed = True
        c.poll()
        keep = []
        for st in live:
            s = st[0]
            if read_prob < 1.0 and rng.random() >= read_prob:
                keep.append(st)
                continue
            want = int(rng.integers(read_min, read_max + 1))
            yield from _room(c)
            data = s.try_read(want)
            if data is None:
                keep.append(st)
                continue
            progressed = True
            if data == b"":
                digests[st[1]] = (st[3].hexdigest(), st[4])
                yield from _room(c)
                s.close()
                done += 1
                continue
            if not first_read:
                first_read.append(c.waiter.now())
            if st[1] is None:
                need = _HDR.size - len(st[2])
                st[2] += data[:need]
                data = data[need:]
                if len(st[2]) == _HDR.size:
                    st[1] = _HDR.unpack(st[2])[0]
            if data:
                st[3].update(data)
                st[4] += len(data)
            keep.append(st)
        live = keep
        yield progressed
    lst.close()
    return done


def run_stream(cluster, p: Params, seed: int):
    sockets = p.get("sockets", 1)
    total = p.get("bytes", 1 << 20)
    chunk = p.get("chunk", 256)
    chunk_min = p.get("chunk_min", chunk)
    chunk_max = p.get("chunk_max", chunk)
    burst = p.get("burst", 16)
    gap = p.get("gap", 0)  # idle rounds after each burst, so the pump can catch up
    read_prob = p.get("read_prob", 1.0)
    read_min = p.get("read_min", 65536)
    read_max = p.get("read_max", read_min)
    port = p.get("port", 9000)
    spread = p.get("spread", False)
    buf = p.get("buffer_size", 0) or None
    if spread:
        pods = _one_pod_per_node(cluster)
        pairs = [(pods[i % len(pods)], pods[(i + 1) % len(pods)]) for i in range(sockets)]
    else:
        cpod, spod = pick_pods(cluster, p.get("client", ""), p.get("server", ""))
        pairs = [(cpod, spod)] * sockets
    clients: dict[str, TsorClient] = {}
    for a, b in pairs:
        for pod in (b, a):
            if pod not in clients:
                clients[pod] = cluster.client(pod, buffer_size=buf)
    sent_digests: dict = {}
    recv_digests: dict = {}
    chunk_counts: list = []
    first_read: list = []
    expected = {}
    for _, b in pairs:
        expected[b] = expected.get(b, 0) + 1
    tasks = [Task(stream_reader(clients[b], port, n, seed, read_prob, read_min, read_max, recv_digests,
                                first_read), f"reader-{b}", clients[b])
             for b, n in expected.items()]
    writers = []
    for i, (a, b) in enumerate(pairs):
        writers.append(Task(stream_writer(clients[a], (str(clients[b].ip), port), i, total, seed, chunk_min,
                                          chunk_max, burst, sent_digests, chunk_counts, gap), f"writer-{i}", clients[a]))
    t0 = cluster.clock()
    run_tasks(cluster, tasks + writers)
    t_end = cluster.clock()
    cluster.settle()
    matched = sum(1 for i in range(sockets) if recv_digests.get(i, ("", 0))[0] == sent_digests.get(i))
    lengths_ok = sum(1 for i in range(sockets) if recv_digests.get(i, ("", -1))[1] == total)
    out = {
        "sockets": sockets, "bytes_per_socket": total, "chunks": int(sum(chunk_counts)),
        "checksums_matched": matched, "lengths_matched": lengths_ok,
        "first_read_before_writer_done": bool(first_read) and first_read[0] < t_end,
        "duration_us": round((t_end - t0) * 1e6, 3),
    }
    return out, []


def _one_pod_per_node(cluster) -> list[str]:
    out = []
    for n in cluster.state.nodes_by_join():
        pods = sorted(p.name for p in cluster.state.pods_on(n.node_id))
        out.append(pods[0] if pods else cluster.cp.add_pod(f"wl-{n.name}", n.name).name)
    cluster.settle()
    return out


# -- pingpong ----------------------------------------------------------------

def run_pingpong(cluster, p: Params, seed: int):
    cpod, spod = pick_pods(cluster, p.get("client", ""), p.get("server", ""))
    rounds = p.get("rounds", 100)
    size = p.get("size", 64)
    port = p.get("port", 7100)
    idle_s = p.get("idle", 0.0)
    server = cluster.client(spod)
    client = cluster.client(cpod)
    rng = np.random.default_rng(seed)
    lat: list = []
    hops: list = []

    def srv():
        lst = server.listen(port)
        s = yield from accept(lst)
        while True:
            data = yield from read(s)
            if not data:
                break
            yield from _room(server)
            yield from sendall(s, data)
        s.close()
        lst.close()

    def cli():
        s = client.socket()
        s.connect((str(server.ip), port), block=False)
        yield from _wait_connected(client, [s])
        for _ in range(rounds):
            msg = rng.bytes(size)
            t0 = client.waiter.now()
            step0 = cluster.steps if not cluster.threaded else 0
            yield from _room(client)
            yield from sendall(s, msg)
            got = b""
            while len(got) < size:
                yield from _room(client)
                chunk = yield from read(s, size - len(got))
                got += chunk
            if got != msg:
                raise TsorError("pingpong payload mismatch")
            lat.append((client.waiter.now() - t0) * 1e6)
            hops.append((cluster.steps - step0) if not cluster.threaded else 0)
        s.close()
        return rounds

    t = Task(cli(), "pingpong-client", client)
    run_tasks(cluster, [Task(srv(), "pingpong-server", server), t])
    cluster.settle()
    if idle_s > 0:
        idle_for(cluster, idle_s)
    return {"rounds": t.result, "size": size, "idle_s": idle_s,
            "hops_min": min(hops) if hops else 0, "hops_max": max(hops) if hops else 0}, lat


def idle_for(cluster, seconds: float) -> None:
    """Let the cluster sit with no traffic for ``seconds`` (simulated when inline)."""
    if cluster.threaded:
        import time
        time.sleep(seconds)
        return
    cluster.run()
    cluster.clock.advance(seconds)
    cluster.run()


# -- connsetup ---------------------------------------------------------------

def run_connsetup(cluster, p: Params, seed: int):
    cpod, spod = pick_pods(cluster, p.get("client", ""), p.get("server", ""))
    count = p.get("count", 1000)
    refused = p.get("refused", 0)
    batch = p.get("batch", 64)
    port = p.get("port", 7200)
    server = cluster.client(spod)
    client = cluster.client(cpod)
    svc_c = cluster.service_of(cpod)
    svc_s = cluster.service_of(spod)
    before = cluster.totals()
    data_before_accept = []

    def srv():
        lst = server.listen(port, backlog=max(128, batch))
        accepted = 0
        while accepted < count:
            s = lst.try_accept()
            if s is None:
                yield False
                continue
            data_before_accept.append(svc_c.counters["data_writes"] + svc_s.counters["data_writes"])
            accepted += 1
            yield from _room(server)
            s.close()
        lst.close()
        return accepted

    def cli():
        ok = 0
        for start in range(0, count, batch):
            socks = []
            for _ in range(min(batch, count - start)):
                yield from _room(client)
                socks.append(client.socket().connect((str(server.ip), port), block=False))
            yield from _wait_connected(client, socks)
            for s in socks:
                if s.error:
                    raise TsorError(f"connect failed with error {s.error}")
                ok += 1
                yield from _room(client)
                s.close()
        return ok

    run_tasks(cluster, [Task(srv(), "connsetup-server", server), Task(cli(), "connsetup-client", client)])
    cluster.settle()
    mid = cluster.totals()
    n_refused = 0
    if refused:
        def cli_refused():
            nonlocal n_refused
            for start in range(0, refused, batch):
                socks = []
                for _ in range(min(batch, refused - start)):
                    yield from _room(client)
                    socks.append(client.socket().connect((str(server.ip), port + 1), block=False))
                yield from _wait_connected(client, socks)
                n_refused += sum(1 for s in socks if s.error)
        run_tasks(cluster, [Task(cli_refused(), "connsetup-refused", client)])
        cluster.settle()
    after = cluster.totals()

    def delta(a, b, k):
        return b.get(k, 0) - a.get(k, 0)

    return {
        "connects": count,
        "handshake_msgs_connect": delta(before, mid, "handshake_msgs"),
        "refused_connects": refused,
        "refused_observed": n_refused,
        "handshake_msgs_refused": delta(mid, after, "handshake_msgs"),
        "control_msgs_refused": delta(mid, after, "control_msgs"),
        "data_writes_before_accept_max": max(data_before_accept, default=0),
    }, []


WORKLOADS: dict[str, Callable] = {
    "echo": run_echo,
    "stream": run_stream,
    "pingpong": run_pingpong,
    "connsetup": run_connsetup,
}


def run_workload(cluster, name: str, params: Optional[dict] = None, seed: int = 0):
    """Run a named workload; returns ``(results, latency_samples_us, used_params)``."""
    if name == "ingress-echo":
        from .gateway import run_ingress_echo
        fn = run_ingress_echo
    elif name in WORKLOADS:
        fn = WORKLOADS[name]
    else:
        raise KeyError(f"unknown workload {name!r}; choose from {sorted([*WORKLOADS, 'ingress-echo'])}")
    p = Params(params)
    results, lat = fn(cluster, p, seed)
    bad = p.unknown()
    if bad:
        raise ValueError(f"unknown parameter(s) for {name}: {', '.join(bad)}")
    return results, lat, p.used
