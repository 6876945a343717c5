import socket
import threading

import pytest

from tsor.cli import execute
from tsor.endpoint import parse_endpoint
from tsor.errors import TsorError
from tsor.gateway import EgressGateway, IngressGateway, TcpEchoServer, pod_roundtrip, serve_echo, tcp_roundtrip
from tsor.sim import Cluster


@pytest.fixture
def threaded_ingress_demo():
    with Cluster("ingress-demo", threaded=True) as cl:
        yield cl


@pytest.fixture
def echo_backend(threaded_ingress_demo):
    stop = threading.Event()
    serve_echo(threaded_ingress_demo.client("pod3"), 546, stop)
    yield
    stop.set()


def _closed_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_ingress_round_trip(threaded_ingress_demo, echo_backend):
    gw = IngressGateway(threaded_ingress_demo.client("pod1"))
    addrs = gw.expose_all()
    assert list(map(str, addrs)) == ["202.2.3.4:8080"]
    payload = bytes(range(256)) * 400
    assert tcp_roundtrip(next(iter(addrs.values())), payload) == payload
    for b in gw.bridges:
        assert b.wait(10)
    gw.close()
    assert gw.live_sessions == 0
    assert gw.counters["internal_connects"] == 1


def test_ingress_miss_is_reset(threaded_ingress_demo):
    gw = IngressGateway(threaded_ingress_demo.client("pod1"))
    addr = gw.expose(parse_endpoint("202.2.3.4:9999"))
    try:
        with socket.create_connection(addr, timeout=5) as c:
            assert c.recv(1) == b""
    except ConnectionResetError:
        pass  # the reset may land before or after connect returns
    gw.close()
    assert gw.counters["resets"] == 1


def test_egress_round_trip(threaded_ingress_demo):
    threaded_ingress_demo.cp.set_egress("pod3")
    threaded_ingress_demo.settle()
    eg = EgressGateway(threaded_ingress_demo.client("pod3"))
    srv = TcpEchoServer()
    try:
        payload = b"outbound" * 5000
        assert pod_roundtrip(threaded_ingress_demo.client("pod1"), srv.address, payload) == payload
        for b in eg.bridges:
            assert b.wait(10)
    finally:
        eg.close()
        srv.close()
    assert eg.live_sessions == 0


def test_egress_unreachable_target_is_refused(threaded_ingress_demo):
    threaded_ingress_demo.cp.set_egress("pod3")
    threaded_ingress_demo.settle()
    eg = EgressGateway(threaded_ingress_demo.client("pod3"), connect_timeout=1.0)
    try:
        with pytest.raises(TsorError):
            threaded_ingress_demo.client("pod1").connect(("127.0.0.1", _closed_port()), timeout=10.0)
    finally:
        eg.close()
    assert eg.counters["resets"] == 1


def test_ingress_echo_workload():
    r = execute("ingress-demo", "ingress-echo", {"sessions": "4", "bytes": "20000"}, seed=2)
    res = r["results"]
    assert (res["ingress_ok"], res["egress_ok"], res["miss_reset"], res["leaked_sessions"]) == (4, 4, True, 0)
    assert r["invariants"]["ok"] and r["channels"][0]["balanced"]
