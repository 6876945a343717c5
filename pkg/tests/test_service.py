import threading

import pytest

from tsor.endpoint import Endpoint
from tsor.errors import (AddrInUse, ConnectionClosed, ConnectionReset, ConnRefused, NetUnreachable, NoBackends,
                         PermissionDenied)
from tsor.sim import Cluster


def pair(cl, buffer_size=None):
    return cl.client("client", buffer_size), cl.client("server", buffer_size)


def test_echo_round_trip(two_node):
    c, s = pair(two_node)
    lst = s.listen(80)
    sock = c.connect((str(s.ip), 80))
    peer = lst.accept()
    sock.sendall(b"ping" * 1000)
    assert peer.recv_exactly(4000) == b"ping" * 1000
    peer.sendall(b"pong")
    assert sock.recv_exactly(4) == b"pong"
    assert peer.remote_ep == sock.local_ep and sock.remote_ep == peer.local_ep
    assert two_node.totals()["fabric_connections"] == 1


def test_handshake_costs_two_control_messages(two_node):
    c, s = pair(two_node)
    lst = s.listen(80)
    before = two_node.totals()
    c.connect((str(s.ip), 80))
    lst.accept()
    after = two_node.totals()
    assert after["handshake_msgs"] - before["handshake_msgs"] == 2
    assert after.get("data_writes", 0) == before.get("data_writes", 0)


def test_refused_without_listener(two_node):
    c, s = pair(two_node)
    with pytest.raises(ConnRefused):
        c.connect((str(s.ip), 81))
    assert two_node.totals()["handshake_msgs"] == 2


def test_eof_arrives_after_buffered_data(two_node):
    c, s = pair(two_node)
    lst = s.listen(80)
    sock = c.connect((str(s.ip), 80))
    peer = lst.accept()
    sock.sendall(b"last words")
    sock.shutdown()
    assert peer.recv_exactly(10) == b"last words"
    assert peer.read() == b""
    peer.sendall(b"reply after half close")
    assert sock.recv_exactly(22) == b"reply after half close"
    with pytest.raises(ConnectionClosed):
        sock.write(b"x")
    peer.close()
    sock.close()
    two_node.settle()
    assert two_node.totals()["live_channels"] == 0
    assert not two_node.check_invariants()


def test_channels_release_their_regions(two_node):
    baseline = two_node.fabric.live_registrations
    c, s = pair(two_node)
    lst = s.listen(80)
    socks = [c.connect((str(s.ip), 80)) for _ in range(5)]
    peers = [lst.accept() for _ in socks]
    assert two_node.fabric.live_registrations == baseline + 4 * len(socks)
    for a, b in zip(socks, peers):
        a.close()
        b.close()
    two_node.settle()
    assert two_node.fabric.live_registrations == baseline


def test_partial_write_then_write_ready(two_node):
    c, s = pair(two_node, buffer_size=1024)
    lst = s.listen(80)
    sock = c.connect((str(s.ip), 80))
    peer = lst.accept()
    # fits in the two rings together (1 KiB each way), but not in the write ring alone
    data = bytes(range(256)) * 7
    n = sock.write(data)
    assert 0 < n < len(data)
    sock.sendall(data[n:])
    assert peer.recv_exactly(len(data)) == data
    assert c.counters["writeready_popped"] >= 1


def test_service_ip_reaches_backend(ingress_demo):
    pod1, pod3 = ingress_demo.client("pod1"), ingress_demo.client("pod3")
    lst = pod3.listen(546)
    sock = pod1.connect(("10.5.6.7", 546))
    peer = lst.accept()
    assert str(sock.remote_ep.ip) == "10.244.2.5"
    sock.sendall(b"hi")
    assert peer.recv_exactly(2) == b"hi"


def test_service_without_backends(ingress_demo):
    ingress_demo.cp.set_service("empty", Endpoint(1, "10.5.9.9", 80), [])
    ingress_demo.settle()
    with pytest.raises(NoBackends):
        ingress_demo.client("pod1").connect(("10.5.9.9", 80))


def test_outside_address_without_egress_is_unreachable(two_node):
    with pytest.raises(NetUnreachable):
        two_node.client("client").connect(("8.8.8.8", 53))


def test_cross_tenant_connect_is_denied():
    with Cluster("tenants") as cl:
        a1, g2 = cl.client("a1"), cl.client("g2")
        g2.listen(5000)
        writes = cl.fabric.writes
        with pytest.raises(PermissionDenied):
            a1.connect((str(g2.ip), 5000))
        assert cl.fabric.writes == writes


def test_duplicate_listen(two_node):
    s = two_node.client("server")
    s.listen(80)
    with pytest.raises(AddrInUse):
        s.listen(80)


def test_backlog_overflow_refuses(two_node):
    c, s = pair(two_node)
    s.listen(80, backlog=2)
    ok = [c.connect((str(s.ip), 80)) for _ in range(2)]
    with pytest.raises(ConnRefused):
        c.connect((str(s.ip), 80))
    assert len(ok) == 2


def test_node_leaving_resets_open_channels():
    with Cluster("three-node") as cl:
        a, b = cl.client("pod1"), cl.client("pod2")
        lst = b.listen(80)
        sock = a.connect((str(b.ip), 80))
        lst.accept()
        cl.remove_node("Node2")
        with pytest.raises(ConnectionReset):
            sock.read(timeout=1.0)
        assert cl.totals()["fabric_connections"] == 1


def test_joining_node_gets_one_connection_per_peer(two_node):
    two_node.add_node("Node3")
    assert two_node.totals()["fabric_connections"] == 3
    pod = two_node.cp.add_pod("late", "Node3")
    two_node.settle()
    c, late = two_node.client("client"), two_node.client(pod.name)
    lst = late.listen(80)
    c.connect((str(late.ip), 80)).sendall(b"hello")
    assert lst.accept().recv_exactly(5) == b"hello"


def test_services_sleep_when_idle(two_node):
    two_node.settle()
    for svc in two_node.services.values():
        assert svc.doorbell.sleeps >= 1
        assert svc.wait_stats.max_idle_run <= two_node.state.options.spin_budget


def test_threaded_echo():
    with Cluster("two-node", threaded=True) as cl:
        c, s = cl.client("client"), cl.client("server")
        lst = s.listen(80)
        sock = c.connect((str(s.ip), 80), timeout=5)
        peer = lst.accept(timeout=5)
        payload = bytes(range(256)) * 1024
        got = []
        reader = threading.Thread(target=lambda: got.append(peer.recv_exactly(len(payload), timeout=10)))
        reader.start()
        sock.sendall(payload, timeout=10)
        reader.join(10)
        assert got == [payload]
        sock.close()
        assert peer.read(timeout=5) == b""
        peer.close()
        cl.quiesce()
        assert not cl.check_invariants()
