import pytest

from tsor.client import DeadlockError, SockState
from tsor.errors import ConnectionClosed, SlotsExhausted, TsorError
from tsor.sim import Cluster


def test_ephemeral_ports_skip_listening_ones(two_node):
    c = two_node.client("client")
    c.listen(32768)
    assert c.alloc_port() == 32769


def test_non_blocking_reads(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    lst = s.listen(80)
    assert lst.try_accept() is None
    sock = c.connect((str(s.ip), 80))
    peer = lst.try_accept()
    assert peer is not None and peer.state is SockState.OPEN
    assert peer.try_read() is None
    sock.write(b"abc")
    two_node.settle()
    assert peer.try_read(2) == b"ab"
    assert peer.try_read() == b"c"


def test_blocking_on_an_idle_cluster_is_a_deadlock(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    lst = s.listen(80)
    c.connect((str(s.ip), 80))
    peer = lst.accept()
    with pytest.raises(DeadlockError):
        peer.read()


def test_timeouts_use_simulated_time(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    lst = s.listen(80)
    c.connect((str(s.ip), 80))
    peer = lst.accept()
    t0 = two_node.clock()
    with pytest.raises(TimeoutError):
        peer.read(timeout=2.5)
    assert two_node.clock() - t0 >= 2.5


def test_socket_state_rules(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    lst = s.listen(80)
    with pytest.raises(TsorError):
        lst.connect((str(s.ip), 80))
    with c.connect((str(s.ip), 80)) as sock:
        with pytest.raises(TsorError):
            sock.listen(81)
    assert sock.state is SockState.CLOSED
    with pytest.raises(ConnectionClosed):
        sock.try_read()


def test_closing_the_listener_refuses_later_connects(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    s.listen(80).close()
    with pytest.raises(ConnectionRefusedError):
        c.connect((str(s.ip), 80))


def test_client_close_releases_everything(two_node):
    c, s = two_node.client("client"), two_node.client("server")
    lst = s.listen(80)
    for _ in range(3):
        c.connect((str(s.ip), 80))
        lst.accept()
    c.close()
    s.close()
    two_node.settle()
    assert two_node.totals()["live_channels"] == 0


def test_slot_table_is_finite():
    text = "tsor-scenario v1\n[nodes]\nA\n[pods]\np A\n"
    with Cluster(text) as cl:
        svc = cl.service("A")
        with pytest.raises(SlotsExhausted):
            for _ in range(100_000):
                svc.register_client(1, "10.244.1.1")
