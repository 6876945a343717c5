import pytest

from tsor.errors import DeliveryError, FabricError, NodeNotFound, OverwriteError
from tsor.fabric import CompletionKind, ConnState, Fabric, RendezvousRecord
from tsor.ringbuf import RingBuffer


@pytest.fixture
def pair():
    fab = Fabric()
    rings = {1: RingBuffer(16), 2: RingBuffer(16)}
    mrs = {}
    for node in (1, 2):
        fab.attach(node)
        mrs[node] = fab.register_mr(node, rings[node])
        fab.rendezvous.register(node, lambda conn, n=node: RendezvousRecord(n, mrs[n], 16))
    conn = fab.connect(1, 2)
    return fab, conn, rings, mrs


def test_connect_is_idempotent_and_exchanges_metadata(pair):
    fab, conn, _, mrs = pair
    assert conn.state is ConnState.ESTABLISHED
    assert fab.connect(2, 1) is conn
    assert fab.connections_created == 1
    assert conn.meta[2].control_mr == mrs[2]


def test_loopback_is_not_counted(pair):
    fab, *_ = pair
    fab.connect(1, 1)
    assert fab.connection_count() == 1
    assert fab.connection_count(1) == 1


def test_unknown_node_cannot_connect():
    fab = Fabric()
    with pytest.raises(NodeNotFound):
        fab.connect(1, 2)


def test_write_with_imm_lands_before_completion(pair):
    fab, conn, rings, mrs = pair
    fab.write_imm(conn, 1, mrs[2], 0, b"hello", 42)
    assert bytes(rings[2].storage[:5]) == b"hello"
    (recv,) = fab.poll_completions(2)
    assert recv.kind is CompletionKind.RECV_IMM and recv.imm == 42 and recv.length == 5
    (done,) = fab.poll_completions(1)
    assert done.kind is CompletionKind.SEND_DONE


def test_imm_length_spans_preceding_plain_writes(pair):
    fab, conn, _, mrs = pair
    fab.write_imm(conn, 1, mrs[2], 0, b"abc", None, signaled=False)
    assert not fab.has_completions(2) and not fab.has_completions(1)
    fab.write_imm(conn, 1, mrs[2], 3, b"de", 7)
    (recv,) = fab.poll_completions(2)
    assert (recv.offset, recv.length) == (0, 5)


def test_write_past_consumer_is_an_overwrite(pair):
    fab, conn, rings, mrs = pair
    fab.write_imm(conn, 1, mrs[2], 0, b"x" * 16, 1)
    with pytest.raises(OverwriteError):
        fab.write_imm(conn, 1, mrs[2], 0, b"y", 1)
    assert fab.overwrites == 1
    rings[2].commit(16)
    rings[2].consume(4)
    fab.write_imm(conn, 1, mrs[2], 0, b"zzzz", 2)


def test_write_must_start_at_landing_point(pair):
    fab, conn, _, mrs = pair
    with pytest.raises(OverwriteError):
        fab.write_imm(conn, 1, mrs[2], 4, b"a", 1)
    with pytest.raises(DeliveryError):
        fab.write_imm(conn, 1, mrs[2], 10, b"a" * 7, 1)


def test_deregistered_region_rejects_writes(pair):
    fab, conn, _, mrs = pair
    fab.deregister_mr(2, mrs[2])
    with pytest.raises(DeliveryError):
        fab.write_imm(conn, 1, mrs[2], 0, b"a", 1)


def test_double_registration_fails(pair):
    fab, _, rings, _ = pair
    with pytest.raises(FabricError):
        fab.register_mr(1, rings[1])


def test_closed_connection_refuses_writes(pair):
    fab, conn, _, mrs = pair
    fab.disconnect(1, 2)
    with pytest.raises(FabricError):
        fab.write_imm(conn, 1, mrs[2], 0, b"a", 1)
    assert fab.connection_count() == 0
