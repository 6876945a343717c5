import threading

import pytest

from tsor.acceptance import doorbell_interleavings
from tsor.endpoint import Endpoint
from tsor.errors import QueueFull
from tsor.shmq import (WORK_MESSAGE_SIZE, Doorbell, MsgType, ReadinessBitmap, WaitStats, WorkMessage,
                       WorkQueue, service_wait)


def test_work_message_round_trip():
    m = WorkMessage(MsgType.CONNECT_REQ, 7, 3, Endpoint(1, "10.244.1.2", 4000),
                    Endpoint(1, "10.5.6.7", 546), 0xDEADBEEF)
    raw = m.pack()
    assert len(raw) == WORK_MESSAGE_SIZE
    assert WorkMessage.unpack(raw) == m
    with pytest.raises(ValueError):
        WorkMessage.unpack(raw[:-1])


def test_queue_is_bounded_fifo():
    q = WorkQueue(4)
    for i in range(4):
        q.push(WorkMessage(MsgType.WRITE_REQ, i))
    assert q.full()
    assert not q.try_push(WorkMessage(MsgType.WRITE_REQ, 9))
    with pytest.raises(QueueFull):
        q.push(WorkMessage(MsgType.WRITE_REQ, 9))
    assert [q.pop().socket_id for _ in range(4)] == [0, 1, 2, 3]
    assert q.pop() is None
    with pytest.raises(ValueError):
        WorkQueue(3)


def test_bitmap_scan_returns_and_clears():
    bm = ReadinessBitmap()
    for s in (700, 3, 64, 3):
        bm.set(s)
    assert bm.any()
    assert bm.scan() == [3, 64, 700]
    assert not bm.any() and bm.scan() == []
    with pytest.raises(IndexError):
        bm.set(-1)


def test_service_wait_spins_then_sleeps():
    bm, bell, stats = ReadinessBitmap(), Doorbell(), WaitStats()
    out = service_wait(bm, bell, spin_budget=50, stats=stats, timeout=0.01)
    assert out == []
    assert bell.sleeps == 1
    assert stats.poll_iterations == 50
    assert stats.max_idle_run == 50


def test_service_wait_returns_ready_slots_without_sleeping():
    bm, bell = ReadinessBitmap(), Doorbell()
    bm.set(5)
    assert service_wait(bm, bell, spin_budget=10) == [5]
    assert bell.sleeps == 0


def test_ring_wakes_a_sleeping_service():
    bm, bell = ReadinessBitmap(), Doorbell()
    got = []
    t = threading.Thread(target=lambda: got.append(service_wait(bm, bell, spin_budget=10, timeout=5)))
    t.start()
    while not bell.sleeping:
        pass
    bm.set(9)
    assert bell.ring()
    t.join(5)
    assert got == [[9]]
    assert bell.wakes == 1


def test_ring_without_sleeper_is_free():
    bell = Doorbell()
    assert not bell.ring()
    assert bell.wakes == 0


def test_no_lost_wakeups_in_random_interleavings():
    r = doorbell_interleavings(20_000, seed=1)
    assert r["lost"] == 0
    assert r["found"] > 0 and r["woke"] > 0


def test_checking_before_announcing_sleep_loses_wakeups():
    # the harness must be able to see the bug it guards against
    r = doorbell_interleavings(20_000, seed=1, check_first=True)
    assert r["lost"] > 0
