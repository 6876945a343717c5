"""Client <-> service signaling: SQ/CQ work queues, the two-layer readiness
bitmap and the idle-sleep doorbell.

Access discipline (nothing else is supported):

* SQ: the owning client produces, the node service consumes.
* CQ: the node service produces, the owning client consumes.
* Bitmap: any client may ``set``; only the service ``scan``s.
* Doorbell: clients ``ring``; only the service sleeps on it.
"""

from __future__ import annotations

import collections
import dataclasses
import enum
import struct
import threading
from typing import Callable, Optional

from .endpoint import EP_STRUCT, NULL_EP, Endpoint
from .errors import QueueFull

__all__ = [
    "MsgType", "WorkMessage", "WorkQueue", "WorkQueuePair", "ReadinessBitmap",
    "Doorbell", "WaitStats", "service_wait", "MAX_SLOTS", "DEFAULT_DEPTH",
    "DEFAULT_SPIN_BUDGET", "WORK_MESSAGE_SIZE",
]

MAX_SLOTS = 4096
DEFAULT_DEPTH = 1024
DEFAULT_SPIN_BUDGET = 10_000
WORK_MESSAGE_SIZE = 64


class MsgType(enum.IntEnum):
    CONNECT_REQ = 1
    CONNECT_RESP = 2
    WRITE_REQ = 3
    READ_READY = 4
    ACCEPT_READY = 5
    CREDIT_HINT = 6
    CLOSE_REQ = 7
    ERROR = 8
    # write-buffer space became available after a partial write
    WRITE_READY = 9


# msg_type, socket_id, channel_key, src_ep, dst_ep, payload_u32
_WM_HEAD = struct.Struct("<III")
_WM_TAIL = struct.Struct("<I")
_WM_USED = _WM_HEAD.size + 2 * EP_STRUCT.size + _WM_TAIL.size
_WM_PAD = bytes(WORK_MESSAGE_SIZE - _WM_USED)


@dataclasses.dataclass
class WorkMessage:
    msg_type: MsgType
    socket_id: int = 0
    channel_key: int = 0
    src_ep: Endpoint = NULL_EP
    dst_ep: Endpoint = NULL_EP
    payload_u32: int = 0

    def pack(self) -> bytes:
        out = b"".join((
            _WM_HEAD.pack(int(self.msg_type), self.socket_id, self.channel_key),
            self.src_ep.pack(), self.dst_ep.pack(),
            _WM_TAIL.pack(self.payload_u32 & 0xFFFFFFFF), _WM_PAD,
        ))
        return out

    @classmethod
    def unpack(cls, raw: bytes) -> "WorkMessage":
        if len(raw) != WORK_MESSAGE_SIZE:
            raise ValueError(f"work message must be {WORK_MESSAGE_SIZE} bytes")
        mt, sid, key = _WM_HEAD.unpack_from(raw, 0)
        pos = _WM_HEAD.size
        src = Endpoint.unpack(*EP_STRUCT.unpack_from(raw, pos))
        dst = Endpoint.unpack(*EP_STRUCT.unpack_from(raw, pos + EP_STRUCT.size))
        (payload,) = _WM_TAIL.unpack_from(raw, pos + 2 * EP_STRUCT.size)
        return cls(MsgType(mt), sid, key, src, dst, payload)


class WorkQueue:
    """Bounded SPSC FIFO of work messages; pushing onto a full queue fails."""

    __slots__ = ("depth", "_items")

    def __init__(self, depth: int = DEFAULT_DEPTH) -> None:
        if depth <= 0 or depth & (depth - 1):
            raise ValueError("queue depth must be a power of two")
        self.depth = depth
        self._items: collections.deque = collections.deque()

    def __len__(self) -> int:
        return len(self._items)

    def try_push(self, m: WorkMessage) -> bool:
        # len() may lag a concurrent pop; that only makes the check conservative
        if len(self._items) >= self.depth:
            return False
        self._items.append(m)
        return True

    def push(self, m: WorkMessage) -> None:
        if not self.try_push(m):
            raise QueueFull(f"queue full at depth {self.depth}")

    def pop(self) -> Optional[WorkMessage]:
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def full(self) -> bool:
        return len(self._items) >= self.depth


class WorkQueuePair:
    def __init__(self, depth: int = DEFAULT_DEPTH) -> None:
        self.sq = WorkQueue(depth)
        self.cq = WorkQueue(depth)
        self.depth = depth


class ReadinessBitmap:
    """Two-layer bitmap: bit ``i`` of ``l1`` is set iff ``l2[i]`` is nonzero."""

    def __init__(self) -> None:
        self.l1 = 0
        self.l2 = [0] * 64
        self._lock = threading.Lock()

    def set(self, slot: int) -> None:
        if not 0 <= slot < MAX_SLOTS:
            raise IndexError(f"slot {slot} outside [0, {MAX_SLOTS})")
        word, bit = divmod(slot, 64)
        with self._lock:
            self.l2[word] |= 1 << bit
            self.l1 |= 1 << word

    def scan(self) -> list[int]:
        """Return and clear every set slot, ascending."""
        if not self.l1:
            return []
        with self._lock:
            l1, self.l1 = self.l1, 0
            words = []
            while l1:
                low = l1 & -l1
                i = low.bit_length() - 1
                words.append((i, self.l2[i]))
                self.l2[i] = 0
                l1 ^= low
        out = []
        for i, w in words:
            base = i * 64
            while w:
                low = w & -w
                out.append(base + low.bit_length() - 1)
                w ^= low
        return out

    def any(self) -> bool:
        return self.l1 != 0


class Doorbell:
    """Binary wake event owned by a service loop.

    Clients publish readiness first and then ``ring``; the service sets its
    sleeping flag and re-checks readiness before blocking. Either the
    service's re-check sees the readiness or the ring sees the flag.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._event = threading.Event()
        self.sleeping = False
        self.sleeps = 0
        self.wakes = 0

    def ring(self) -> bool:
        if not self.sleeping:
            return False
        with self._lock:
            if self.sleeping and not self._event.is_set():
                self._event.set()
                self.wakes += 1
                return True
        return False

    def prepare_sleep(self) -> None:
        with self._lock:
            self.sleeping = True

    def cancel_sleep(self) -> None:
        with self._lock:
            self.sleeping = False
            self._event.clear()

    def is_set(self) -> bool:
        return self._event.is_set()

    def sleep(self, timeout: Optional[float] = None) -> bool:
        """Block until rung (or timeout). Returns True if a ring woke us."""
        self.sleeps += 1
        woke = self._event.wait(timeout)
        self.cancel_sleep()
        return woke


@dataclasses.dataclass
class WaitStats:
    """Idle-poll accounting. ``idle_run`` counts consecutive empty polls
    since the service last found work or last woke from sleep."""

    poll_iterations: int = 0
    idle_run: int = 0
    max_idle_run: int = 0

    def spin(self, n: int = 1) -> None:
        self.poll_iterations += n
        self.idle_run += n
        if self.idle_run > self.max_idle_run:
            self.max_idle_run = self.idle_run

    def reset(self) -> None:
        self.idle_run = 0


def service_wait(bitmap: ReadinessBitmap, doorbell: Doorbell, spin_budget: int = DEFAULT_SPIN_BUDGET,
                 pending: Callable[[], bool] = lambda: False, stats: Optional[WaitStats] = None,
                 timeout: Optional[float] = None) -> list[int]:
    """Spin up to ``spin_budget`` polls, then sleep on the doorbell.

    Returns the ready client slots (cleared from the bitmap). An empty list
    means the caller was woken for non-SQ work (``pending()`` turned true,
    or ``timeout`` expired).
    """
    stats = stats if stats is not None else WaitStats()
    stats.reset()
    while True:
        for _ in range(spin_budget):
            stats.spin()
            slots = bitmap.scan()
            if slots:
                return slots
            if pending():
                return []
        doorbell.prepare_sleep()
        slots = bitmap.scan()
        if slots or pending():
            doorbell.cancel_sleep()
            return slots
        woke = doorbell.sleep(timeout)
        stats.reset()
        if not woke:
            return bitmap.scan()
