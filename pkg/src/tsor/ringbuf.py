"""Fixed-capacity SPSC byte ring used both as socket buffer and as a fabric
memory region.

``head`` and ``tail`` are free-running counters; physical positions are the
counters reduced by ``capacity - 1``. ``tail - head`` is the number of
readable bytes, so a full buffer is distinguishable from an empty one
without sacrificing a slot.

Thread safety: one producer thread and one consumer thread. Payload bytes
are copied into storage before the owning index is published, and under
CPython each index store is a single attribute assignment, so a consumer
that observes a new ``tail`` also observes the bytes behind it.
"""

from __future__ import annotations

__all__ = ["RingBuffer", "DEFAULT_CAPACITY"]

DEFAULT_CAPACITY = 65536


class RingBuffer:
    __slots__ = ("_capacity", "_mask", "_storage", "_view", "head", "tail", "__weakref__")

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        if capacity <= 0 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self._capacity = capacity
        self._mask = capacity - 1
        self._storage = bytearray(capacity)
        self._view = memoryview(self._storage)
        self.head = 0  # consumer index
        self.tail = 0  # producer index

    def __repr__(self) -> str:
        return f"RingBuffer(capacity={self._capacity}, head={self.head}, tail={self.tail})"

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def storage(self) -> bytearray:
        return self._storage

    @property
    def available_data(self) -> int:
        return self.tail - self.head

    @property
    def free_space(self) -> int:
        return self._capacity - (self.tail - self.head)

    def is_empty(self) -> bool:
        return self.tail == self.head

    def contiguous_regions(self, start: int, length: int) -> list[tuple[int, int]]:
        """Physical ``(offset, length)`` slices covering ``[start, start+length)``.

        The second slice is present only when the range wraps.
        """
        if length < 0 or length > self._capacity:
            raise IndexError(f"range length {length} outside [0, {self._capacity}]")
        off = start & self._mask
        first = min(length, self._capacity - off)
        if first == length:
            return [(off, length)]
        return [(off, first), (0, length - first)]

    # -- producer side --------------------------------------------------

    def produce(self, data) -> int:
        """Copy as much of ``data`` as fits; returns the byte count written."""
        n = min(len(data), self._capacity - (self.tail - self.head))
        if n <= 0:
            return 0
        src = memoryview(data)[:n]
        pos = 0
        for off, ln in self.contiguous_regions(self.tail, n):
            self._view[off:off + ln] = src[pos:pos + ln]
            pos += ln
        self.tail += n
        return n

    def write_at(self, offset: int, data) -> None:
        """Raw physical copy; the tail is published separately via ``commit``."""
        end = offset + len(data)
        if offset < 0 or end > self._capacity:
            raise IndexError(f"write [{offset}, {end}) outside region of {self._capacity}")
        self._view[offset:end] = data

    def commit(self, n: int) -> None:
        if n < 0 or self.tail + n - self.head > self._capacity:
            raise OverflowError("commit past free space")
        self.tail += n

    # -- consumer side --------------------------------------------------

    def consume(self, max_bytes: int) -> bytes:
        n = min(max_bytes, self.tail - self.head)
        if n <= 0:
            return b""
        out = b"".join(self.peek(self.head, n))
        self.head += n
        return out

    def peek(self, start: int, length: int) -> list[memoryview]:
        """Views over ``[start, start+length)`` without consuming anything."""
        return [self._view[off:off + ln] for off, ln in self.contiguous_regions(start, length)]

    def advance_head(self, n: int) -> None:
        if n < 0 or n > self.tail - self.head:
            raise OverflowError("advance past available data")
        self.head += n
