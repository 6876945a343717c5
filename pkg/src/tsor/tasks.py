"""Cooperative tasks for workloads.

A task is a generator that yields ``True`` after making progress and
``False`` when it would block. The same task code runs on the inline
driver (one ``next()`` per task per cluster step) or on its own thread.
"""

from __future__ import annotations

import threading
from typing import Generator, Iterable, Optional

from .client import SockState, TsorSocket
from .errors import Timeout, error_for

__all__ = ["Task", "run_tasks", "accept", "connect", "sendall", "read", "read_exactly", "drain"]

TaskGen = Generator[bool, None, object]


class Task:
    def __init__(self, gen: TaskGen, name: str = "", client=None) -> None:
        self.gen = gen
        self.name = name
        self.client = client
        self.done = False
        self.result: object = None
        self.error: Optional[BaseException] = None

    def __repr__(self) -> str:
        return f"Task({self.name}, done={self.done})"

    def advance(self) -> bool:
        if self.done:
            return False
        try:
            return bool(next(self.gen))
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            return True

    def run_threaded(self, timeout: Optional[float]) -> None:
        w = self.client.waiter if self.client is not None else None
        try:
            while not self.done:
                seen = w.seq if w is not None else 0
                if not self.advance() and w is not None:
                    w.wait(seen, 0.01 if timeout is None else min(0.01, timeout))
        except BaseException as exc:
            self.error = exc
            self.done = True


def run_tasks(cluster, tasks: Iterable[Task], max_steps: int = 50_000_000,
              timeout: Optional[float] = 300.0) -> list[Task]:
    """Run tasks to completion on the cluster's driver; re-raises the first failure."""
    tasks = list(tasks)
    if cluster.threaded:
        threads = [threading.Thread(target=t.run_threaded, args=(timeout,), name=t.name, daemon=True)
                   for t in tasks]
        for th in threads:
            th.start()
        for th in threads:
            th.join(timeout)
        for t in tasks:
            if t.error is not None:
                raise t.error
            if not t.done:
                raise Timeout(f"task {t.name} did not finish")
        return tasks
    live = list(tasks)

    def app() -> bool:
        progressed = False
        for t in live:
            if t.advance():
                progressed = True
        live[:] = [t for t in live if not t.done]
        return progressed

    cluster.add_app(app)
    try:
        cluster.run(lambda: not live, max_steps=max_steps)
    finally:
        cluster.apps.remove(app)
    return tasks


# -- blocking-style helpers built on the non-blocking socket calls ---------

def accept(lst: TsorSocket) -> Generator[bool, None, TsorSocket]:
    while True:
        s = lst.try_accept()
        if s is not None:
            return s
        yield False


def connect(sock: TsorSocket, dst) -> Generator[bool, None, TsorSocket]:
    sock.connect(dst, block=False)
    yield True
    while sock.state is SockState.CONNECTING:
        sock.client.poll()
        if sock.state is not SockState.CONNECTING:
            break
        yield False
    if sock.error:
        raise error_for(sock.error, f"connect to {sock.remote_ep}")
    return sock


def sendall(sock: TsorSocket, data) -> Generator[bool, None, int]:
    view = memoryview(data).cast("B")
    total = len(view)
    while view:
        n = sock.write(view)
        view = view[n:]
        if view:
            sock.client.poll()
            yield n > 0
    return total


def read(sock: TsorSocket, max_bytes: int = 65536) -> Generator[bool, None, bytes]:
    while True:
        sock.client.poll()
        data = sock.try_read(max_bytes)
        if data is not None:
            return data
        yield False


def read_exactly(sock: TsorSocket, n: int) -> Generator[bool, None, bytes]:
    parts, got = [], 0
    while got < n:
        chunk = yield from read(sock, n - got)
        if not chunk:
            raise EOFError(f"end of stream after {got} of {n} bytes")
        parts.append(chunk)
        got += len(chunk)
        yield True
    return b"".join(parts)


def drain(sock: TsorSocket, max_bytes: int = 65536) -> Generator[bool, None, int]:
    """Read to end-of-stream, discarding; returns the byte count."""
    total = 0
    while True:
        chunk = yield from read(sock, max_bytes)
        if not chunk:
            return total
        total += len(chunk)
        yield True
