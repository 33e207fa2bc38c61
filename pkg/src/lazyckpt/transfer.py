"""Device-to-host copies over an emulated, bandwidth-limited link.

``DeviceRegion`` plays the role of a GPU tensor: a byte buffer plus a version
counter that is bumped on every mutation. A ``CopyTask`` remembers the version
it was submitted against; if the version moved by the time the copy finishes
the task is marked torn, so a snapshot can never silently mix two training
steps.
"""
from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .buffer_pool import HostBufferPool, Segment
from .errors import EngineClosed, TornSnapshot

log = logging.getLogger(__name__)

DEFAULT_D2H_BANDWIDTH = 25e9  # pinned device-to-host, bytes/s
DEFAULT_CHUNK_QUANTUM = 64 * 2**20


class DeviceRegion:
    """Emulated device memory; every mutation increments ``version``."""

    def __init__(self, data=b"", *, size: Optional[int] = None, readonly: bool = False):
        if size is not None:
            data = bytes(size)
        self._buf = bytearray(data)
        self.version = 0
        self.readonly = readonly
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._buf)

    def __repr__(self):
        return f"DeviceRegion({len(self._buf)} bytes, v{self.version})"

    @property
    def nbytes(self) -> int:
        return len(self._buf)

    def write(self, offset: int, data) -> None:
        if self.readonly:
            raise TypeError("region is read-only")
        if offset < 0 or offset + len(data) > len(self._buf):
            raise IndexError("write outside region")
        with self._lock:
            self.version += 1
            self._buf[offset:offset + len(data)] = data

    def fill(self, data) -> None:
        if len(data) != len(self._buf):
            raise ValueError("fill() needs a full-size payload")
        self.write(0, data)

    def read(self, offset: int = 0, length: Optional[int] = None) -> bytes:
        with self._lock:
            end = len(self._buf) if length is None else offset + length
            return bytes(self._buf[offset:end])

    def copy_into(self, offset: int, length: int, dest: memoryview) -> int:
        """Copy a slice into ``dest`` atomically w.r.t. writers; returns the version seen."""
        with self._lock:
            dest[:length] = self._buf[offset:offset + length]
            return self.version


class ThrottledChannel:
    """Paces transfers so sustained throughput never exceeds ``bandwidth``.

    Each slice reserves the link until ``start + nbytes / bandwidth`` and the
    caller sleeps up to that deadline, so back-to-back slices queue FIFO.
    ``bandwidth=None`` disables pacing.
    """

    def __init__(self, bandwidth: Optional[float] = DEFAULT_D2H_BANDWIDTH,
                 chunk_quantum: int = DEFAULT_CHUNK_QUANTUM,
                 clock: Callable[[], float] = time.perf_counter,
                 sleep: Callable[[float], None] = time.sleep):
        if bandwidth is not None and bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if chunk_quantum <= 0:
            raise ValueError("chunk_quantum must be > 0")
        self.bandwidth = bandwidth
        self.chunk_quantum = chunk_quantum
        self._clock = clock
        self._sleep = sleep
        self._busy_until = 0.0
        self.bytes_moved = 0
        self._lock = threading.Lock()

    def transfer(self, nbytes: int, action: Optional[Callable[[], None]] = None) -> float:
        """Run ``action`` (the actual copy) and block until the link frees up."""
        with self._lock:
            now = self._clock()
            start = max(now, self._busy_until)
            deadline = start + (nbytes / self.bandwidth if self.bandwidth else 0.0)
            self._busy_until = deadline
        if action is not None:
            action()
        delay = deadline - self._clock()
        if delay > 0:
            self._sleep(delay)
        with self._lock:
            self.bytes_moved += nbytes
        return deadline


class CopyState(enum.Enum):
    QUEUED = "queued"
    COPYING = "copying"
    DONE = "done"
    TORN = "torn"


@dataclass(eq=False)
class CopyTask:
    key: str
    source: DeviceRegion
    src_offset: int = 0
    length: Optional[int] = None
    destination: Optional[Segment] = None
    dest_offset: int = 0
    captured_version: int = -1
    state: CopyState = CopyState.QUEUED
    shard: object = None

    def __post_init__(self):
        if self.length is None:
            self.length = len(self.source) - self.src_offset


@dataclass(frozen=True)
class ChunkNotice:
    """A slice of a segment that is now resident in host memory.

    ``final`` notices carry no bytes: they announce that the segment has been
    marked Filled and may be sealed by the consumer.
    """

    ticket: object
    segment: Segment
    start: int  # offset within the segment
    end: int
    final: bool = False
    failed: bool = False  # the copy batch failed; consumer should abandon


@dataclass(eq=False)
class SegmentJob:
    """Everything destined for one segment: an inline prefix plus copies.

    Used by ``submit_segments`` so reservation happens on the worker and the
    submitting (trainer) thread never waits for buffer space.
    """

    size: int
    tasks: List[CopyTask]
    prefix: bytes = b""
    segment: Optional[Segment] = None
    tag: object = None


@dataclass(eq=False)
class _Batch:
    ticket: object
    tasks: List[CopyTask]
    jobs: Optional[List[SegmentJob]] = None
    done: threading.Event = field(default_factory=threading.Event)
    error: Optional[BaseException] = None
    torn: List[CopyTask] = field(default_factory=list)


class TransferEngine:
    """One copy worker per rank draining a FIFO of ticket batches."""

    def __init__(self, channel: Optional[ThrottledChannel] = None, pool: Optional[HostBufferPool] = None,
                 name: str = "d2h"):
        self.channel = channel or ThrottledChannel()
        self.pool = pool
        self._queue: "queue.Queue[Optional[_Batch]]" = queue.Queue()
        self._batches: Dict[object, _Batch] = {}
        self._listeners: List[Callable[[ChunkNotice], None]] = []
        self._done_listeners: List[Callable[[object, Optional[BaseException], List[CopyTask]], None]] = []
        self._closed = False
        self._abort = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()
        self.bytes_submitted = 0
        self.bytes_copied = 0

    def notify_chunk_resident(self, callback: Callable[[ChunkNotice], None]) -> None:
        """Register a callback fired on the worker as each quantum lands."""
        self._listeners.append(callback)

    def on_batch_done(self, callback) -> None:
        """Register ``callback(ticket, error, torn_tasks)``, run on the worker
        after the last chunk notice of a batch has been emitted."""
        self._done_listeners.append(callback)

    def submit_copies(self, ticket, tasks: List[CopyTask]) -> None:
        """Queue ``tasks`` (destinations already reserved) and return at once.

        Versions are captured here, on the caller's thread, so any mutation
        after this call is detected.
        """
        self._submit(_Batch(ticket, list(tasks)))

    def submit_segments(self, ticket, jobs: List[SegmentJob]) -> None:
        """Like ``submit_copies`` but each job's segment is reserved lazily,
        in order, on the worker thread (may wait for flushes to free space)."""
        tasks = [t for j in jobs for t in j.tasks]
        self._submit(_Batch(ticket, tasks, jobs=list(jobs)))

    def _submit(self, batch: _Batch) -> None:
        if self._closed:
            raise EngineClosed("transfer engine is closed")
        for t in batch.tasks:
            t.captured_version = t.source.version
            t.state = CopyState.QUEUED
            self.bytes_submitted += t.length
        self._batches[batch.ticket] = batch
        if not batch.tasks and not batch.jobs:
            batch.done.set()
            return
        self._queue.put(batch)

    def wait_pending(self, ticket, timeout: Optional[float] = None) -> List[CopyTask]:
        """Block until every copy of ``ticket`` is done.

        Raises TornSnapshot if any source changed while being copied.
        """
        batch = self._batches.get(ticket)
        if batch is None:
            raise KeyError(f"unknown ticket {ticket!r}")
        if not batch.done.wait(timeout):
            raise TimeoutError(f"copies for {ticket!r} still pending")
        if batch.error is not None:
            raise batch.error
        if batch.torn:
            names = ", ".join(t.key for t in batch.torn[:5])
            raise TornSnapshot(f"{len(batch.torn)} region(s) mutated during snapshot copy: {names}")
        return batch.tasks

    def is_done(self, ticket) -> bool:
        batch = self._batches.get(ticket)
        return batch is not None and batch.done.is_set()

    def forget(self, ticket) -> None:
        self._batches.pop(ticket, None)

    def close(self, wait: bool = True, abort: bool = False) -> None:
        if abort:
            self._abort.set()
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        if wait:
            self._thread.join()

    # -- worker --------------------------------------------------------
    def _emit(self, notice: ChunkNotice) -> None:
        for cb in self._listeners:
            cb(notice)

    def _run(self) -> None:
        while True:
            batch = self._queue.get()
            if batch is None:
                return
            if self._abort.is_set():
                batch.error = EngineClosed("transfer engine aborted")
                batch.done.set()
                continue
            try:
                if batch.jobs is not None:
                    self._run_jobs(batch)
                else:
                    self._run_tasks(batch)
            except BaseException as exc:  # surfaced through wait_pending
                log.debug("copy batch %r failed: %s", batch.ticket, exc)
                batch.error = exc
            finally:
                for cb in self._done_listeners:
                    try:
                        cb(batch.ticket, batch.error, batch.torn)
                    except Exception:  # a listener bug must not kill the worker
                        log.exception("batch-done listener failed")
                batch.done.set()

    def _run_tasks(self, batch: _Batch) -> None:
        remaining: Dict[int, int] = {}
        for t in batch.tasks:
            remaining[id(t.destination)] = remaining.get(id(t.destination), 0) + 1
        for task in batch.tasks:
            self._copy(batch, task)
            remaining[id(task.destination)] -= 1
            if remaining[id(task.destination)] == 0:
                self._seal(batch, task.destination)

    def _run_jobs(self, batch: _Batch) -> None:
        for job in batch.jobs:
            if self._abort.is_set():
                raise EngineClosed("transfer engine aborted")
            if self.pool is None:
                raise RuntimeError("submit_segments needs a buffer pool")
            seg = self.pool.reserve(job.size, batch.ticket)
            seg.tag = job.tag
            job.segment = seg
            try:
                if job.prefix:
                    seg.view[:len(job.prefix)] = job.prefix
                    self._emit(ChunkNotice(batch.ticket, seg, 0, len(job.prefix)))
                for task in job.tasks:
                    task.destination = seg
                    self._copy(batch, task)
            except BaseException:
                self._emit(ChunkNotice(batch.ticket, seg, seg.length, seg.length, final=True, failed=True))
                raise
            if any(t.state is CopyState.TORN for t in job.tasks):
                # a torn snapshot must never reach storage as a valid file
                self._emit(ChunkNotice(batch.ticket, seg, seg.length, seg.length, final=True, failed=True))
                continue
            self._seal(batch, seg)

    def _seal(self, batch: _Batch, seg: Segment) -> None:
        if self.pool is not None:
            self.pool.mark_filled(seg)
        self._emit(ChunkNotice(batch.ticket, seg, seg.length, seg.length, final=True))

    def _copy(self, batch: _Batch, task: CopyTask) -> None:
        seg = task.destination
        if seg is None or seg.view is None:
            raise RuntimeError(f"task {task.key!r} has no reserved destination")
        task.state = CopyState.COPYING
        quantum = self.channel.chunk_quantum
        torn = False
        pos = 0
        while True:
            n = min(quantum, task.length - pos)
            dst = seg.view[task.dest_offset + pos: task.dest_offset + pos + n]

            def do_copy(src=task.src_offset + pos, n=n, dst=dst):
                nonlocal torn
                if task.source.copy_into(src, n, dst) != task.captured_version:
                    torn = True

            self.channel.transfer(n, do_copy)
            pos += n
            self.bytes_copied += n
            notice = ChunkNotice(batch.ticket, seg, task.dest_offset + pos - n, task.dest_offset + pos)
            if pos >= task.length:
                # completion-time version check also catches writes after the last slice
                if torn or task.source.version != task.captured_version:
                    task.state = CopyState.TORN
                    batch.torn.append(task)
                else:
                    task.state = CopyState.DONE
                if n:
                    self._emit(notice)
                return
            self._emit(notice)
