"""Host-to-storage streaming of checkpoint shards.

Chunks are written to their shard file as soon as they land in the host
buffer, so the device-to-host and host-to-storage links work in parallel.
When a segment is sealed (all of its copies are done) the header carrying the
payload checksums is written at offset 0, the file is synced and only then is
the segment released back to the pool.
"""
from __future__ import annotations

import enum
import errno
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .buffer_pool import HostBufferPool, Segment, SegmentState
from .errors import IOFailure, SimulatedCrash, StorageFull
from .fileformat import CheckpointFileHeader, RollingChecksum, write_header
from .transfer import ChunkNotice, ThrottledChannel

log = logging.getLogger(__name__)

DEFAULT_PER_WRITER_CAP = 5e9  # bytes/s


class FlushState(enum.Enum):
    WAITING = "waiting"
    WRITING = "writing"
    PERSISTED = "persisted"
    FAILED = "failed"


@dataclass(eq=False)
class FlushTask:
    """One shard file fed from one buffer segment.

    Payload byte ``i`` of the segment lands at file offset ``header_length + i``.
    """

    path: str
    header: CheckpointFileHeader
    owner: object = None  # ticket or any object exposing ``failed``
    state: FlushState = FlushState.WAITING
    segment: Optional[Segment] = None
    written: int = 0
    _fp: object = field(default=None, repr=False)
    _checksums: Dict[str, RollingChecksum] = field(default_factory=dict, repr=False)

    @property
    def base(self) -> int:
        return self.header.header_length

    @property
    def payload_length(self) -> int:
        return self.header.payload_end - self.base


@dataclass(frozen=True)
class Marker:
    """Queue item run on the flush worker after everything queued before it."""

    callback: Callable[[], None]


FaultHook = Callable[[str, int, int], None]


class FlushPipeline:
    def __init__(self, pool: Optional[HostBufferPool] = None, channel: Optional[ThrottledChannel] = None,
                 fsync: bool = True, fault: Optional[FaultHook] = None, name: str = "flush"):
        self.pool = pool
        self.channel = channel
        self.fsync = fsync
        self.fault = fault
        self.errors: List[BaseException] = []
        self.crashed = False
        self.bytes_written = 0
        self.persisted: List[FlushTask] = []
        self._on_persisted: List[Callable[[FlushTask], None]] = []
        self._on_failed: List[Callable[[FlushTask, BaseException], None]] = []
        self._queue: "queue.Queue" = queue.Queue()
        self._closed = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def on_persisted(self, cb: Callable[[FlushTask], None]) -> None:
        self._on_persisted.append(cb)

    def on_failed(self, cb: Callable[[FlushTask, BaseException], None]) -> None:
        self._on_failed.append(cb)

    # -- producer side -------------------------------------------------
    def enqueue_flush(self, notice: ChunkNotice) -> None:
        """Accept a resident chunk (or a segment seal) for writing."""
        self._queue.put(notice)

    def enqueue_marker(self, callback: Callable[[], None]) -> None:
        self._queue.put(Marker(callback))

    def drain(self, timeout: Optional[float] = None) -> None:
        """Block until everything queued so far has been handled.

        Re-raises the first storage error seen, or SimulatedCrash if the
        pipeline died.
        """
        done = threading.Event()
        self._queue.put(Marker(done.set))
        if not done.wait(timeout):
            raise TimeoutError("flush pipeline did not drain in time")
        if self.crashed:
            raise SimulatedCrash("flush pipeline crashed")
        if self.errors:
            raise self.errors[0]

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        self._thread.join()

    # -- worker --------------------------------------------------------
    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            if isinstance(item, Marker):
                try:
                    item.callback()
                except Exception:
                    log.exception("flush marker callback failed")
                continue
            if self.crashed:
                # a dead process writes nothing and frees nothing
                continue
            try:
                self._handle(item)
            except SimulatedCrash:
                log.info("flush pipeline crashed (injected)")
                self.crashed = True
                if self.pool is not None:
                    self.pool.close()

    def _handle(self, notice: ChunkNotice) -> None:
        task: FlushTask = notice.segment.tag
        if task is None:
            raise RuntimeError("segment has no flush task attached")
        task.segment = notice.segment
        owner_failed = getattr(task.owner, "failed", False)
        if notice.final:
            if notice.failed or owner_failed or task.state is FlushState.FAILED:
                self._abandon(task, None)
                return
            self._seal(task)
            return
        if owner_failed or task.state is FlushState.FAILED:
            return
        try:
            self._write_chunk(task, notice.start, notice.end)
        except (IOFailure, OSError) as exc:
            err = _wrap_oserror(exc, task.path)
            self._fail(task, err)

    def _open(self, task: FlushTask):
        os.makedirs(os.path.dirname(task.path) or ".", exist_ok=True)
        fp = open(task.path, "wb")
        fp.truncate(task.header.payload_end)
        task._fp = fp
        task.state = FlushState.WRITING
        return fp

    def _check_fault(self, path, offset, length):
        if self.fault is not None:
            self.fault(path, offset, length)

    def _write_chunk(self, task: FlushTask, start: int, end: int) -> None:
        fp = task._fp or self._open(task)
        data = task.segment.view[start:end]
        self._check_fault(task.path, task.base + start, end - start)

        def do_write():
            fp.seek(task.base + start)
            fp.write(data)

        if self.channel is not None:
            self.channel.transfer(end - start, do_write)
        else:
            do_write()
        self._update_checksums(task, start, end, data)
        task.written += end - start
        self.bytes_written += end - start

    def _update_checksums(self, task: FlushTask, start: int, end: int, data) -> None:
        # chunks of a segment arrive in order, so per-entry running checksums work
        for e in task.header.entries:
            lo = max(start, e.offset - task.base)
            hi = min(end, e.offset - task.base + e.length)
            if lo < hi:
                task._checksums.setdefault(e.key, RollingChecksum()).update(data[lo - start:hi - start])

    def _seal(self, task: FlushTask) -> None:
        seg = task.segment
        if seg.state is SegmentState.FILLED and self.pool is not None:
            self.pool.begin_flush(seg)
        try:
            if task.written != task.payload_length:
                raise IOFailure(f"{task.path}: wrote {task.written} of {task.payload_length} payload bytes")
            fp = task._fp or self._open(task)
            self._check_fault(task.path, 0, task.base)
            sums = {e.key: task._checksums.get(e.key, RollingChecksum()).value for e in task.header.entries}
            task.header = task.header.with_checksums(sums)
            write_header(fp, task.header)
            fp.flush()
            if self.fsync:
                os.fsync(fp.fileno())
            fp.close()
            task._fp = None
        except (IOFailure, OSError) as exc:
            self._fail(task, _wrap_oserror(exc, task.path))
            self._abandon(task, None)
            return
        task.state = FlushState.PERSISTED
        if self.pool is not None:
            self.pool.release(seg)
        self.persisted.append(task)
        for cb in self._on_persisted:
            cb(task)

    def _fail(self, task: FlushTask, err: BaseException) -> None:
        if task.state is FlushState.FAILED:
            return
        task.state = FlushState.FAILED
        if task._fp is not None:
            try:
                task._fp.close()
            except OSError:
                pass
            task._fp = None
        self.errors.append(err)
        for cb in self._on_failed:
            cb(task, err)

    def _abandon(self, task: FlushTask, err) -> None:
        if err is not None:
            self._fail(task, err)
        elif task.state is not FlushState.FAILED:
            task.state = FlushState.FAILED
            if task._fp is not None:
                task._fp.close()
                task._fp = None
        seg = task.segment
        if self.pool is not None and seg is not None and seg.state is not SegmentState.FREE:
            self.pool.abandon(seg)


def _wrap_oserror(exc: BaseException, path: str) -> IOFailure:
    if isinstance(exc, IOFailure):
        return exc
    if isinstance(exc, OSError) and exc.errno in (errno.ENOSPC, errno.EDQUOT):
        return StorageFull(exc.errno, f"{path}: {exc.strerror}")
    return IOFailure(getattr(exc, "errno", None) or errno.EIO, f"{path}: {exc}")
