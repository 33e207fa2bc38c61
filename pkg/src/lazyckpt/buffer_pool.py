"""Fixed-capacity circular host buffer.

Stands in for the pinned host region that is allocated once and reused for
every checkpoint. Segments are carved contiguously at the tail; a request that
does not fit before the end of the region wraps to offset 0 and the skipped
tail bytes count as padding until the segment before them is released.
Segments must be released in the order they were reserved.
"""
from __future__ import annotations

import enum
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Optional

from .errors import EngineClosed, IllegalTransition, SizeExceedsCapacity, WaitTimeout

GB = 10**9
DEFAULT_CAPACITY = 16 * GB  # 64 GB per node shared by 4 GPU processes


class SegmentState(enum.Enum):
    RESERVED = "reserved"
    FILLED = "filled"
    FLUSHING = "flushing"
    FREE = "free"


_NEXT = {
    SegmentState.RESERVED: SegmentState.FILLED,
    SegmentState.FILLED: SegmentState.FLUSHING,
    SegmentState.FLUSHING: SegmentState.FREE,
}


@dataclass(eq=False)
class Segment:
    offset: int
    length: int
    owner_ticket: Any = None
    state: SegmentState = SegmentState.RESERVED
    seq: int = 0
    # tail bytes skipped after this segment when the next one wrapped to 0
    padding: int = field(default=0, repr=False)
    view: Optional[memoryview] = field(default=None, repr=False)
    tag: Any = field(default=None, repr=False)  # consumer bookkeeping (e.g. target file)


class HostBufferPool:
    def __init__(self, capacity_bytes: int, wait_timeout: Optional[float] = None, allocate: bool = True):
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be > 0")
        self.capacity_bytes = capacity_bytes
        self.wait_timeout = wait_timeout
        self.memory = memoryview(bytearray(capacity_bytes)) if allocate else None
        self._cond = threading.Condition()
        self._live: Deque[Segment] = deque()
        self._tail = 0
        self._used = 0  # live lengths plus wrap padding
        self._seq = 0
        self._releases = 0
        self._closed = False
        self.release_log: list = []  # seq numbers in release order

    # -- introspection -------------------------------------------------
    @property
    def head(self) -> int:
        with self._cond:
            return self._live[0].offset if self._live else self._tail

    @property
    def tail(self) -> int:
        return self._tail

    @property
    def live_bytes(self) -> int:
        with self._cond:
            return sum(s.length for s in self._live)

    @property
    def used_bytes(self) -> int:
        return self._used

    @property
    def live_segments(self) -> int:
        return len(self._live)

    def is_empty(self) -> bool:
        with self._cond:
            return not self._live

    # -- allocation ----------------------------------------------------
    def _place(self, size: int):
        """Return (offset, padding) for a contiguous region, or None."""
        cap = self.capacity_bytes
        if not self._live:
            return 0, 0
        head = self._live[0].offset
        tail = self._tail
        if tail > head:
            if cap - tail >= size:
                return tail, 0
            if head >= size:
                return 0, cap - tail
            return None
        # tail <= head with live data: free gap is [tail, head)
        if head - tail >= size:
            return tail, 0
        return None

    def try_reserve(self, size: int, ticket: Any = None) -> Optional[Segment]:
        if size <= 0:
            raise ValueError("segment length must be > 0")
        if size > self.capacity_bytes:
            raise SizeExceedsCapacity(f"request of {size} bytes exceeds pool capacity {self.capacity_bytes}")
        with self._cond:
            return self._try_reserve_locked(size, ticket)

    def _try_reserve_locked(self, size, ticket):
        spot = self._place(size)
        if spot is None:
            return None
        offset, padding = spot
        self._seq += 1
        seg = Segment(offset, size, ticket, seq=self._seq)
        if padding:
            self._live[-1].padding = padding
        if self.memory is not None:
            seg.view = self.memory[offset:offset + size]
        self._live.append(seg)
        self._tail = (offset + size) % self.capacity_bytes
        self._used += size + padding
        assert self._used <= self.capacity_bytes
        return seg

    def reserve(self, size: int, ticket: Any = None, timeout: Optional[float] = None) -> Segment:
        """Reserve ``size`` contiguous bytes, waiting for releases if needed.

        ``timeout`` (default: the pool's ``wait_timeout``) bounds how long we
        wait without observing any release; None waits forever.
        """
        if size <= 0:
            raise ValueError("segment length must be > 0")
        if size > self.capacity_bytes:
            raise SizeExceedsCapacity(f"request of {size} bytes exceeds pool capacity {self.capacity_bytes}")
        timeout = self.wait_timeout if timeout is None else timeout
        with self._cond:
            while True:
                seg = self._try_reserve_locked(size, ticket)
                if seg is not None:
                    return seg
                if self._closed:
                    raise EngineClosed("buffer pool closed while waiting for space")
                seen = self._releases
                deadline = None if timeout is None else time.monotonic() + timeout
                while self._releases == seen and not self._closed:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise WaitTimeout(
                            f"no buffer space released within {timeout:.3f}s "
                            f"(need {size}, used {self._used}/{self.capacity_bytes})"
                        )
                    self._cond.wait(remaining)

    def close(self) -> None:
        """Wake every waiter; pending and future waits raise EngineClosed."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- lifecycle -----------------------------------------------------
    def _advance(self, seg: Segment, expected: SegmentState) -> None:
        if seg.state is not expected:
            raise IllegalTransition(f"segment #{seg.seq} is {seg.state.value}, expected {expected.value}")
        seg.state = _NEXT[expected]

    def mark_filled(self, seg: Segment) -> None:
        with self._cond:
            self._advance(seg, SegmentState.RESERVED)

    def begin_flush(self, seg: Segment) -> None:
        with self._cond:
            self._advance(seg, SegmentState.FILLED)

    def release(self, seg: Segment) -> None:
        with self._cond:
            if seg.state is not SegmentState.FLUSHING:
                raise IllegalTransition(f"segment #{seg.seq} is {seg.state.value}; only flushing segments can be released")
            if not self._live or self._live[0] is not seg:
                raise IllegalTransition(f"segment #{seg.seq} released out of FIFO order")
            self._advance(seg, SegmentState.FLUSHING)
            self._free_head_locked()

    def abandon(self, seg: Segment) -> None:
        """Free a segment whose payload will never be persisted (failed ticket).

        Same FIFO rule as ``release`` but legal from any live state.
        """
        with self._cond:
            if seg.state is SegmentState.FREE:
                raise IllegalTransition(f"segment #{seg.seq} already free")
            if not self._live or self._live[0] is not seg:
                raise IllegalTransition(f"segment #{seg.seq} released out of FIFO order")
            seg.state = SegmentState.FREE
            self._free_head_locked()

    def _free_head_locked(self):
        seg = self._live.popleft()
        self._used -= seg.length + seg.padding
        seg.view = None
        if not self._live:
            self._used = 0
            self._tail = 0
        self._releases += 1
        self.release_log.append(seg.seq)
        self._cond.notify_all()
