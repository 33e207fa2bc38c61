import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from lazyckpt.buffer_pool import GB, HostBufferPool, SegmentState
from lazyckpt.errors import EngineClosed, IllegalTransition, SizeExceedsCapacity, WaitTimeout

from poolcheck import check_invariants, concurrent_cycle, run_sequence


def test_first_reserve_at_offset_zero():
    pool = HostBufferPool(64 * GB, allocate=False)
    seg = pool.reserve(10 * GB)
    assert seg.offset == 0 and seg.length == 10 * GB and seg.state is SegmentState.RESERVED


def test_oversize_reserve_rejected():
    pool = HostBufferPool(100)
    with pytest.raises(SizeExceedsCapacity):
        pool.reserve(101)
    with pytest.raises(SizeExceedsCapacity):
        pool.try_reserve(101)


def test_wrap_waits_for_release():
    pool = HostBufferPool(4)
    first = pool.reserve(3)
    assert pool.try_reserve(3) is None
    result = {}

    def second():
        result["seg"] = pool.reserve(3, timeout=5)

    t = threading.Thread(target=second)
    t.start()
    time.sleep(0.05)
    assert t.is_alive()  # still waiting for space
    pool.mark_filled(first)
    pool.begin_flush(first)
    pool.release(first)
    t.join(5)
    assert result["seg"].offset == 0


def test_wrap_padding_is_accounted():
    pool = HostBufferPool(10)
    a = pool.reserve(4)
    b = pool.reserve(4)
    for s in (a,):
        pool.mark_filled(s)
        pool.begin_flush(s)
        pool.release(s)
    # 2 bytes left at the tail are too small: 3 bytes wrap to 0, skipping 2
    c = pool.try_reserve(3)
    assert c.offset == 0
    assert pool.used_bytes == 4 + 2 + 3
    check_invariants(pool, [b, c])
    for s in (b, c):
        pool.mark_filled(s)
        pool.begin_flush(s)
        pool.release(s)
    assert pool.used_bytes == 0 and pool.is_empty()


def test_lifecycle_order_enforced():
    pool = HostBufferPool(10)
    seg = pool.reserve(5)
    with pytest.raises(IllegalTransition):
        pool.release(seg)  # must flush first
    pool.mark_filled(seg)
    with pytest.raises(IllegalTransition):
        pool.mark_filled(seg)
    with pytest.raises(IllegalTransition):
        pool.release(seg)
    pool.begin_flush(seg)
    pool.release(seg)
    assert seg.state is SegmentState.FREE
    with pytest.raises(IllegalTransition):
        pool.release(seg)


def test_release_must_be_fifo():
    pool = HostBufferPool(10)
    a, b = pool.reserve(3), pool.reserve(3)
    for s in (a, b):
        pool.mark_filled(s)
        pool.begin_flush(s)
    with pytest.raises(IllegalTransition):
        pool.release(b)
    pool.release(a)
    pool.release(b)
    assert pool.release_log == [a.seq, b.seq]


def test_abandon_frees_from_any_state():
    pool = HostBufferPool(10)
    a = pool.reserve(6)
    pool.abandon(a)
    assert pool.is_empty()
    with pytest.raises(IllegalTransition):
        pool.abandon(a)


def test_wait_timeout_without_progress():
    pool = HostBufferPool(4)
    pool.reserve(3)
    t0 = time.monotonic()
    with pytest.raises(WaitTimeout):
        pool.reserve(3, timeout=0.05)
    assert time.monotonic() - t0 < 1.0


def test_close_wakes_waiters():
    pool = HostBufferPool(4)
    pool.reserve(3)
    errors = []

    def waiter():
        try:
            pool.reserve(3)
        except EngineClosed as exc:
            errors.append(exc)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.02)
    pool.close()
    t.join(2)
    assert not t.is_alive() and errors


def test_reuse_beyond_capacity():
    pool = HostBufferPool(100)
    total = 0
    for i in range(50):
        seg = pool.reserve(37)
        seg.view[:] = bytes([i % 256]) * 37
        pool.mark_filled(seg)
        pool.begin_flush(seg)
        pool.release(seg)
        total += 37
    assert total > 10 * pool.capacity_bytes


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_random_sequences_hold_invariants(seed):
    run_sequence(seed)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=30), st.integers(20, 60))
def test_segment_views_do_not_alias(sizes, cap):
    pool = HostBufferPool(cap)
    live = []
    for i, n in enumerate(sizes):
        seg = pool.try_reserve(n)
        while seg is None:
            old = live.pop(0)
            assert bytes(old.view) == bytes([old.seq % 251]) * old.length
            pool.mark_filled(old)
            pool.begin_flush(old)
            pool.release(old)
            seg = pool.try_reserve(n)
        seg.view[:] = bytes([seg.seq % 251]) * n
        live.append(seg)
    for s in live:
        assert bytes(s.view) == bytes([s.seq % 251]) * s.length


@pytest.mark.parametrize("seed", range(5))
def test_concurrent_producer_consumer(seed):
    log = concurrent_cycle(seed)
    assert log == sorted(log) and len(log) == 200
