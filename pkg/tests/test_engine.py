import os
import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from lazyckpt.consolidation import CommitStatus, Consolidator, Manifest, MANIFEST_NAME
from lazyckpt.engine import (
    META_KEY,
    Engine,
    LocalCluster,
    TicketStatus,
    decode_tree,
    encode_tree,
    flatten,
    materialize,
    restore,
)
from lazyckpt.errors import DuplicatePath, NotCommitted, SimulatedCrash, SizeExceedsCapacity, TornSnapshot
from lazyckpt.harness import first_divergence, mutate, random_states
from lazyckpt.topology import CheckpointPlan, ModelSpec, ParallelTopology, RankCoord, plan_checkpoint
from lazyckpt.transfer import DeviceRegion

R0 = RankCoord(0, 0, 0)
MB = 10**6


def single_rank(param_count=50_000, layers=2):
    topo = ParallelTopology.from_degrees(1, 1, 1)
    return plan_checkpoint(topo, ModelSpec(param_count, layers, 64), step=1)


def states_for(plan, seed=0, large=4096):
    return random_states(random.Random(seed), plan, large)


# -- flattening ----------------------------------------------------------
def test_flatten_example():
    tree = {"layer1": {"w": DeviceRegion(bytes(4 * MB)), "b": DeviceRegion(bytes(4000))},
            "opt": {"m": DeviceRegion(bytes(4 * MB))}}
    flat = flatten(tree)
    assert [k for k, _ in flat] == [META_KEY, "layer1/w", "opt/m"]
    meta, large = encode_tree(tree)
    assert len(large) == 2
    assert sum(r.nbytes for _, r in large) == 8 * MB


def test_flatten_empty_tree():
    assert flatten({}) == []


def test_flatten_is_order_independent():
    a = {"x": b"1", "y": {"p": b"22", "q": DeviceRegion(bytes(2 << 20))}}
    b = {"y": {"q": DeviceRegion(bytes(2 << 20)), "p": b"22"}, "x": b"1"}
    fa, fb = flatten(a), flatten(b)
    assert [k for k, _ in fa] == [k for k, _ in fb]
    assert fa[0][1] == fb[0][1]


@pytest.mark.parametrize("tree", [
    {META_KEY: b"x"},
    {"": b"x"},
    {"a/b": b"x", "a": {"b": b"y"}},
])
def test_duplicate_or_reserved_paths(tree):
    with pytest.raises(DuplicatePath):
        flatten(tree)


def test_unsupported_leaf():
    with pytest.raises(TypeError):
        flatten({"x": 3})


leaf = st.one_of(st.binary(max_size=64), st.binary(max_size=64).map(DeviceRegion))
trees = st.recursive(st.dictionaries(st.text("abc", min_size=1, max_size=3), leaf, max_size=4),
                     lambda inner: st.dictionaries(st.text("abc", min_size=1, max_size=3), inner, max_size=3),
                     max_leaves=12)


@settings(max_examples=150, deadline=None)
@given(trees, st.integers(0, 80))
def test_encode_decode_round_trip(tree, threshold):
    meta, large = encode_tree(tree, threshold)
    payloads = {p: r.read() for p, r in large}
    assert materialize(decode_tree(meta, payloads)) == materialize(tree)


# -- engine ----------------------------------------------------------------
def test_capture_commit_restore(root, small_topology, small_model):
    plan = plan_checkpoint(small_topology, small_model, step=3)
    states = states_for(plan)
    expected = {r: materialize(s) for r, s in states.items()}
    with LocalCluster(root, small_topology, fsync=False, threshold=4096, chunk_quantum=8192) as cluster:
        tickets = cluster.capture(plan, states)
        cluster.update_barrier(tickets)
        mutate(random.Random(1), states)  # safe after the barrier
        rec = cluster.wait_committed(3, timeout=10)
        assert rec.status is CommitStatus.COMMITTED
        assert all(t.status is TicketStatus.PERSISTED for t in tickets.values())
        restored = cluster.restore(3)
    for r in expected:
        assert first_divergence(expected[r], materialize(restored[r])) is None
    assert Manifest.load(os.path.join(root, MANIFEST_NAME)).latest_committed() == 3


def test_restore_uncommitted_step(root, small_topology, small_model):
    plan = plan_checkpoint(small_topology, small_model, step=1)
    with LocalCluster(root, small_topology, fsync=False) as cluster:
        cluster.update_barrier(cluster.capture(plan, states_for(plan)))
        cluster.wait_committed(1, timeout=10)
    with pytest.raises(NotCommitted):
        restore(root, 2, R0)


def test_capture_does_not_wait_for_copies(root):
    plan = single_rank(param_count=200_000)  # 2.8 MB at 20 MB/s: ~0.14 s of copying
    cons = Consolidator(root, plan.topology)
    eng = Engine(root, R0, cons, d2h_bandwidth=20e6, chunk_quantum=64 << 10, fsync=False, threshold=4096)
    try:
        t0 = time.perf_counter()
        ticket = eng.capture(plan, states_for(plan)[R0])
        assert time.perf_counter() - t0 < 0.05
        assert ticket.status is TicketStatus.IN_FLIGHT
        eng.update_barrier(ticket)
        assert ticket.barrier_wait > 0.05
        assert eng.wait_persisted(ticket, timeout=10) is TicketStatus.PERSISTED
    finally:
        eng.close()


def test_barrier_is_idempotent(root):
    plan = single_rank()
    eng = Engine(root, R0, Consolidator(root, plan.topology), fsync=False)
    try:
        ticket = eng.capture(plan, states_for(plan)[R0])
        eng.update_barrier(ticket)
        blocked = eng.blocked_barrier_s
        eng.update_barrier(ticket)
        eng.update_barrier(ticket)
        assert eng.blocked_barrier_s == blocked
    finally:
        eng.close()


def test_mutation_before_barrier_is_torn(root):
    plan = single_rank(param_count=200_000)
    cons = Consolidator(root, plan.topology)
    eng = Engine(root, R0, cons, d2h_bandwidth=10e6, chunk_quantum=32 << 10, fsync=False, threshold=4096)
    try:
        states = states_for(plan)
        ticket = eng.capture(plan, states[R0])
        mutate(random.Random(2), states)
        with pytest.raises(TornSnapshot):
            eng.update_barrier(ticket)
        eng.drain(timeout=10)
        assert ticket.status is TicketStatus.FAILED
        assert cons.wait_decided(1, timeout=10).status is CommitStatus.ABORTED
        assert cons.latest_committed() is None
    finally:
        eng.close()


def test_empty_plan_is_resident_immediately(root):
    topo = ParallelTopology.from_degrees(1, 1, 1)
    plan = CheckpointPlan(5, topo, ModelSpec(0, 1, 1), {R0: []})
    cons = Consolidator(root, topo)
    eng = Engine(root, R0, cons, fsync=False)
    try:
        ticket = eng.capture(plan, {})
        assert ticket.status in (TicketStatus.HOST_RESIDENT, TicketStatus.PERSISTED)
        eng.update_barrier(ticket)
        assert ticket.barrier_wait < 0.01
        assert cons.wait_decided(5, timeout=5).status is CommitStatus.COMMITTED
    finally:
        eng.close()


def test_size_exceeds_capacity_is_synchronous(root):
    plan = single_rank(param_count=100_000)
    eng = Engine(root, R0, None, buffer_capacity=1 << 16, fsync=False)
    try:
        with pytest.raises(SizeExceedsCapacity):
            eng.capture(plan, states_for(plan)[R0])
        assert eng.pool.is_empty()
    finally:
        eng.close()


def test_state_must_match_plan(root):
    plan = single_rank()
    eng = Engine(root, R0, None, fsync=False)
    try:
        with pytest.raises(ValueError):
            eng.capture(plan, {"bogus": b"x"})
        good = states_for(plan)[R0]
        name = next(iter(good))
        good[name] = {"x": b"short"}
        with pytest.raises(ValueError):
            eng.capture(plan, good)
    finally:
        eng.close()


def test_backpressure_with_small_buffer(root):
    # two checkpoints of ~1.4 MB through a 2 MiB buffer draining at 10 MB/s
    plan = single_rank(param_count=100_000, layers=4)
    cons = Consolidator(root, plan.topology)
    eng = Engine(root, R0, cons, buffer_capacity=2 << 20, storage_bandwidth=10e6, chunk_quantum=64 << 10,
                 fsync=False, threshold=4096)
    try:
        states = states_for(plan)
        t1 = eng.capture(plan, states[R0])
        eng.update_barrier(t1)
        mutate(random.Random(3), states)
        t2 = eng.capture(plan.for_step(2), states[R0])
        eng.update_barrier(t2)
        eng.drain(timeout=20)
        assert t2.barrier_wait > 0.02  # waited for the first checkpoint to free space
        assert cons.wait_decided(2, timeout=10).status is CommitStatus.COMMITTED
        assert eng.pool.is_empty()
    finally:
        eng.close()


def test_votes_are_cast_off_the_trainer_thread(root, small_topology, small_model):
    plan = plan_checkpoint(small_topology, small_model, step=1)
    with LocalCluster(root, small_topology, fsync=False) as cluster:
        cluster.update_barrier(cluster.capture(plan, states_for(plan)))
        cluster.wait_committed(1, timeout=10)
        threads = cluster.consolidator.vote_threads
    assert len(threads) == small_topology.world_size
    assert threading.current_thread().name not in threads


def test_crash_mid_flush_never_commits(root, small_topology, small_model):
    calls = []

    def die(path, offset, length):
        calls.append(path)
        if len(calls) == 2:
            raise SimulatedCrash("kill")

    plan = plan_checkpoint(small_topology, small_model, step=1)
    cluster = LocalCluster(root, small_topology, commit_timeout=0.5, fault_hooks={R0: die}, fsync=False,
                           threshold=4096, chunk_quantum=4096)
    try:
        cluster.update_barrier(cluster.capture(plan, states_for(plan)))
        for r, e in cluster.engines.items():
            if r != R0:
                e.drain(timeout=10)
        rec = cluster.wait_committed(1, timeout=5)
        assert rec.status is CommitStatus.ABORTED
        assert cluster.engines[R0].flush.crashed
    finally:
        cluster.engines[R0].crash()
        cluster.close()
    with pytest.raises(NotCommitted):
        restore(root, 1, R0)


def test_closed_engine_rejects_capture(root):
    from lazyckpt.errors import EngineClosed

    plan = single_rank()
    eng = Engine(root, R0, None, fsync=False)
    eng.close()
    with pytest.raises(EngineClosed):
        eng.capture(plan, states_for(plan)[R0])
