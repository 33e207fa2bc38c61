"""Trainer-facing checkpoint engine.

A capture runs in three steps: the state tree is flattened into large regions
and a metadata blob, file headers are laid out, and one segment job per shard
is handed to the copy worker. ``capture`` returns immediately; the trainer
must call ``update_barrier`` before mutating any captured region. Flushes and
the commit vote carry on in the background.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

from .buffer_pool import HostBufferPool
from .consolidation import MANIFEST_NAME, Consolidator, Manifest, shard_relpath, step_dirname
from .errors import (
    DuplicatePath,
    EngineClosed,
    NotCommitted,
    SizeExceedsCapacity,
    TornSnapshot,
)
from .fileformat import CheckpointFileHeader, layout, read_checkpoint_file
from .flush import FaultHook, FlushPipeline, FlushState, FlushTask
from .topology import CheckpointPlan, ParallelTopology, RankCoord
from .transfer import (
    DEFAULT_CHUNK_QUANTUM,
    DEFAULT_D2H_BANDWIDTH,
    CopyTask,
    DeviceRegion,
    SegmentJob,
    ThrottledChannel,
    TransferEngine,
)

log = logging.getLogger(__name__)

LARGE_LEAF_THRESHOLD = 1 << 20
META_KEY = "__meta__"
ENGINE_BUFFER_CAPACITY = 256 << 20  # real host memory; the simulator models 16 GB
_META_LEN = struct.Struct("<I")

Leaf = Union[DeviceRegion, bytes, bytearray, memoryview]
StateTree = Mapping[str, object]


# -- flattening ---------------------------------------------------------
def _walk(tree, prefix, out, seen):
    if not tree and prefix:
        out.append((prefix, None))
        return
    for key in sorted(tree):
        if not isinstance(key, str):
            raise TypeError(f"state keys must be str, got {key!r}")
        if key == META_KEY or not key:
            raise DuplicatePath(f"reserved or empty key {key!r} under {prefix or '/'}")
        path = f"{prefix}/{key}" if prefix else key
        if path in seen:
            raise DuplicatePath(f"path {path!r} appears twice")
        seen.add(path)
        value = tree[key]
        if isinstance(value, Mapping):
            _walk(value, path, out, seen)
        elif isinstance(value, (DeviceRegion, bytes, bytearray, memoryview)):
            out.append((path, value))
        else:
            raise TypeError(f"unsupported leaf at {path!r}: {type(value).__name__}")


def leaf_size(value) -> int:
    return value.nbytes if isinstance(value, (DeviceRegion, memoryview)) else len(value)


def encode_tree(tree: StateTree, threshold: int = LARGE_LEAF_THRESHOLD) -> Tuple[bytes, List[Tuple[str, DeviceRegion]]]:
    """Split a tree into a metadata blob (structure + small leaves) and large regions."""
    leaves: List[Tuple[str, object]] = []
    _walk(tree, "", leaves, set())
    records, inline, large = [], [], []
    for path, value in leaves:
        if value is None:
            records.append({"path": path, "kind": "dict"})
            continue
        kind = "region" if isinstance(value, DeviceRegion) else "blob"
        size = leaf_size(value)
        small = size < threshold
        records.append({"path": path, "kind": kind, "size": size, "inline": small})
        if small:
            inline.append(value.read() if kind == "region" else bytes(value))
        elif kind == "region":
            large.append((path, value))
        else:
            large.append((path, DeviceRegion(bytes(value), readonly=True)))
    doc = json.dumps({"leaves": records}, separators=(",", ":"), sort_keys=True).encode()
    return _META_LEN.pack(len(doc)) + doc + b"".join(inline), large


def flatten(tree: StateTree, threshold: int = LARGE_LEAF_THRESHOLD) -> List[Tuple[str, object]]:
    """Deterministic depth-first list: metadata entry first, then large regions."""
    if not tree:
        return []
    meta, large = encode_tree(tree, threshold)
    return [(META_KEY, meta)] + large


def decode_tree(meta: bytes, payloads: Mapping[str, bytes]) -> dict:
    (n,) = _META_LEN.unpack_from(meta, 0)
    doc = json.loads(meta[_META_LEN.size:_META_LEN.size + n])
    pos = _META_LEN.size + n
    tree: dict = {}
    for rec in doc["leaves"]:
        *parents, last = rec["path"].split("/")
        node = tree
        for p in parents:
            node = node.setdefault(p, {})
        if rec["kind"] == "dict":
            node[last] = {}
            continue
        if rec["inline"]:
            data = bytes(meta[pos:pos + rec["size"]])
            pos += rec["size"]
        else:
            data = payloads[rec["path"]]
        node[last] = DeviceRegion(data) if rec["kind"] == "region" else data
    return tree


def materialize(tree) -> dict:
    """Deep copy of a tree with every leaf turned into plain bytes."""
    out = {}
    for k, v in tree.items():
        if isinstance(v, Mapping):
            out[k] = materialize(v)
        elif isinstance(v, DeviceRegion):
            out[k] = v.read()
        else:
            out[k] = bytes(v)
    return out


def tree_bytes(tree) -> int:
    total = 0
    for v in tree.values():
        total += tree_bytes(v) if isinstance(v, Mapping) else leaf_size(v)
    return total


# -- tickets -------------------------------------------------------------
class TicketStatus(enum.Enum):
    IN_FLIGHT = "in_flight"
    HOST_RESIDENT = "host_resident"
    PERSISTED = "persisted"
    FAILED = "failed"


@dataclass(eq=False)
class CaptureTicket:
    step: int
    rank: RankCoord
    tasks: List[CopyTask] = field(default_factory=list)
    headers: Dict[str, CheckpointFileHeader] = field(default_factory=dict)
    flushes: List[FlushTask] = field(default_factory=list)
    status: TicketStatus = TicketStatus.IN_FLIGHT
    error: Optional[BaseException] = None
    capture_latency: float = 0.0
    barrier_wait: float = 0.0
    barrier_done: bool = False
    resident: threading.Event = field(default_factory=threading.Event, repr=False)
    finished: threading.Event = field(default_factory=threading.Event, repr=False)

    @property
    def failed(self) -> bool:
        return self.status is TicketStatus.FAILED

    @property
    def nbytes(self) -> int:
        return sum(f.payload_length for f in self.flushes)

    def _fail(self, err: Optional[BaseException]) -> None:
        if self.status is TicketStatus.FAILED:
            return
        self.status = TicketStatus.FAILED
        if self.error is None:
            self.error = err
        self.resident.set()
        self.finished.set()


# -- engine --------------------------------------------------------------
class Engine:
    """Checkpoint engine for one rank (one emulated GPU process)."""

    def __init__(self, root: str, rank: RankCoord, consolidator: Optional[Consolidator] = None,
                 buffer_capacity: int = ENGINE_BUFFER_CAPACITY, d2h_bandwidth: Optional[float] = DEFAULT_D2H_BANDWIDTH,
                 storage_bandwidth: Optional[float] = None, chunk_quantum: int = DEFAULT_CHUNK_QUANTUM,
                 threshold: int = LARGE_LEAF_THRESHOLD, fsync: bool = True, fault: Optional[FaultHook] = None,
                 wait_timeout: Optional[float] = None, check_sizes: bool = True):
        self.root = os.fspath(root)
        self.rank = RankCoord(*rank)
        self.consolidator = consolidator
        self.threshold = threshold
        self.check_sizes = check_sizes
        self.pool = HostBufferPool(buffer_capacity, wait_timeout=wait_timeout)
        d2h = ThrottledChannel(d2h_bandwidth, chunk_quantum)
        storage = ThrottledChannel(storage_bandwidth, chunk_quantum)
        name = self.rank.dirname
        self.transfer = TransferEngine(d2h, self.pool, name=f"d2h-{name}")
        self.flush = FlushPipeline(self.pool, storage, fsync=fsync, fault=fault, name=f"flush-{name}")
        self.transfer.notify_chunk_resident(self.flush.enqueue_flush)
        self.transfer.on_batch_done(self._on_copies_done)
        self.flush.on_failed(self._on_flush_failed)
        self.tickets: Dict[int, CaptureTicket] = {}
        self.blocked_capture_s = 0.0
        self.blocked_barrier_s = 0.0
        self._closed = False

    # -- capture -----------------------------------------------------------
    def capture(self, plan: CheckpointPlan, state: StateTree) -> CaptureTicket:
        """Start a non-blocking checkpoint of ``state`` for ``plan.step``."""
        t0 = time.perf_counter()
        if self._closed:
            raise EngineClosed("engine is closed")
        shards = plan.shards.get(self.rank, [])
        names = [s.name for s in shards]
        if sorted(state) != sorted(names):
            raise ValueError(f"state keys {sorted(state)} do not match shards {sorted(names)} of {self.rank.dirname}")
        ticket = CaptureTicket(plan.step, self.rank)
        jobs = []
        for shard in shards:
            sub = state[shard.name]
            if self.check_sizes and tree_bytes(sub) != shard.size_bytes:
                raise ValueError(f"{shard.name}: state holds {tree_bytes(sub)} bytes, plan says {shard.size_bytes}")
            meta, large = encode_tree(sub, self.threshold)
            header = layout([(META_KEY, len(meta))] + [(p, r.nbytes) for p, r in large])
            size = header.payload_end - header.header_length
            if size > self.pool.capacity_bytes:
                raise SizeExceedsCapacity(
                    f"shard {shard.shard_id} needs {size} bytes, host buffer holds {self.pool.capacity_bytes}"
                )
            task = FlushTask(os.path.join(self.root, shard_relpath(plan.step, self.rank, shard.name)), header, owner=ticket)
            copies = []
            for entry, (path, region) in zip(header.entries[1:], large):
                copies.append(CopyTask(path, region, 0, region.nbytes, dest_offset=entry.offset - header.header_length,
                                       shard=shard))
            ticket.headers[shard.name] = header
            ticket.flushes.append(task)
            ticket.tasks.extend(copies)
            jobs.append(SegmentJob(size, copies, prefix=meta, tag=task))
        if self.consolidator is not None:
            self.consolidator.register_plan(plan)
        self.tickets[plan.step] = ticket
        if not jobs:
            ticket.status = TicketStatus.HOST_RESIDENT
            ticket.resident.set()
            self.flush.enqueue_marker(lambda: self._finish(ticket))
        else:
            self.transfer.submit_segments(ticket, jobs)
        ticket.capture_latency = time.perf_counter() - t0
        self.blocked_capture_s += ticket.capture_latency
        return ticket

    def _on_copies_done(self, ticket: CaptureTicket, error, torn) -> None:
        # runs on the copy worker after the last chunk notice was queued
        if error is not None:
            ticket._fail(error)
        elif torn:
            names = ", ".join(t.key for t in torn[:5])
            ticket._fail(TornSnapshot(f"step {ticket.step}: {len(torn)} region(s) mutated during copy: {names}"))
        elif ticket.status is TicketStatus.IN_FLIGHT:
            ticket.status = TicketStatus.HOST_RESIDENT
            ticket.resident.set()
        self.flush.enqueue_marker(lambda: self._finish(ticket))

    def _on_flush_failed(self, task: FlushTask, err: BaseException) -> None:
        if isinstance(task.owner, CaptureTicket):
            task.owner._fail(err)

    def _finish(self, ticket: CaptureTicket) -> None:
        # flush worker: every notice of this ticket has been handled
        if self.flush.crashed:
            ticket._fail(ticket.error or EngineClosed("process crashed before persisting"))
            return  # a dead rank casts no vote
        ok = not ticket.failed and all(f.state is FlushState.PERSISTED for f in ticket.flushes)
        if ok:
            ticket.status = TicketStatus.PERSISTED
            ticket.finished.set()
        else:
            ticket._fail(ticket.error)
        if self.consolidator is not None:
            self.consolidator.vote(ticket.step, self.rank, ok)

    # -- trainer-side blocking points --------------------------------------
    def update_barrier(self, ticket: CaptureTicket, timeout: Optional[float] = None) -> None:
        """Wait until ``ticket``'s snapshot is host-resident; then mutation is safe."""
        if not ticket.barrier_done:
            t0 = time.perf_counter()
            if not ticket.resident.wait(timeout):
                raise TimeoutError(f"step {ticket.step} still copying")
            ticket.barrier_wait = time.perf_counter() - t0
            self.blocked_barrier_s += ticket.barrier_wait
            ticket.barrier_done = True
        if ticket.failed and isinstance(ticket.error, TornSnapshot):
            raise ticket.error

    @property
    def blocked_s(self) -> float:
        return self.blocked_capture_s + self.blocked_barrier_s

    def wait_persisted(self, ticket: CaptureTicket, timeout: Optional[float] = None) -> TicketStatus:
        ticket.finished.wait(timeout)
        return ticket.status

    def drain(self, timeout: Optional[float] = None) -> None:
        """Block until every outstanding ticket is persisted or failed."""
        deadline = None if timeout is None else time.monotonic() + timeout
        for ticket in list(self.tickets.values()):
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            if not ticket.resident.wait(remaining):
                raise TimeoutError("copies still pending")
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        self.flush.drain(remaining)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.transfer.close(wait=True)
        self.flush.close()

    def crash(self) -> None:
        """Emulate process death: stop all workers without persisting anything more."""
        self._closed = True
        self.flush.crashed = True
        self.pool.close()
        self.transfer.close(wait=True, abort=True)
        self.flush.close()

    # -- restore ---------------------------------------------------------
    def restore(self, step: int) -> dict:
        return restore(self.root, step, self.rank)


def restore(root: str, step: int, rank: RankCoord) -> dict:
    """Rebuild a rank's state tree for a committed step from its shard files."""
    manifest = Manifest.load(os.path.join(root, MANIFEST_NAME))
    if step not in manifest.committed:
        raise NotCommitted(f"step {step} is not committed (latest: {manifest.latest_committed()})")
    prefix = f"{step_dirname(step)}/{RankCoord(*rank).dirname}/"
    tree = {}
    for f in manifest.files(step):
        rel = f["path"]
        if not rel.startswith(prefix):
            continue
        name = rel[len(prefix):].rsplit(".ckpt", 1)[0]
        _, payloads = read_checkpoint_file(os.path.join(root, rel), verify=True)
        tree[name] = decode_tree(payloads[META_KEY], payloads)
    return tree


class LocalCluster:
    """All ranks of a topology as engines in one process, sharing one consolidator."""

    def __init__(self, root: str, topology: ParallelTopology, commit_timeout: float = 30.0,
                 faults=None, fault_hooks: Optional[Dict[RankCoord, FaultHook]] = None, **engine_kw):
        self.root = os.fspath(root)
        self.topology = topology
        self.consolidator = Consolidator(self.root, topology, timeout=commit_timeout, faults=faults)
        hooks = fault_hooks or {}
        self.engines = {r: Engine(self.root, r, self.consolidator, fault=hooks.get(r), **engine_kw)
                        for r in topology.ranks()}

    def capture(self, plan: CheckpointPlan, states: Mapping[RankCoord, StateTree]) -> Dict[RankCoord, CaptureTicket]:
        return {r: e.capture(plan, states[r]) for r, e in self.engines.items()}

    def update_barrier(self, tickets: Mapping[RankCoord, CaptureTicket]) -> None:
        """Collective barrier: every rank waits for its copies; first torn error is raised."""
        first = None
        for r, t in tickets.items():
            try:
                self.engines[r].update_barrier(t)
            except TornSnapshot as exc:
                first = first or exc
        if first is not None:
            raise first

    def drain(self, timeout: Optional[float] = None) -> None:
        for e in self.engines.values():
            e.drain(timeout)

    def wait_committed(self, step: int, timeout: Optional[float] = None):
        return self.consolidator.wait_decided(step, timeout)

    def restore(self, step: int) -> Dict[RankCoord, dict]:
        return {r: restore(self.root, step, r) for r in self.engines}

    @property
    def blocked_s(self) -> float:
        return max((e.blocked_s for e in self.engines.values()), default=0.0)

    def close(self) -> None:
        for e in self.engines.values():
            e.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
