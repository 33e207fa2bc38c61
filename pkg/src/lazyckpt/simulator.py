"""Deterministic discrete-event model of checkpointing during 3D-parallel training.

The trainer runs in global lockstep (forward+backward, then update). At a
checkpoint boundary each strategy decides what the trainer waits for:

* ``sync``            copy at pinned speed, write to storage, then resume;
* ``async_snapshot``  wait for the previous checkpoint's flush, then allocate
                      and copy through unpinned memory; flush in background;
* ``chunked``         wait for the previous flush, copy at pinned speed while
                      chunks stream to storage through ``threads`` writers;
* ``lazy``            enqueue copies and keep training; the update phase waits
                      for the copies only (collectively, across all ranks).

Ranks with identical shard sizes evolve identically, so they are simulated as
one group whose multiplicity still counts towards storage contention. Storage
is a fluid processor-sharing model: every active writer gets
``min(aggregate / active_writers, per_writer_cap)``, recomputed whenever a
writer starts or stops.
"""
from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .buffer_pool import DEFAULT_CAPACITY
from .errors import ConfigInvalid, ConfigError
from .topology import ModelSpec, ParallelTopology, RankCoord, checkpoint_size, plan_checkpoint
from .transfer import DEFAULT_CHUNK_QUANTUM

THROUGHPUT_FLOOR_S = 1e-3


@dataclass(frozen=True)
class ClusterSpec:
    node_count: int = 1
    gpus_per_node: int = 4
    b_d2h_pinned: float = 25e9
    b_d2h_unpinned: float = 10e9
    b_d2d: float = 85e9  # kept for completeness; no strategy uses it
    b_pfs_aggregate: float = 650e9
    per_writer_cap: float = 5e9
    alloc_bandwidth: float = 2e9

    def validate(self) -> None:
        for name in ("b_d2h_pinned", "b_d2h_unpinned", "b_d2d", "b_pfs_aggregate", "per_writer_cap", "alloc_bandwidth"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be > 0")
        if self.node_count < 1 or self.gpus_per_node < 1:
            raise ConfigInvalid("node_count and gpus_per_node must be >= 1")

    def writer_share(self, writers: float) -> float:
        return min(self.b_pfs_aggregate / max(writers, 1), self.per_writer_cap)


@dataclass(frozen=True)
class PhaseProfile:
    t_forward: float
    t_backward: float
    t_update: float

    @classmethod
    def from_iteration(cls, total: float, update_fraction: float = 0.05) -> "PhaseProfile":
        """Split an iteration: backward takes twice the forward time."""
        fb = total * (1 - update_fraction)
        return cls(fb / 3, 2 * fb / 3, total * update_fraction)

    @property
    def overlap_window(self) -> float:
        return self.t_forward + self.t_backward

    @property
    def iteration(self) -> float:
        return self.t_forward + self.t_backward + self.t_update

    def validate(self) -> None:
        if min(self.t_forward, self.t_backward, self.t_update) < 0:
            raise ConfigInvalid("phase durations must be >= 0")


class StrategyKind(enum.Enum):
    SYNC = "sync"
    ASYNC_SNAPSHOT = "async_snapshot"
    CHUNKED = "chunked"
    LAZY = "lazy"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    threads: int = 4  # chunked writers per rank
    exempt_last_shard: bool = False  # async_snapshot: overlap the last shard's copy

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """``sync``, ``async_snapshot``, ``chunked``, ``chunked:8`` or ``lazy``."""
        base, _, arg = text.strip().lower().partition(":")
        aliases = {"async": "async_snapshot", "snapshot": "async_snapshot"}
        try:
            kind = StrategyKind(aliases.get(base, base))
        except ValueError:
            raise ConfigError(f"unknown strategy {text!r}") from None
        if arg:
            if kind is not StrategyKind.CHUNKED:
                raise ConfigError(f"strategy {base!r} takes no argument")
            if not arg.isdigit() or int(arg) < 1:
                raise ConfigError(f"chunked thread count must be a positive integer, got {arg!r}")
            return cls(kind, threads=int(arg))
        return cls(kind)

    @property
    def streaming(self) -> bool:
        return self.kind in (StrategyKind.CHUNKED, StrategyKind.LAZY)

    @property
    def uses_pinned_buffer(self) -> bool:
        return self.kind in (StrategyKind.CHUNKED, StrategyKind.LAZY)


SYNC = Strategy(StrategyKind.SYNC)
ASYNC_SNAPSHOT = Strategy(StrategyKind.ASYNC_SNAPSHOT)
CHUNKED = Strategy(StrategyKind.CHUNKED)
LAZY = Strategy(StrategyKind.LAZY)
ALL_STRATEGIES = (SYNC, ASYNC_SNAPSHOT, CHUNKED, LAZY)


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    topology: ParallelTopology
    model: ModelSpec
    phases: PhaseProfile
    strategy: Strategy = LAZY
    iterations: int = 10
    checkpoint_every: Optional[int] = 1
    buffer_capacity: int = DEFAULT_CAPACITY
    chunk_quantum: int = DEFAULT_CHUNK_QUANTUM
    # explicit per-rank shard sizes; replaces the plan derived from ``model``
    shard_sizes: Optional[Mapping[RankCoord, Tuple[int, ...]]] = None

    def validate(self) -> None:
        self.cluster.validate()
        self.phases.validate()
        if self.iterations < 1:
            raise ConfigInvalid("iterations must be >= 1")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigInvalid("checkpoint_every must be >= 1 or None")
        if self.buffer_capacity <= 0 or self.chunk_quantum <= 0:
            raise ConfigInvalid("buffer_capacity and chunk_quantum must be > 0")
        if self.strategy.threads < 1:
            raise ConfigInvalid("chunked threads must be >= 1")

    def with_strategy(self, strategy: Strategy) -> "RunConfig":
        return replace(self, strategy=strategy)

    def rank_shards(self) -> Dict[RankCoord, Tuple[int, ...]]:
        if self.shard_sizes is not None:
            return {RankCoord(*r): tuple(s) for r, s in self.shard_sizes.items()}
        plan = plan_checkpoint(self.topology, self.model)
        return {r: tuple(s.size_bytes for s in plan.shards[r]) for r in self.topology.ranks()}

    def checkpoint_steps(self) -> List[int]:
        """Iterations that begin with a checkpoint request (never after the last one)."""
        if self.checkpoint_every is None:
            return []
        return [i for i in range(1, self.iterations) if i % self.checkpoint_every == 0]


@dataclass
class Metrics:
    strategy: str
    model: str
    dp: int
    checkpoint_every: Optional[int]
    checkpoint_bytes: int
    blocked: List[float] = field(default_factory=list)  # trainer blocked time per checkpoint
    iteration_times: List[float] = field(default_factory=list)
    checkpoint_iterations: List[int] = field(default_factory=list)
    end_to_end: float = 0.0
    trainer_end: float = 0.0
    rank_ready: List[Dict[RankCoord, float]] = field(default_factory=list)
    update_start: List[float] = field(default_factory=list)

    @property
    def checkpoints(self) -> int:
        return len(self.blocked)

    @property
    def mean_blocked(self) -> float:
        return sum(self.blocked) / len(self.blocked) if self.blocked else 0.0

    @property
    def total_blocked(self) -> float:
        return sum(self.blocked)

    @property
    def throughput(self) -> float:
        """Checkpoint bytes over blocked time (floored at 1 ms); 0 without checkpoints."""
        if not self.blocked:
            return 0.0
        return self.checkpoint_bytes / max(self.mean_blocked, THROUGHPUT_FLOOR_S)

    @property
    def iter_s(self) -> float:
        times = [self.iteration_times[i] for i in self.checkpoint_iterations] or self.iteration_times
        return sum(times) / len(times) if times else 0.0


# -- event loop ------------------------------------------------------------
class Signal:
    __slots__ = ("loop", "fired", "_waiters")

    def __init__(self, loop: "EventLoop"):
        self.loop = loop
        self.fired = False
        self._waiters: List[Callable[[], None]] = []

    def fire(self) -> None:
        if self.fired:
            return
        self.fired = True
        for w in self._waiters:
            self.loop.at(self.loop.now, w)
        self._waiters.clear()

    def wait(self, callback: Callable[[], None]) -> None:
        if self.fired:
            self.loop.at(self.loop.now, callback)
        else:
            self._waiters.append(callback)


class EventLoop:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = 0

    def at(self, when: float, callback: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (when, self._seq, callback))

    def after(self, delay: float, callback: Callable[[], None]) -> None:
        self.at(self.now + delay, callback)

    def spawn(self, gen) -> None:
        """Drive a generator that yields delays (float) or Signals."""

        def step():
            try:
                item = next(gen)
            except StopIteration:
                return
            if isinstance(item, Signal):
                item.wait(step)
            else:
                self.after(item, step)

        self.at(self.now, step)

    def run(self) -> None:
        while self._heap:
            when, _, cb = heapq.heappop(self._heap)
            self.now = when
            cb()


class Storage:
    """Fluid processor-sharing model of the parallel file system."""

    def __init__(self, loop: EventLoop, cluster: ClusterSpec):
        self.loop = loop
        self.cluster = cluster
        self.flows: Dict[int, list] = {}  # id -> [remaining, weight, callback]
        self._next_id = 0
        self._last = 0.0
        self._rate = 0.0
        self._token = 0

    @property
    def writers(self) -> int:
        return sum(f[1] for f in self.flows.values())

    def start(self, nbytes: float, weight: int, callback: Callable[[], None]) -> None:
        self._advance()
        self._next_id += 1
        self.flows[self._next_id] = [float(nbytes), weight, callback]
        self._reschedule()

    def _advance(self) -> None:
        dt = self.loop.now - self._last
        if dt > 0 and self.flows:
            moved = self._rate * dt
            for f in self.flows.values():
                f[0] -= moved
        self._last = self.loop.now

    def _reschedule(self) -> None:
        self._token += 1
        if not self.flows:
            return
        self._rate = self.cluster.writer_share(self.writers)
        soonest = min(f[0] for f in self.flows.values())
        token = self._token
        self.loop.after(max(soonest, 0.0) / self._rate, lambda: self._complete(token))

    def _complete(self, token: int) -> None:
        if token != self._token:
            return  # superseded by a later start/stop
        self._advance()
        soonest = min(f[0] for f in self.flows.values())
        # flows that finish together; tolerance covers float rounding only
        done = [fid for fid, f in self.flows.items() if f[0] <= max(soonest, 0.0) + 1e-3]
        callbacks = [self.flows.pop(fid)[2] for fid in done]
        self._reschedule()
        for cb in callbacks:
            cb()


@dataclass(eq=False)
class _Chunk:
    ckpt: "_Checkpoint"
    nbytes: int
    shard: int


@dataclass(eq=False)
class _Checkpoint:
    index: int
    iteration: int
    copy_done: Signal
    head_done: Signal  # every shard but the last copied (async exemption)
    flush_done: Signal
    copied: Dict[int, int] = field(default_factory=dict)
    flushed: Dict[int, int] = field(default_factory=dict)
    groups_copied: int = 0
    groups_head: int = 0
    groups_flushed: int = 0
    ready: Dict[int, float] = field(default_factory=dict)


class _Group:
    def __init__(self, gid: int, ranks: List[RankCoord], shards: Tuple[int, ...], quantum: int):
        self.gid = gid
        self.ranks = ranks
        self.weight = len(ranks)
        self.shards = shards
        self.chunks: List[Tuple[int, int]] = []  # (bytes, shard index)
        for idx, size in enumerate(shards):
            for off in range(0, size, quantum):
                self.chunks.append((min(quantum, size - off), idx))
        last = len(shards) - 1
        self.head_chunks = sum(1 for _, s in self.chunks if s != last)
        self.copy_queue: Deque[_Chunk] = deque()
        self.flush_queue: Deque[_Chunk] = deque()
        self.copy_busy = False
        self.flush_busy = False
        self.buffer_used = 0

    @property
    def nbytes(self) -> int:
        return sum(self.shards)


class _Simulation:
    def __init__(self, config: RunConfig):
        self.cfg = config
        self.loop = EventLoop()
        self.storage = Storage(self.loop, config.cluster)
        self.strategy = config.strategy
        by_sizes: Dict[Tuple[int, ...], List[RankCoord]] = {}
        for rank, sizes in sorted(config.rank_shards().items()):
            by_sizes.setdefault(tuple(s for s in sizes if s > 0), []).append(rank)
        self.groups = [_Group(i, ranks, sizes, config.chunk_quantum)
                       for i, (sizes, ranks) in enumerate(sorted(by_sizes.items(), key=lambda kv: kv[1][0]))]
        self.groups = [g for g in self.groups if g.chunks]
        self.checkpoints: List[_Checkpoint] = []
        c = config.cluster
        if self.strategy.kind is StrategyKind.ASYNC_SNAPSHOT:
            self.copy_cost = 1 / c.alloc_bandwidth + 1 / c.b_d2h_unpinned
        else:
            self.copy_cost = 1 / c.b_d2h_pinned

    # -- checkpoint pipeline -------------------------------------------------
    def request(self, iteration: int) -> _Checkpoint:
        loop = self.loop
        ck = _Checkpoint(len(self.checkpoints), iteration, Signal(loop), Signal(loop), Signal(loop))
        self.checkpoints.append(ck)
        if not self.groups:
            for s in (ck.copy_done, ck.head_done, ck.flush_done):
                s.fire()
            return ck
        for g in self.groups:
            ck.copied[g.gid] = ck.flushed[g.gid] = 0
            if g.head_chunks == 0:
                self._head_copied(ck)
            for nbytes, shard in g.chunks:
                g.copy_queue.append(_Chunk(ck, nbytes, shard))
            self._try_copy(g)
        return ck

    def _try_copy(self, g: _Group) -> None:
        if g.copy_busy or not g.copy_queue:
            return
        chunk = g.copy_queue[0]
        if self.strategy.uses_pinned_buffer:
            if g.buffer_used and g.buffer_used + chunk.nbytes > self.cfg.buffer_capacity:
                return  # backpressure: wait for a flush to release space
            g.buffer_used += chunk.nbytes
        g.copy_queue.popleft()
        g.copy_busy = True
        self.loop.after(chunk.nbytes * self.copy_cost, lambda: self._copied(g, chunk))

    def _copied(self, g: _Group, chunk: _Chunk) -> None:
        ck = chunk.ckpt
        g.copy_busy = False
        ck.copied[g.gid] += 1
        n = ck.copied[g.gid]
        if n == g.head_chunks:
            self._head_copied(ck)
        if self.strategy.streaming:
            g.flush_queue.append(chunk)
        if n == len(g.chunks):
            ck.ready[g.gid] = self.loop.now
            if not self.strategy.streaming:
                g.flush_queue.extend(_Chunk(ck, b, s) for b, s in g.chunks)
            ck.groups_copied += 1
            if ck.groups_copied == len(self.groups):
                ck.copy_done.fire()
        self._try_flush(g)
        self._try_copy(g)

    def _head_copied(self, ck: _Checkpoint) -> None:
        ck.groups_head += 1
        if ck.groups_head == len(self.groups):
            ck.head_done.fire()

    def _try_flush(self, g: _Group) -> None:
        if g.flush_busy or not g.flush_queue:
            return
        width = self.strategy.threads if self.strategy.kind is StrategyKind.CHUNKED else 1
        batch = [g.flush_queue.popleft() for _ in range(min(width, len(g.flush_queue)))]
        g.flush_busy = True
        # the writer threads of one rank share that rank's storage share
        self.storage.start(sum(c.nbytes for c in batch), g.weight, lambda: self._flushed(g, batch))

    def _flushed(self, g: _Group, batch: List[_Chunk]) -> None:
        g.flush_busy = False
        for chunk in batch:
            ck = chunk.ckpt
            if self.strategy.uses_pinned_buffer:
                g.buffer_used -= chunk.nbytes
            ck.flushed[g.gid] += 1
            if ck.flushed[g.gid] == len(g.chunks):
                ck.groups_flushed += 1
                if ck.groups_flushed == len(self.groups):
                    ck.flush_done.fire()
        self._try_flush(g)
        self._try_copy(g)

    # -- trainer -------------------------------------------------------------
    def trainer(self, metrics: Metrics):
        cfg, loop, kind = self.cfg, self.loop, self.strategy.kind
        ph = cfg.phases
        steps = set(cfg.checkpoint_steps())
        prev: Optional[_Checkpoint] = None
        for i in range(cfg.iterations):
            start = loop.now
            ck = None
            blocked = 0.0
            if i in steps:
                metrics.checkpoint_iterations.append(i)
                if kind in (StrategyKind.ASYNC_SNAPSHOT, StrategyKind.CHUNKED) and prev is not None:
                    yield prev.flush_done
                ck = self.request(i)
                if kind is StrategyKind.SYNC:
                    yield ck.flush_done
                elif kind is StrategyKind.ASYNC_SNAPSHOT:
                    yield ck.head_done if self.strategy.exempt_last_shard else ck.copy_done
                elif kind is StrategyKind.CHUNKED:
                    yield ck.copy_done
                blocked += loop.now - start
                prev = ck
            yield ph.overlap_window
            if ck is not None:
                t = loop.now
                yield ck.copy_done  # update barrier; no-op unless copies still run
                blocked += loop.now - t
                metrics.blocked.append(blocked)
                metrics.rank_ready.append({r: ck.ready.get(g.gid, loop.now) for g in self.groups for r in g.ranks})
                metrics.update_start.append(loop.now)
            yield ph.t_update
            metrics.iteration_times.append(loop.now - start)
        metrics.trainer_end = loop.now

    def run(self) -> Metrics:
        cfg = self.cfg
        total = sum(g.nbytes * g.weight for g in self.groups) if cfg.shard_sizes is not None else checkpoint_size(cfg.model)
        m = Metrics(self.strategy.name, cfg.model.name or f"{cfg.model.param_count:g}", cfg.topology.dp_degree,
                    cfg.checkpoint_every, total)
        self.loop.spawn(self.trainer(m))
        self.loop.run()
        m.end_to_end = max(m.trainer_end, self.loop.now)
        return m


def simulate(config: RunConfig) -> Metrics:
    """Run one scenario; identical configs give bit-identical Metrics."""
    config.validate()
    return _Simulation(config).run()


def compare_strategies(config: RunConfig, strategies: Iterable[Strategy] = ALL_STRATEGIES) -> Dict[str, Metrics]:
    return {s.name: simulate(config.with_strategy(s)) for s in strategies}


def analytic_blocked_time(strategy: Strategy, shard_bytes: float, cluster: ClusterSpec = ClusterSpec(),
                          phases: Optional[PhaseProfile] = None, writers: int = 1,
                          last_shard_bytes: float = 0.0) -> float:
    """Closed-form blocked time of one checkpoint of ``shard_bytes`` on one rank."""
    S = float(shard_bytes)
    if S <= 0:
        return 0.0
    window = phases.overlap_window if phases is not None else 0.0
    kind = strategy.kind
    if kind is StrategyKind.SYNC:
        return S / cluster.b_d2h_pinned + S / cluster.writer_share(writers)
    if kind is StrategyKind.ASYNC_SNAPSHOT:
        per_byte = 1 / cluster.alloc_bandwidth + 1 / cluster.b_d2h_unpinned
        if strategy.exempt_last_shard and last_shard_bytes:
            return (S - last_shard_bytes) * per_byte + max(0.0, last_shard_bytes * per_byte - window)
        return S * per_byte
    if kind is StrategyKind.CHUNKED:
        return S / cluster.b_d2h_pinned
    return max(0.0, S / cluster.b_d2h_pinned - window)


# -- presets ---------------------------------------------------------------
@dataclass(frozen=True)
class ModelPreset:
    name: str
    params: float
    layers: int
    hidden: int
    heads: int
    nodes: int
    iteration_s: float  # calibration knob, see README


MODEL_PRESETS: Dict[str, ModelPreset] = {
    p.name: p
    for p in (
        ModelPreset("3B", 3e9, 30, 2560, 32, 1, 1.5),
        ModelPreset("7B", 7e9, 32, 4096, 32, 2, 1.8),
        ModelPreset("13B", 13e9, 40, 5120, 40, 4, 3.0),
        ModelPreset("30B", 30e9, 60, 6656, 52, 8, 4.5),
        ModelPreset("70B", 70e9, 80, 8192, 64, 20, 8.0),
    )
}
TENSOR_PARALLEL = 4
GPUS_PER_NODE = 4


def preset_config(name: str, dp: int = 1, strategy: Strategy = LAZY, iterations: int = 10,
                  checkpoint_every: Optional[int] = 1, cluster: Optional[ClusterSpec] = None,
                  **overrides) -> RunConfig:
    """RunConfig for one of the reference model sizes (tp=4, pp=nodes per replica)."""
    try:
        p = MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {', '.join(MODEL_PRESETS)}") from None
    topo = ParallelTopology(dp, p.nodes, TENSOR_PARALLEL, GPUS_PER_NODE, p.nodes * dp)
    model = ModelSpec(int(p.params), p.layers, p.hidden, name=p.name)
    base = cluster or ClusterSpec()
    cluster = replace(base, node_count=topo.node_count, gpus_per_node=GPUS_PER_NODE)
    return RunConfig(cluster, topo, model, PhaseProfile.from_iteration(p.iteration_s), strategy,
                     iterations, checkpoint_every, **overrides)


def single_rank_config(shard_bytes: Sequence[int], phases: PhaseProfile, strategy: Strategy,
                       cluster: ClusterSpec = ClusterSpec(), **overrides) -> RunConfig:
    """One rank, one checkpoint (taken at the start of the second iteration)."""
    topo = ParallelTopology(1, 1, 1, 1, 1)
    total = int(sum(shard_bytes))
    model = ModelSpec(max(total, 1), 1, 1, name=f"{total}B")
    return RunConfig(cluster, topo, model, phases, strategy, iterations=2, checkpoint_every=1,
                     shard_sizes={RankCoord(0, 0, 0): tuple(int(s) for s in shard_bytes)}, **overrides)


def steady_state_lazy_blocked(shard_bytes: float, cluster: ClusterSpec, phases: PhaseProfile,
                              writers: int = 1) -> float:
    """Flush-limited per-checkpoint stall once the host buffer is saturated."""
    return max(0.0, shard_bytes / cluster.writer_share(writers) - phases.iteration)


__all__ = [
    "ALL_STRATEGIES", "ASYNC_SNAPSHOT", "CHUNKED", "ClusterSpec", "LAZY", "MODEL_PRESETS", "Metrics",
    "PhaseProfile", "RunConfig", "SYNC", "Strategy", "StrategyKind", "analytic_blocked_time",
    "compare_strategies", "preset_config", "simulate", "single_rank_config", "steady_state_lazy_blocked",
]
