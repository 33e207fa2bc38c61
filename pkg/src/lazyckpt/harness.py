"""Drivers for the real engine: randomized consistency trials and a desk-scale bench."""
from __future__ import annotations

import logging
import os
import random
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .consolidation import MANIFEST_NAME, CommitStatus, Manifest
from .engine import LocalCluster, materialize
from .errors import SimulatedCrash, TornSnapshot
from .topology import CheckpointPlan, ModelSpec, ParallelTopology, RankCoord, plan_checkpoint
from .transfer import DeviceRegion

log = logging.getLogger(__name__)

SCRATCH_ENV = "LZCKPT_SCRATCH"


def scratch_dir(explicit: Optional[str] = None) -> str:
    base = explicit or os.environ.get(SCRATCH_ENV) or None
    if base:
        os.makedirs(base, exist_ok=True)
    return tempfile.mkdtemp(prefix="lzckpt-", dir=base)


# -- synthetic state ---------------------------------------------------------
def _split_sizes(rng: random.Random, total: int, parts: int) -> List[int]:
    if total <= 0:
        return []
    parts = max(1, min(parts, total))
    cuts = sorted(rng.sample(range(1, total), parts - 1)) if parts > 1 else []
    bounds = [0, *cuts, total]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def random_shard_tree(rng: random.Random, size: int, large: int) -> dict:
    """Random nested tree holding exactly ``size`` leaf bytes.

    The first leaf is a device region of at least ``large`` bytes when the
    shard is big enough, so every trial exercises the async copy path.
    """
    sizes = []
    if size >= large:
        head = rng.randint(large, size)
        sizes.append(head)
        sizes.extend(_split_sizes(rng, size - head, rng.randint(1, 4)))
    else:
        sizes.extend(_split_sizes(rng, size, rng.randint(1, 3)))
    tree: dict = {}
    for i, n in enumerate(sizes):
        data = rng.randbytes(n)
        leaf = DeviceRegion(data) if i == 0 or rng.random() < 0.6 else data
        node = tree
        if rng.random() < 0.5:
            node = tree.setdefault(f"group{rng.randint(0, 2)}", {})
        name = f"t{i}"
        node[name] = leaf
    if rng.random() < 0.2:
        tree["empty"] = {}
    return tree


def random_states(rng: random.Random, plan: CheckpointPlan, large: int) -> Dict[RankCoord, dict]:
    return {r: {s.name: random_shard_tree(rng, s.size_bytes, large) for s in shards}
            for r, shards in plan.shards.items()}


def regions(tree) -> List[DeviceRegion]:
    out = []
    for v in tree.values():
        if isinstance(v, dict):
            out.extend(regions(v))
        elif isinstance(v, DeviceRegion):
            out.append(v)
    return out


def mutate(rng: random.Random, states: Dict[RankCoord, dict], fraction: float = 1.0) -> int:
    """Emulated optimizer update: overwrite part of (some) device regions."""
    n = 0
    for st in states.values():
        for region in regions(st):
            if region.nbytes and rng.random() < fraction:
                off = rng.randrange(region.nbytes)
                length = min(region.nbytes - off, rng.randint(1, 64))
                region.write(off, rng.randbytes(length))
                n += 1
    return n


def first_divergence(expected, actual, prefix="") -> Optional[str]:
    if isinstance(expected, dict) and isinstance(actual, dict):
        for k in sorted(set(expected) | set(actual)):
            if k not in actual or k not in expected:
                return f"{prefix}{k}: missing on {'restore' if k not in actual else 'capture'} side"
            d = first_divergence(expected[k], actual[k], f"{prefix}{k}/")
            if d:
                return d
        return None
    if expected != actual:
        if isinstance(expected, bytes) and isinstance(actual, bytes):
            if len(expected) != len(actual):
                return f"{prefix[:-1]}: length {len(actual)} != {len(expected)}"
            i = next(i for i, (a, b) in enumerate(zip(expected, actual)) if a != b)
            return f"{prefix[:-1]}: first differing byte at offset {i}"
        return f"{prefix[:-1]}: type mismatch"
    return None


# -- verify ------------------------------------------------------------------
@dataclass
class TrialResult:
    trial: int
    ok: bool
    torn: bool = False
    detail: str = ""
    layout: str = ""  # topology, model and buffer parameters of the trial


@dataclass
class VerifyReport:
    trials: int
    seed: int
    skip_barrier: bool
    results: List[TrialResult] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> int:
        return sum(r.ok for r in self.results)

    @property
    def torn(self) -> int:
        return sum(r.torn for r in self.results)

    @property
    def ok(self) -> bool:
        return self.passed == len(self.results)

    @property
    def first_failure(self) -> Optional[TrialResult]:
        return next((r for r in self.results if not r.ok), None)


_TOPOLOGIES = [(1, 1, 1), (2, 1, 1), (1, 2, 1), (1, 1, 2), (2, 2, 1), (2, 1, 2), (1, 2, 2), (4, 1, 1)]


def run_trial(trial: int, rng: random.Random, root: str, skip_barrier: bool = False) -> TrialResult:
    """Capture/mutate a few steps, then restore each committed step byte-exact."""
    dp, pp, tp = rng.choice(_TOPOLOGIES)
    world = dp * pp * tp
    topo = ParallelTopology.from_degrees(dp, pp, tp, gpus_per_node=rng.choice([g for g in (1, 2, 4) if world % g == 0 and g >= tp]))
    layers = rng.randint(pp, pp + 4)
    model = ModelSpec(rng.randint(2_000, 12_000), layers, 64)
    large = 4096
    base = plan_checkpoint(topo, model, max_skew=100.0)
    quantum = rng.choice([1024, 4096, 16384])
    steps = 1 if skip_barrier else rng.randint(1, 3)
    # a slow link keeps copies in flight long enough to overlap the trainer
    bandwidth = 50e6 if skip_barrier else rng.choice([None, 200e6])
    states = random_states(rng, base, large)
    largest_shard = max(s.size_bytes for s in base.all_shards())
    capacity = largest_shard + 1024 + rng.randint(0, 2 * largest_shard)
    layout = (f"dp={dp} pp={pp} tp={tp} gpn={topo.gpus_per_node} params={model.param_count} layers={layers} "
              f"quantum={quantum} capacity={capacity} steps={steps}")
    expected: Dict[int, Dict[RankCoord, dict]] = {}
    with LocalCluster(root, topo, buffer_capacity=capacity, d2h_bandwidth=bandwidth,
                      chunk_quantum=quantum, threshold=large, fsync=False) as cluster:
        try:
            for step in range(1, steps + 1):
                plan = base.for_step(step)
                expected[step] = {r: materialize(s) for r, s in states.items()}
                tickets = cluster.capture(plan, states)
                if not skip_barrier:
                    cluster.update_barrier(tickets)
                mutate(rng, states)
                if skip_barrier:
                    cluster.update_barrier(tickets)  # late barrier surfaces the torn copy
            cluster.drain(timeout=60)
        except TornSnapshot as exc:
            return TrialResult(trial, ok=False, torn=True, detail=str(exc), layout=layout)
        for step in expected:
            rec = cluster.wait_committed(step, timeout=30)
            if rec.status is not CommitStatus.COMMITTED:
                return TrialResult(trial, False, detail=f"step {step} {rec.status.value}: {rec.reason}", layout=layout)
        for step, snap in expected.items():
            restored = cluster.restore(step)
            for rank in snap:
                diff = first_divergence(snap[rank], materialize(restored[rank]))
                if diff:
                    return TrialResult(trial, False, detail=f"step {step} rank {rank}: {diff}", layout=layout)
    return TrialResult(trial, True, layout=layout)


def run_verify(trials: int = 500, seed: int = 0, skip_barrier: bool = False,
               scratch: Optional[str] = None, stop_on_failure: bool = False) -> VerifyReport:
    rng = random.Random(seed)
    report = VerifyReport(trials, seed, skip_barrier)
    base = scratch_dir(scratch)
    t0 = time.perf_counter()
    try:
        for i in range(trials):
            root = os.path.join(base, f"trial-{i:04d}")
            res = run_trial(i, random.Random(rng.getrandbits(64)), root, skip_barrier)
            report.results.append(res)
            shutil.rmtree(root, ignore_errors=True)
            if stop_on_failure and not res.ok:
                break
    finally:
        shutil.rmtree(base, ignore_errors=True)
    report.elapsed = time.perf_counter() - t0
    return report


# -- bench -------------------------------------------------------------------
@dataclass
class BenchConfig:
    state_size: int = 64 * 10**6
    dp: int = 1
    pp: int = 1
    tp: int = 1
    gpus_per_node: int = 4
    layer_count: int = 4
    iterations: int = 3
    checkpoint_every: int = 1
    t_forward: float = 0.05
    t_backward: float = 0.10
    t_update: float = 0.01
    buffer_capacity: int = 256 * 10**6
    d2h_bandwidth: Optional[float] = 25e9
    storage_bandwidth: Optional[float] = 5e9
    chunk_quantum: int = 4 * 2**20
    kill_at_step: Optional[int] = None
    commit_timeout: float = 30.0
    seed: int = 0
    fsync: bool = True


@dataclass
class BenchReport:
    root: str
    steps: List[int] = field(default_factory=list)
    blocked: List[float] = field(default_factory=list)
    state_bytes: int = 0
    end_to_end: float = 0.0
    committed: List[int] = field(default_factory=list)
    latest_committed: Optional[int] = None
    crashed_at: Optional[int] = None
    consistent: bool = True
    detail: str = ""

    @property
    def mean_blocked(self) -> float:
        return sum(self.blocked) / len(self.blocked) if self.blocked else 0.0

    @property
    def throughput(self) -> float:
        return self.state_bytes / max(self.mean_blocked, 1e-3) if self.blocked else 0.0


class _KillSwitch:
    """Fault hook that kills rank (0,0,0) mid-flush: on its first payload write of one step."""

    def __init__(self, step: int):
        self.marker = f"{os.sep}step-{step}{os.sep}"
        self.fired = False

    def __call__(self, path: str, offset: int, length: int) -> None:
        if self.marker in path and offset > 0 and not self.fired:
            self.fired = True
            raise SimulatedCrash(f"killed while writing {path} at offset {offset}")


def run_bench(cfg: BenchConfig, root: Optional[str] = None) -> BenchReport:
    """Trainer loop with emulated phases; checkpoint after every ``checkpoint_every`` updates."""
    root = root or scratch_dir()
    rng = random.Random(cfg.seed)
    world = cfg.dp * cfg.pp * cfg.tp
    gpn = min(cfg.gpus_per_node, world)
    topo = ParallelTopology(cfg.dp, cfg.pp, cfg.tp, gpn, world // gpn)
    model = ModelSpec(max(1, round(cfg.state_size / 14)), cfg.layer_count, 1024, name="bench")
    base = plan_checkpoint(topo, model)
    report = BenchReport(root, state_bytes=base.total_bytes)
    states = {r: {s.name: {"data": DeviceRegion(rng.randbytes(s.size_bytes))} for s in shards}
              for r, shards in base.shards.items()}
    kill = _KillSwitch(cfg.kill_at_step) if cfg.kill_at_step is not None else None
    hooks = {RankCoord(0, 0, 0): kill} if kill else None
    snapshots: Dict[int, Dict[RankCoord, dict]] = {}
    pending: Optional[Tuple[int, dict]] = None
    t0 = time.perf_counter()
    cluster = LocalCluster(root, topo, commit_timeout=cfg.commit_timeout, fault_hooks=hooks,
                           buffer_capacity=cfg.buffer_capacity, d2h_bandwidth=cfg.d2h_bandwidth,
                           storage_bandwidth=cfg.storage_bandwidth, chunk_quantum=cfg.chunk_quantum, fsync=cfg.fsync)
    engines = list(cluster.engines.values())
    try:
        for it in range(cfg.iterations):
            time.sleep(cfg.t_forward + cfg.t_backward)
            if pending is not None:
                cluster.update_barrier(pending[1])
                pending = None
            mutate(rng, states, fraction=1.0)
            time.sleep(cfg.t_update)
            if any(e.flush.crashed for e in engines):
                break
            step = it + 1
            if step % cfg.checkpoint_every == 0:
                snapshots[step] = {r: materialize(s) for r, s in states.items()}
                pending = (step, cluster.capture(base.for_step(step), states))
                report.steps.append(step)
        if pending is not None:
            cluster.update_barrier(pending[1])
        report.blocked = _per_checkpoint_blocked(cluster, report.steps)
        alive = [e for e in engines if not e.flush.crashed]
        for e in alive:
            try:
                e.drain(timeout=300)
            except SimulatedCrash:
                pass
        crashed = [e for e in engines if e.flush.crashed]
        if crashed:
            report.crashed_at = cfg.kill_at_step
            for e in crashed:
                e.crash()
            cluster.consolidator.expire(force=True)
        else:
            for s in report.steps:
                cluster.wait_committed(s, timeout=cfg.commit_timeout)
    finally:
        cluster.close()
    report.end_to_end = time.perf_counter() - t0
    # what a restarted job would see
    manifest = Manifest.load(os.path.join(root, MANIFEST_NAME))
    report.committed = manifest.steps
    report.latest_committed = manifest.latest_committed()
    for step in report.committed:
        restored = {r: materialize(t) for r, t in cluster.restore(step).items()}
        for rank, snap in snapshots[step].items():
            diff = first_divergence(snap, restored[rank])
            if diff:
                report.consistent = False
                report.detail = f"step {step} rank {rank}: {diff}"
                return report
    return report


def _per_checkpoint_blocked(cluster: LocalCluster, steps: List[int]) -> List[float]:
    """Slowest rank's capture latency + barrier wait for every checkpoint."""
    out = []
    for step in steps:
        worst = 0.0
        for e in cluster.engines.values():
            t = e.tickets.get(step)
            if t is not None:
                worst = max(worst, t.capture_latency + t.barrier_wait)
        out.append(worst)
    return out
