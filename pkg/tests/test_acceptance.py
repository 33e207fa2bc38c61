"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed
in the terminal summary. Run alone with ``pytest tests/test_acceptance.py``."""
import io
import os
import random
import time

import pytest

from lazyckpt.cli import write_csv
from lazyckpt.config import load_config
from lazyckpt.consolidation import MANIFEST_NAME, CommitStatus, Manifest, Stage
from lazyckpt.errors import CheckpointFormatError
from lazyckpt.fileformat import decode_header, encode_header, read_checkpoint_file, write_checkpoint_file
from lazyckpt.harness import BenchConfig, run_bench, run_verify
from lazyckpt.simulator import (
    ALL_STRATEGIES,
    LAZY,
    SYNC,
    ClusterSpec,
    PhaseProfile,
    analytic_blocked_time,
    compare_strategies,
    preset_config,
    simulate,
    single_rank_config,
)
from lazyckpt.topology import plan_checkpoint

from conftest import record
from poolcheck import InvariantViolation, concurrent_cycle, run_sequence
from test_fileformat import random_header
from twopc import ALL_FAULTS, COMMITTING, expected_status, run_scenario, topologies, write_shards

SCENARIOS = os.path.join(os.path.dirname(__file__), os.pardir, "scenarios")
MODELS = ("3B", "7B", "13B", "30B", "70B")
GB = 10**9


def test_criterion_01_consistency(tmp_path):
    t0 = time.perf_counter()
    good = run_verify(500, seed=0, scratch=str(tmp_path))
    elapsed = time.perf_counter() - t0
    neg = run_verify(100, seed=1, skip_barrier=True, scratch=str(tmp_path))
    torn_rate = neg.torn / 100
    ok = good.passed == 500 and torn_rate >= 0.95 and elapsed < 120
    fail = good.first_failure
    record(1, ok, f"{good.passed}/500 byte-exact in {elapsed:.1f}s; negative control torn {neg.torn}/100"
           + (f"; first failure trial {fail.trial}: {fail.detail}" if fail else ""))
    assert ok


def test_criterion_02_buffer_pool():
    stalls = cycles = 0
    try:
        for seed in range(10_000):
            stalls += run_sequence(seed)["stalls"]
        for seed in range(20):
            log = concurrent_cycle(seed, n=300)
            if log != sorted(log):
                raise InvariantViolation(f"concurrent release order broken (seed {seed})")
            cycles += 1
    except InvariantViolation as exc:
        record(2, False, str(exc))
        raise
    record(2, True, f"10000 sequences ({stalls} backpressure stalls) + {cycles} concurrent cycles: "
           "capacity, FIFO, liveness hold")


def _corrupt_detected(raw: bytes, rng: random.Random) -> bool:
    bad = bytearray(raw)
    i = rng.randrange(len(bad))
    bad[i] ^= rng.randint(1, 255)
    try:
        decode_header(bytes(bad))
    except CheckpointFormatError:
        return True
    return False


def test_criterion_03_file_format(tmp_path):
    rng = random.Random(0)
    round_trips = detected = files = 0
    for i in range(1000):
        h = random_header(rng)
        raw = encode_header(h)
        round_trips += decode_header(raw) == h and encode_header(decode_header(raw)) == raw
        detected += _corrupt_detected(raw, rng)
    # whole files: a flipped byte anywhere (header or payload) is reported
    for i in range(200):
        payloads = [(f"k{j}", rng.randbytes(rng.randint(1, 300))) for j in range(rng.randint(1, 5))]
        path = tmp_path / f"{i}.ckpt"
        write_checkpoint_file(path, payloads)
        data = bytearray(path.read_bytes())
        data[rng.randrange(len(data))] ^= rng.randint(1, 255)
        path.write_bytes(bytes(data))
        try:
            read_checkpoint_file(path)
        except CheckpointFormatError:
            files += 1
    ok = round_trips == 1000 and detected == 1000 and files == 200
    record(3, ok, f"round-trip {round_trips}/1000; header corruption detected {detected}/1000; "
           f"file corruption detected {files}/200")
    assert ok


def test_criterion_04_two_phase_commit(tmp_path):
    layouts = topologies(4, 16)
    runs = bad = 0
    for li, layout in enumerate(layouts):
        for fi, fault in enumerate(ALL_FAULTS):
            for seed in range(3):
                root = tmp_path / f"{li}-{fi}-{seed}"
                root.mkdir()
                try:
                    rec, _ = run_scenario(str(root), layout, fault, seed)  # asserts manifest files validate
                except AssertionError as exc:
                    record(4, False, f"layout {layout} fault {fault}: {exc}")
                    raise
                committed = Manifest.load(str(root / MANIFEST_NAME)).steps
                if rec.status is not expected_status(fault) or (committed == [1]) != (fault in COMMITTING):
                    bad += 1
                runs += 1
    # crash recovery: after committing 1 and 2, a crash while committing 3 leaves latest = 2
    latest_ok = True
    for fault in (Stage.RANK_CRASH_BEFORE_VOTE, Stage.NODE_LEADER_CRASH, Stage.MANIFEST_WRITE_CRASH, "corrupt"):
        root = tmp_path / f"seq-{getattr(fault, 'value', fault)}"
        root.mkdir()
        for step in (1, 2):
            run_scenario(str(root), (2, 2, 1, 2), None, seed=step, step=step)
        run_scenario(str(root), (2, 2, 1, 2), fault, seed=3, step=3)
        latest_ok &= Manifest.load(str(root / MANIFEST_NAME)).latest_committed() == 2
    # and end to end on the real engine: kill rank 0 mid-flush of step 3
    report = run_bench(BenchConfig(state_size=4 * 10**6, iterations=4, kill_at_step=3, fsync=False,
                                   t_forward=0.01, t_backward=0.02, t_update=0.005), str(tmp_path / "bench"))
    engine_ok = report.latest_committed == 2 and report.consistent
    ok = bad == 0 and latest_ok and engine_ok
    record(4, ok, f"{runs} fault runs over {len(layouts)} layouts (4-16 ranks, {len(ALL_FAULTS)} fault kinds): "
           f"{bad} unsafe; latest_committed after crash = 2: {latest_ok and engine_ok}")
    assert ok


def test_criterion_05_oracle():
    phases = PhaseProfile(0.1, 0.2, 0.02)
    worst = 0.0
    for size in (1, 5, 10, 15):
        for strat in ALL_STRATEGIES:
            sim = simulate(single_rank_config([size * GB], phases, strat)).blocked[0]
            exp = analytic_blocked_time(strat, size * GB, ClusterSpec(), phases)
            err = abs(sim - exp) / exp if exp > 0 else abs(sim)
            worst = max(worst, err)
    ok = worst <= 0.05
    record(5, ok, f"worst relative error {worst:.2e} over 16 (size, strategy) pairs")
    assert ok


def test_criterion_06_throughput_gap():
    ratios, ordered = {}, True
    for name in MODELS:
        res = compare_strategies(preset_config(name, iterations=10, checkpoint_every=1))
        ratios[name] = res["lazy"].throughput / res["sync"].throughput
        ordered &= res["lazy"].mean_blocked <= res["chunked"].mean_blocked <= res["sync"].mean_blocked
    ok = ordered and min(ratios.values()) >= 3.0
    record(6, ok, "lazy/sync throughput " + ", ".join(f"{k} {v:.1f}x" for k, v in ratios.items())
           + f"; ordering lazy<=chunked<=sync: {ordered}")
    assert ok


def test_criterion_07_dp_scaling():
    per_gpu = {}
    for dp in (1, 16):
        cfg = preset_config("13B", dp=dp)
        per_gpu[dp] = max(plan_checkpoint(cfg.topology, cfg.model).per_rank_bytes().values())
    sizes_ok = abs(per_gpu[1] / 10.4e9 - 1) <= 0.15 and abs(per_gpu[16] / 650e6 - 1) <= 0.15
    monotone = True
    for strat in ALL_STRATEGIES:
        tps = [simulate(preset_config("13B", dp=dp, strategy=strat)).throughput for dp in (1, 2, 4, 8, 16)]
        monotone &= all(b >= a * (1 - 1e-9) for a, b in zip(tps, tps[1:]))
    ok = sizes_ok and monotone
    record(7, ok, f"per-GPU bytes dp=1 {per_gpu[1] / 1e9:.2f} GB, dp=16 {per_gpu[16] / 1e6:.0f} MB; "
           f"throughput non-decreasing in dp: {monotone}")
    assert ok


def test_criterion_08_frequency_pressure():
    def lazy_tp(model, every):
        return simulate(preset_config(model, strategy=LAZY, iterations=21, checkpoint_every=every)).throughput

    tp7 = {e: lazy_tp("7B", e) for e in (1, 10)}
    tp13 = [lazy_tp("13B", e) for e in (1, 2, 5, 10)]
    spread13 = max(tp13) / min(tp13) - 1
    ok = tp7[1] < tp7[10] and spread13 <= 0.10
    record(8, ok, f"7B lazy throughput every=1 {tp7[1]:.2e} < every=10 {tp7[10]:.2e}; "
           f"13B spread across frequencies {spread13:.1%}")
    assert ok


def test_criterion_09_end_to_end():
    lazy = simulate(preset_config("13B", strategy=LAZY, iterations=50, checkpoint_every=1)).end_to_end
    sync = simulate(preset_config("13B", strategy=SYNC, iterations=50, checkpoint_every=1)).end_to_end
    ratio = sync / lazy
    ok = 1.2 <= ratio <= 3.0
    record(9, ok, f"13B x50: sync {sync:.1f}s, lazy {lazy:.1f}s, speedup {ratio:.2f}x (want 1.2-3.0)")
    assert ok


def _csv(path):
    buf = io.StringIO()
    write_csv([simulate(cfg) for cfg in load_config(path).runs()], buf)
    return buf.getvalue().encode()


def test_criterion_10_determinism():
    names = sorted(n for n in os.listdir(SCENARIOS) if n.endswith(".ini") and n != "bench.ini")
    same = [n for n in names if _csv(os.path.join(SCENARIOS, n)) == _csv(os.path.join(SCENARIOS, n))]
    ok = bool(names) and same == names
    record(10, ok, f"identical CSV bytes on rerun for {len(same)}/{len(names)} scenario files")
    assert ok
