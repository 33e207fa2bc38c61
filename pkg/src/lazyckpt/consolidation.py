"""Hierarchical two-phase commit over persisted shard files.

Every rank validates its own files and votes to the leader of its node (the
lowest participating rank on that node). A node leader forwards a single
aggregated vote to the global coordinator (the lowest participating rank
overall, i.e. rank (0,0,0) for a full plan). The coordinator commits by
atomically replacing the manifest; that write is the durable decision point.
Any Failed vote aborts at once; a step still undecided after ``timeout``
seconds is aborted by ``expire``.

Ranks are actors inside one process and talk through a FIFO of typed message
records, which keeps the protocol deterministic and easy to fault-inject.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import re
import shutil
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Set, Tuple

from .errors import CheckpointFormatError, CorruptManifest
from .fileformat import checksum64, read_header
from .topology import CheckpointPlan, ParallelTopology, RankCoord

log = logging.getLogger(__name__)

DEFAULT_COMMIT_TIMEOUT = 30.0
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = 1
_STEP_DIR = re.compile(r"^step-(\d+)$")


def step_dirname(step: int) -> str:
    return f"step-{step}"


def shard_relpath(step: int, rank: RankCoord, name: str) -> str:
    return f"{step_dirname(step)}/{rank.dirname}/{name}.ckpt"


class Vote(enum.Enum):
    NONE = "none"
    PREPARED = "prepared"
    FAILED = "failed"


class CommitStatus(enum.Enum):
    IN_PROGRESS = "in_progress"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass
class CommitRecord:
    step: int
    participants: List[RankCoord]
    votes: Dict[RankCoord, Vote] = field(default_factory=dict)
    status: CommitStatus = CommitStatus.IN_PROGRESS
    started_at: float = 0.0
    decided_at: Optional[float] = None
    reason: str = ""

    def __post_init__(self):
        for r in self.participants:
            self.votes.setdefault(r, Vote.NONE)

    @property
    def decided(self) -> bool:
        return self.status is not CommitStatus.IN_PROGRESS

    def _decide(self, status: CommitStatus, when: float, reason: str = "") -> bool:
        if self.decided:
            return False  # decisions are final
        self.status = status
        self.decided_at = when
        self.reason = reason
        return True


# -- messages -----------------------------------------------------------
@dataclass(frozen=True)
class VoteMsg:
    step: int
    rank: RankCoord
    vote: Vote
    inventory: Tuple[dict, ...] = ()


@dataclass(frozen=True)
class NodeVoteMsg:
    step: int
    node: int
    vote: Vote
    ranks: Tuple[RankCoord, ...]
    inventory: Tuple[dict, ...] = ()


@dataclass(frozen=True)
class DecisionMsg:
    step: int
    status: CommitStatus


class Stage(enum.Enum):
    """Protocol points where ``FaultPlan`` can inject a failure."""

    RANK_CRASH_BEFORE_VOTE = "rank-crash-before-vote"
    RANK_VOTES_FAILED = "rank-votes-failed"
    VOTE_LOST = "vote-lost"
    NODE_LEADER_CRASH = "node-leader-crash"
    NODE_VOTE_LOST = "node-vote-lost"
    COORDINATOR_CRASH_BEFORE_DECISION = "coordinator-crash-before-decision"
    MANIFEST_WRITE_CRASH = "manifest-write-crash"
    DECISION_LOST = "decision-lost"


@dataclass
class FaultPlan:
    """Failures to inject: ``stage`` applied at ``target`` (rank, node or None)."""

    stage: Optional[Stage] = None
    target: object = None

    def hits(self, stage: Stage, target=None) -> bool:
        return self.stage is stage and (self.target is None or self.target == target)


class _CoordinatorCrash(Exception):
    pass


# -- manifest ------------------------------------------------------------
class Manifest:
    """Committed-step registry persisted as JSON and replaced atomically."""

    def __init__(self, path: str, committed: Optional[Dict[int, dict]] = None):
        self.path = path
        self.committed: Dict[int, dict] = dict(committed or {})

    @classmethod
    def load(cls, path: str) -> "Manifest":
        if not os.path.exists(path):
            return cls(path)
        try:
            with open(path, "r", encoding="utf-8") as fp:
                doc = json.load(fp)
            if not isinstance(doc, dict):
                raise CorruptManifest(f"{path}: manifest is not a JSON object")
            if doc.get("format") != MANIFEST_FORMAT:
                raise CorruptManifest(f"{path}: unsupported manifest format {doc.get('format')!r}")
            committed = {int(e["step"]): e for e in doc["committed"]}
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptManifest(f"{path}: {exc}") from exc
        return cls(path, committed)

    @property
    def steps(self) -> List[int]:
        return sorted(self.committed)

    def latest_committed(self) -> Optional[int]:
        return max(self.committed) if self.committed else None

    def files(self, step: int) -> List[dict]:
        return self.committed[step]["files"]

    def to_doc(self) -> dict:
        return {"format": MANIFEST_FORMAT, "committed": [self.committed[s] for s in self.steps]}

    def with_step(self, step: int, files: List[dict], decided_at: float) -> "Manifest":
        entry = {"step": step, "decided_at": decided_at, "files": sorted(files, key=lambda f: f["path"])}
        committed = dict(self.committed)
        committed[step] = entry
        return Manifest(self.path, committed)

    def save(self, crash_before_rename: bool = False) -> None:
        directory = os.path.dirname(self.path) or "."
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".tmp", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8") as fp:
            json.dump(self.to_doc(), fp, indent=1, sort_keys=True)
            fp.write("\n")
            fp.flush()
            os.fsync(fp.fileno())
        if crash_before_rename:
            raise _CoordinatorCrash("crashed between temp write and rename")
        os.replace(tmp, self.path)
        _fsync_dir(directory)


def _fsync_dir(path: str) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def latest_committed(manifest) -> Optional[int]:
    """Highest committed step of a Manifest (or a manifest path)."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = Manifest.load(os.fspath(manifest))
    return manifest.latest_committed()


# -- local validation ------------------------------------------------------
def validate_file(path: str) -> dict:
    """Check one shard file end to end; returns its inventory record.

    Raises CheckpointFormatError / OSError when the file is unusable.
    """
    with open(path, "rb") as fp:
        header = read_header(fp, verify=True)
        fp.seek(0, os.SEEK_END)
        size = fp.tell()
        if size != header.payload_end:
            raise CheckpointFormatError(f"{path}: {size} bytes on disk, header declares {header.payload_end}")
        fp.seek(0)
        whole = checksum64(fp.read())
    return {"size": size, "checksum": f"{whole:016x}"}


class Consolidator:
    def __init__(self, root: str, topology: Optional[ParallelTopology] = None,
                 timeout: float = DEFAULT_COMMIT_TIMEOUT, clock: Callable[[], float] = time.monotonic,
                 faults: Optional[FaultPlan] = None):
        self.root = os.fspath(root)
        self.topology = topology
        self.timeout = timeout
        self.clock = clock
        self.faults = faults or FaultPlan()
        self.manifest = Manifest.load(os.path.join(self.root, MANIFEST_NAME))
        self.records: Dict[int, CommitRecord] = {}
        self.expected: Dict[Tuple[int, RankCoord], List[str]] = {}
        self.vote_threads: List[str] = []
        self._inbox: Deque[object] = deque()
        self._node_votes: Dict[Tuple[int, int], Dict[RankCoord, VoteMsg]] = {}
        self._global_votes: Dict[int, Dict[int, NodeVoteMsg]] = {}
        self._dead: Set[RankCoord] = set()
        self._coordinator_dead = False
        self.delivered_decisions: List[DecisionMsg] = []
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)

    # -- registration ----------------------------------------------------
    def register_plan(self, plan: CheckpointPlan) -> CommitRecord:
        """Record which files each rank must produce for ``plan.step``."""
        with self._lock:
            if self.topology is None:
                self.topology = plan.topology
            for rank in plan.topology.ranks():
                self.expected[(plan.step, rank)] = [
                    shard_relpath(plan.step, rank, s.name) for s in plan.shards.get(rank, ())
                ]
            return self.begin(plan.step, list(plan.topology.ranks()))

    def begin(self, step: int, participants: Iterable[RankCoord]) -> CommitRecord:
        with self._lock:
            rec = self.records.get(step)
            if rec is None:
                rec = CommitRecord(step, sorted(participants, key=self._linear), started_at=self.clock())
                if step in self.manifest.committed:
                    rec._decide(CommitStatus.COMMITTED, self.clock(), "already in manifest")
                self.records[step] = rec
            return rec

    def _linear(self, rank: RankCoord) -> int:
        return self.topology.linear_rank(rank) if self.topology else tuple(rank)

    def _node(self, rank: RankCoord) -> int:
        return self.topology.node_of(rank) if self.topology else 0

    def node_leader(self, step: int, node: int) -> RankCoord:
        rec = self.records[step]
        return min((r for r in rec.participants if self._node(r) == node), key=self._linear)

    def coordinator(self, step: int) -> RankCoord:
        return self.records[step].participants[0]

    # -- phase 1: local validation and votes -----------------------------------
    def local_validate(self, rank: RankCoord, step: int) -> Tuple[Vote, List[dict]]:
        """Prepared iff every expected file exists, matches its header and checksums."""
        inventory = []
        for rel in self.expected.get((step, rank), []):
            path = os.path.join(self.root, rel)
            try:
                info = validate_file(path)
            except (OSError, CheckpointFormatError) as exc:
                log.info("rank %s step %d: %s invalid: %s", rank, step, rel, exc)
                return Vote.FAILED, []
            inventory.append({"path": rel, **info})
        return Vote.PREPARED, inventory

    def vote(self, step: int, rank: RankCoord, ok: bool = True) -> None:
        """Called by a rank once its flushes for ``step`` finished (ok) or failed."""
        with self._lock:
            self.vote_threads.append(threading.current_thread().name)
            if step not in self.records:
                raise KeyError(f"step {step} has no commit record")
            if self.faults.hits(Stage.RANK_CRASH_BEFORE_VOTE, rank):
                self._dead.add(rank)
                return
        # reading and checksumming files is slow; never hold the lock for it
        if ok:
            vote, inventory = self.local_validate(rank, step)
        else:
            vote, inventory = Vote.FAILED, []
        with self._lock:
            if self.faults.hits(Stage.RANK_VOTES_FAILED, rank):
                vote, inventory = Vote.FAILED, []
            if self.faults.hits(Stage.VOTE_LOST, rank):
                return
            self._inbox.append(VoteMsg(step, rank, vote, tuple(inventory)))
            self._pump()

    def _pump(self) -> None:
        while self._inbox:
            msg = self._inbox.popleft()
            if isinstance(msg, VoteMsg):
                self._on_vote(msg)
            elif isinstance(msg, NodeVoteMsg):
                self._on_node_vote(msg)
            elif isinstance(msg, DecisionMsg):
                self.delivered_decisions.append(msg)

    def _on_vote(self, msg: VoteMsg) -> None:
        rec = self.records[msg.step]
        if rec.decided:
            return
        rec.votes[msg.rank] = msg.vote
        node = self._node(msg.rank)
        leader = self.node_leader(msg.step, node)
        if leader in self._dead:
            return
        if self.faults.hits(Stage.NODE_LEADER_CRASH, node):
            self._dead.add(leader)
            return
        got = self._node_votes.setdefault((msg.step, node), {})
        got[msg.rank] = msg
        members = [r for r in rec.participants if self._node(r) == node]
        if msg.vote is Vote.FAILED:
            node_vote = Vote.FAILED
        elif all(r in got and got[r].vote is Vote.PREPARED for r in members):
            node_vote = Vote.PREPARED
        else:
            return
        if self.faults.hits(Stage.NODE_VOTE_LOST, node):
            return
        inventory = tuple(f for r in members if r in got for f in got[r].inventory)
        self._inbox.append(NodeVoteMsg(msg.step, node, node_vote, tuple(members), inventory))

    def _on_node_vote(self, msg: NodeVoteMsg) -> None:
        rec = self.records[msg.step]
        if rec.decided or self._coordinator_dead:
            return
        got = self._global_votes.setdefault(msg.step, {})
        got[msg.node] = msg
        if msg.vote is Vote.FAILED:
            self._finish(rec, CommitStatus.ABORTED, f"node {msg.node} voted failed")
            return
        nodes = {self._node(r) for r in rec.participants}
        if not all(n in got and got[n].vote is Vote.PREPARED for n in nodes):
            return
        if self.faults.hits(Stage.COORDINATOR_CRASH_BEFORE_DECISION, msg.step):
            self._coordinator_dead = True
            return
        files = [f for n in sorted(nodes) for f in got[n].inventory]
        try:
            new = self.manifest.with_step(msg.step, files, time.time())
            new.save(crash_before_rename=self.faults.hits(Stage.MANIFEST_WRITE_CRASH, msg.step))
        except _CoordinatorCrash:
            self._coordinator_dead = True
            return
        except OSError as exc:
            self._finish(rec, CommitStatus.ABORTED, f"manifest write failed: {exc}")
            return
        self.manifest = new
        self._finish(rec, CommitStatus.COMMITTED)

    def _finish(self, rec: CommitRecord, status: CommitStatus, reason: str = "") -> None:
        if rec._decide(status, self.clock(), reason):
            log.info("step %d %s %s", rec.step, status.value, reason)
            if not self.faults.hits(Stage.DECISION_LOST, rec.step):
                self._inbox.append(DecisionMsg(rec.step, status))
            self._cond.notify_all()

    # -- phase 2 helpers -----------------------------------------------------
    def expire(self, force: bool = False) -> List[CommitRecord]:
        """Abort every undecided step older than the timeout (or all of them)."""
        aborted = []
        with self._lock:
            now = self.clock()
            for rec in self.records.values():
                if not rec.decided and (force or now - rec.started_at >= self.timeout):
                    missing = [str(r) for r, v in rec.votes.items() if v is Vote.NONE]
                    self._finish(rec, CommitStatus.ABORTED, f"timeout; no vote from {', '.join(missing) or 'coordinator'}")
                    aborted.append(rec)
            self._pump()
        return aborted

    def hierarchical_commit(self, step: int, participants: Optional[Iterable[RankCoord]] = None) -> CommitRecord:
        """Run validation + voting for every participant that has not voted yet."""
        with self._lock:
            if participants is None:
                rec = self.records[step]
            else:
                rec = self.begin(step, participants)
            for rank in list(rec.participants):
                if rec.decided:
                    break
                if rec.votes[rank] is Vote.NONE and rank not in self._dead:
                    self.vote(step, rank)
            return rec

    def wait_decided(self, step: int, timeout: Optional[float] = None) -> CommitRecord:
        """Block until ``step`` is decided; expires it after the commit timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                rec = self.records[step]
                if rec.decided:
                    return rec
                self.expire()
                if rec.decided:
                    return rec
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return rec
                self._cond.wait(0.05 if remaining is None else min(0.05, remaining))

    def latest_committed(self) -> Optional[int]:
        return self.manifest.latest_committed()


def garbage_collect(root: str, dry_run: bool = False) -> List[str]:
    """Remove step directories that the manifest does not list as committed."""
    manifest = Manifest.load(os.path.join(root, MANIFEST_NAME))
    removed = []
    for name in sorted(os.listdir(root)):
        m = _STEP_DIR.match(name)
        if m and int(m.group(1)) not in manifest.committed:
            removed.append(name)
            if not dry_run:
                shutil.rmtree(os.path.join(root, name))
    for name in os.listdir(root):
        if name.startswith(".manifest-") and name.endswith(".tmp"):
            removed.append(name)
            if not dry_run:
                os.remove(os.path.join(root, name))
    return removed
