"""3D-parallel cluster description and checkpoint shard planning.

A plan assigns every byte of the model parameters and of the optimizer state
to exactly one rank:

* model parameters are spread uniformly over layers, layers are assigned to
  pipeline stages in contiguous blocks, each layer is sliced across the
  tensor-parallel ranks of its stage, and each slice is further split across
  the data-parallel replicas so that checkpoint writing is partitioned;
* optimizer state is partitioned over all ranks (ZeRO stage 1).

All byte counts are integers; remainders are handed to the lowest indices so
the sum of shard sizes always equals ``checkpoint_size(model)`` exactly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

from .errors import PlanImbalance, TopologyError

DEFAULT_BYTES_PER_PARAM_MODEL = 2  # fp16 parameters
DEFAULT_BYTES_PER_PARAM_OPTIMIZER = 12  # fp32 master copy, momentum, variance
DEFAULT_MAX_SKEW = 0.10


class RankCoord(NamedTuple):
    dp: int
    pp: int
    tp: int

    @property
    def dirname(self) -> str:
        return f"rank-{self.dp}-{self.pp}-{self.tp}"

    def __str__(self) -> str:
        return f"({self.dp},{self.pp},{self.tp})"


@dataclass(frozen=True)
class ParallelTopology:
    dp_degree: int
    pp_degree: int
    tp_degree: int
    gpus_per_node: int
    node_count: int

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_degrees(cls, dp: int = 1, pp: int = 1, tp: int = 1, gpus_per_node: Optional[int] = None):
        """Build a topology and derive ``node_count`` from the rank count.

        ``gpus_per_node`` defaults to ``min(4, total ranks)``.
        """
        total = dp * pp * tp
        if gpus_per_node is None:
            gpus_per_node = max(1, min(4, total))
        if total % gpus_per_node:
            raise TopologyError(f"{total} ranks do not fill nodes of {gpus_per_node} GPUs")
        return cls(dp, pp, tp, gpus_per_node, total // gpus_per_node)

    def validate(self) -> None:
        for name in ("dp_degree", "pp_degree", "tp_degree", "gpus_per_node", "node_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise TopologyError(f"{name} must be a positive integer, got {value!r}")
        if self.tp_degree > self.gpus_per_node:
            raise TopologyError(
                f"tp_degree={self.tp_degree} exceeds gpus_per_node={self.gpus_per_node}; "
                "tensor parallelism must stay within a node"
            )
        if self.world_size != self.gpus_per_node * self.node_count:
            raise TopologyError(
                f"dp*pp*tp={self.world_size} != gpus_per_node*node_count="
                f"{self.gpus_per_node * self.node_count}"
            )

    @property
    def world_size(self) -> int:
        return self.dp_degree * self.pp_degree * self.tp_degree

    def linear_rank(self, coord: RankCoord) -> int:
        return coord.tp + self.tp_degree * (coord.pp + self.pp_degree * coord.dp)

    def coord(self, rank: int) -> RankCoord:
        tp = rank % self.tp_degree
        rest = rank // self.tp_degree
        return RankCoord(rest // self.pp_degree, rest % self.pp_degree, tp)

    def node_of(self, coord: RankCoord) -> int:
        return self.linear_rank(coord) // self.gpus_per_node

    def ranks(self) -> Iterator[RankCoord]:
        for r in range(self.world_size):
            yield self.coord(r)


@dataclass(frozen=True)
class ModelSpec:
    param_count: int
    layer_count: int
    hidden_dim: int = 0
    bytes_per_param_model: float = DEFAULT_BYTES_PER_PARAM_MODEL
    bytes_per_param_optimizer: float = DEFAULT_BYTES_PER_PARAM_OPTIMIZER
    name: str = ""

    def __post_init__(self):
        if self.param_count < 0:
            raise TopologyError("param_count must be >= 0")
        if self.layer_count < 1:
            raise TopologyError("layer_count must be >= 1")
        if self.bytes_per_param_model <= 0 or self.bytes_per_param_optimizer <= 0:
            raise TopologyError("bytes_per_param values must be > 0")

    @property
    def model_bytes(self) -> int:
        return round(self.param_count * self.bytes_per_param_model)

    @property
    def optimizer_bytes(self) -> int:
        return round(self.param_count * self.bytes_per_param_optimizer)


def checkpoint_size(model: ModelSpec) -> int:
    """Aggregate checkpoint bytes: parameters plus optimizer state."""
    return model.model_bytes + model.optimizer_bytes


class ShardKind(enum.Enum):
    LAYER = "layer"
    OPTIMIZER = "optim"


@dataclass(frozen=True)
class ShardDescriptor:
    kind: ShardKind
    owner: RankCoord
    size_bytes: int
    layer_range: Optional[Tuple[int, int]] = None  # [start, stop) for layer shards
    partition: Optional[int] = None  # optimizer partition index

    @property
    def index(self) -> tuple:
        """Ownership key; unique across the whole plan together with ``kind``."""
        if self.kind is ShardKind.LAYER:
            return (self.layer_range, self.owner.tp, self.owner.dp)
        return (self.partition,)

    @property
    def name(self) -> str:
        """File stem, unique within the owning rank's directory."""
        if self.kind is ShardKind.LAYER:
            start, stop = self.layer_range
            if stop - start == 1:
                return f"layer-{start:04d}"
            return f"layer-{start:04d}_{stop:04d}"
        return f"optim-{self.partition:05d}"

    @property
    def shard_id(self) -> str:
        return f"{self.owner.dirname}/{self.name}"


@dataclass
class CheckpointPlan:
    step: int
    topology: ParallelTopology
    model: ModelSpec
    shards: Dict[RankCoord, List[ShardDescriptor]] = field(default_factory=dict)

    def rank_bytes(self, rank: RankCoord) -> int:
        return sum(s.size_bytes for s in self.shards.get(rank, ()))

    @property
    def total_bytes(self) -> int:
        return sum(self.rank_bytes(r) for r in self.shards)

    def per_rank_bytes(self) -> Dict[RankCoord, int]:
        return {r: self.rank_bytes(r) for r in self.topology.ranks()}

    def imbalance(self) -> float:
        """max/min per-rank bytes minus one (0.0 means perfectly balanced)."""
        sizes = list(self.per_rank_bytes().values())
        lo, hi = min(sizes), max(sizes)
        if hi == 0:
            return 0.0
        if lo == 0:
            return float("inf")
        return hi / lo - 1.0

    def all_shards(self) -> Iterator[ShardDescriptor]:
        for r in self.topology.ranks():
            yield from self.shards.get(r, ())

    def for_step(self, step: int) -> "CheckpointPlan":
        return CheckpointPlan(step, self.topology, self.model, self.shards)


def split_even(total: int, parts: int) -> List[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def stage_layers(layer_count: int, pp_degree: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) layer blocks per pipeline stage."""
    bounds, start = [], 0
    for n in split_even(layer_count, pp_degree):
        bounds.append((start, start + n))
        start += n
    return bounds


def plan_checkpoint(
    topology: ParallelTopology,
    model: ModelSpec,
    step: int = 0,
    max_skew: Optional[float] = DEFAULT_MAX_SKEW,
) -> CheckpointPlan:
    topology.validate()
    if model.param_count <= 0:
        raise TopologyError("cannot plan a checkpoint for a model without parameters")

    shards: Dict[RankCoord, List[ShardDescriptor]] = {r: [] for r in topology.ranks()}
    layer_bytes = split_even(model.model_bytes, model.layer_count)
    for pp, (start, stop) in enumerate(stage_layers(model.layer_count, topology.pp_degree)):
        for layer in range(start, stop):
            for tp, tp_bytes in enumerate(split_even(layer_bytes[layer], topology.tp_degree)):
                for dp, nbytes in enumerate(split_even(tp_bytes, topology.dp_degree)):
                    if nbytes == 0:
                        continue
                    owner = RankCoord(dp, pp, tp)
                    shards[owner].append(
                        ShardDescriptor(ShardKind.LAYER, owner, nbytes, layer_range=(layer, layer + 1))
                    )

    opt_bytes = split_even(model.optimizer_bytes, topology.world_size)
    for rank, nbytes in enumerate(opt_bytes):
        if nbytes == 0:
            continue
        owner = topology.coord(rank)
        shards[owner].append(ShardDescriptor(ShardKind.OPTIMIZER, owner, nbytes, partition=rank))

    plan = CheckpointPlan(step, topology, model, shards)
    if max_skew is not None and plan.imbalance() > max_skew:
        raise PlanImbalance(
            f"per-rank checkpoint bytes skewed by {plan.imbalance():.1%} (limit {max_skew:.0%})"
        )
    return plan
