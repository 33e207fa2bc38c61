"""Scenario files: INI with [model], [cluster], [strategy] and [run] sections.

Any value may be a comma-separated list; lists in ``model.preset``,
``cluster.dp``, ``strategy.name`` and ``run.checkpoint_every`` expand into a
run matrix (model, dp, checkpoint_every, strategy; the last varies fastest).
Sizes take decimal or binary suffixes (``16GB``, ``64MiB``), rates an
optional ``/s`` (``25GB/s``).
"""
from __future__ import annotations

import configparser
import io
import itertools
import re
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, List, Optional, Set, Tuple

from .buffer_pool import DEFAULT_CAPACITY
from .errors import ConfigError
from .simulator import (
    MODEL_PRESETS,
    ClusterSpec,
    PhaseProfile,
    RunConfig,
    Strategy,
    preset_config,
)
from .topology import ModelSpec, ParallelTopology
from .transfer import DEFAULT_CHUNK_QUANTUM

_UNITS = {
    "": 1, "b": 1,
    "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
    "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12,
    "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40,
}
_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:e[+-]?[0-9]+)?)\s*([a-z]*)\s*(/s)?\s*$", re.IGNORECASE)


def parse_size(text: str) -> float:
    m = _SIZE.match(str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise ConfigError(f"cannot parse size {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower()]


def parse_int_size(text: str) -> int:
    return int(round(parse_size(text)))


def parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_every(text: str) -> Optional[int]:
    v = text.strip().lower()
    if v in ("none", "never", "0", ""):
        return None
    return int(v)


def _split(text: str) -> List[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


@dataclass
class ScenarioConfig:
    # [model]
    presets: List[str] = field(default_factory=lambda: ["13B"])
    param_count: Optional[int] = None  # custom model instead of presets
    layer_count: int = 4
    hidden_dim: int = 1024
    bytes_per_param_model: float = 2.0
    bytes_per_param_optimizer: float = 12.0
    # [cluster]
    dp: List[int] = field(default_factory=lambda: [1])
    pp: Optional[int] = None  # presets: nodes per replica
    tp: Optional[int] = None  # presets: 4
    gpus_per_node: int = 4
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    # [strategy]
    strategies: List[Strategy] = field(default_factory=lambda: [Strategy.parse(s) for s in
                                                                  ("sync", "async_snapshot", "chunked", "lazy")])
    threads: int = 4
    exempt_last_shard: bool = False
    # [run]
    iterations: int = 10
    checkpoint_every: List[Optional[int]] = field(default_factory=lambda: [1])
    buffer_capacity: int = DEFAULT_CAPACITY
    chunk_quantum: int = DEFAULT_CHUNK_QUANTUM
    iteration_s: Optional[float] = None
    t_forward: Optional[float] = None
    t_backward: Optional[float] = None
    t_update: Optional[float] = None
    csv: Optional[str] = None
    state_size: Optional[int] = None  # bench: total checkpoint bytes
    given: Set[str] = field(default_factory=set, compare=False, repr=False)  # "section.key" set in the file

    # -- expansion -------------------------------------------------------
    def phases_for(self, default: PhaseProfile) -> PhaseProfile:
        ph = PhaseProfile.from_iteration(self.iteration_s) if self.iteration_s is not None else default
        return PhaseProfile(
            ph.t_forward if self.t_forward is None else self.t_forward,
            ph.t_backward if self.t_backward is None else self.t_backward,
            ph.t_update if self.t_update is None else self.t_update,
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.param_count, self.layer_count, self.hidden_dim,
                         self.bytes_per_param_model, self.bytes_per_param_optimizer, name="custom")

    def _strategy(self, s: Strategy) -> Strategy:
        return replace(s, threads=s.threads if s.threads != 4 else self.threads,
                       exempt_last_shard=self.exempt_last_shard)

    def runs(self) -> Iterator[RunConfig]:
        models = [None] if self.param_count is not None else self.presets
        for model, dp, every, strat in itertools.product(models, self.dp, self.checkpoint_every, self.strategies):
            strat = self._strategy(strat)
            common = dict(buffer_capacity=self.buffer_capacity, chunk_quantum=self.chunk_quantum)
            if model is None:
                pp, tp = self.pp or 1, self.tp or 1
                world = dp * pp * tp
                gpn = min(self.gpus_per_node, world)
                if world % gpn:
                    raise ConfigError(f"world size {world} not divisible by gpus_per_node {gpn}")
                topo = ParallelTopology(dp, pp, tp, gpn, world // gpn)
                cluster = replace(self.cluster, node_count=topo.node_count, gpus_per_node=gpn)
                phases = self.phases_for(PhaseProfile.from_iteration(1.0))
                yield RunConfig(cluster, topo, self.model_spec(), phases, strat, self.iterations, every, **common)
            else:
                if self.pp is not None or self.tp is not None:
                    raise ConfigError("pp/tp are fixed by model presets; set model.param_count for a custom layout")
                cfg = preset_config(model, dp, strat, self.iterations, every, cluster=self.cluster, **common)
                yield replace(cfg, phases=self.phases_for(cfg.phases))


_CLUSTER_RATES = ("b_d2h_pinned", "b_d2h_unpinned", "b_d2d", "b_pfs_aggregate", "per_writer_cap", "alloc_bandwidth")
_KEYS = {
    "model": {"preset", "param_count", "layer_count", "hidden_dim", "bytes_per_param_model", "bytes_per_param_optimizer"},
    "cluster": {"dp", "pp", "tp", "gpus_per_node", *_CLUSTER_RATES},
    "strategy": {"name", "threads", "exempt_last_shard"},
    "run": {"iterations", "checkpoint_every", "buffer_capacity", "chunk_quantum", "iteration_s",
            "t_forward", "t_backward", "t_update", "csv", "state_size"},
}


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))


def parse_config(text: str) -> ScenarioConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in cp.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(cp[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    sc = ScenarioConfig()
    sc.given = {f"{sec}.{key}" for sec in cp.sections() for key in cp[sec]}
    get = lambda sec, key: cp.get(sec, key) if cp.has_option(sec, key) else None  # noqa: E731
    try:
        if (v := get("model", "preset")) is not None:
            sc.presets = _split(v)
            for p in sc.presets:
                if p not in MODEL_PRESETS:
                    raise ConfigError(f"unknown model preset {p!r}; choose from {', '.join(MODEL_PRESETS)}")
        if (v := get("model", "param_count")) is not None:
            sc.param_count = parse_int_size(v)
        for key in ("layer_count", "hidden_dim"):
            if (v := get("model", key)) is not None:
                setattr(sc, key, int(v))
        for key in ("bytes_per_param_model", "bytes_per_param_optimizer"):
            if (v := get("model", key)) is not None:
                setattr(sc, key, float(v))
        if (v := get("cluster", "dp")) is not None:
            sc.dp = [int(x) for x in _split(v)]
        for key in ("pp", "tp", "gpus_per_node"):
            if (v := get("cluster", key)) is not None:
                setattr(sc, key, int(v))
        rates = {k: parse_size(cp.get("cluster", k)) for k in _CLUSTER_RATES if cp.has_option("cluster", k)}
        sc.cluster = replace(sc.cluster, **rates)
        if (v := get("strategy", "threads")) is not None:
            sc.threads = int(v)
        if (v := get("strategy", "exempt_last_shard")) is not None:
            sc.exempt_last_shard = parse_bool(v)
        if (v := get("strategy", "name")) is not None:
            sc.strategies = [Strategy.parse(s) for s in _split(v)]
        if (v := get("run", "iterations")) is not None:
            sc.iterations = int(v)
        if (v := get("run", "checkpoint_every")) is not None:
            sc.checkpoint_every = [parse_every(x) for x in v.split(",")]
        for key in ("buffer_capacity", "chunk_quantum", "state_size"):
            if (v := get("run", key)) is not None:
                setattr(sc, key, parse_int_size(v))
        for key in ("iteration_s", "t_forward", "t_backward", "t_update"):
            if (v := get("run", key)) is not None:
                setattr(sc, key, float(v))
        sc.csv = get("run", "csv")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if not sc.dp or not sc.strategies or not sc.checkpoint_every or not sc.presets:
        raise ConfigError("list values must not be empty")
    sc.cluster.validate()
    return sc


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return parse_config(fp.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return f"{v:.0f}" if abs(v) < 1e6 else f"{v:g}"
    return str(v)


def defaults_text() -> str:
    """Every key with its default value, as a ready-to-edit scenario file."""
    sc = ScenarioConfig()
    cp = _parser()
    cp["model"] = {
        "preset": ", ".join(sc.presets),
        "# param_count": "set to model a custom layout instead of presets",
        "layer_count": str(sc.layer_count),
        "hidden_dim": str(sc.hidden_dim),
        "bytes_per_param_model": _fmt(sc.bytes_per_param_model),
        "bytes_per_param_optimizer": _fmt(sc.bytes_per_param_optimizer),
    }
    cp["cluster"] = {"dp": "1", "# pp": "custom models only", "# tp": "custom models only",
                     "gpus_per_node": str(sc.gpus_per_node)}
    for f in fields(ClusterSpec):
        if f.name in _CLUSTER_RATES:
            cp["cluster"][f.name] = f"{getattr(sc.cluster, f.name) / 1e9:g}GB/s"
    cp["strategy"] = {"name": "sync, async_snapshot, chunked, lazy", "threads": str(sc.threads),
                      "exempt_last_shard": "false"}
    cp["run"] = {
        "iterations": str(sc.iterations),
        "checkpoint_every": "1",
        "buffer_capacity": "16GB",
        "chunk_quantum": "64MiB",
        "# iteration_s": "override the preset iteration time",
        "# t_forward": "seconds; overrides the preset split",
        "# t_backward": "seconds",
        "# t_update": "seconds",
        "# csv": "output path (default stdout)",
        "# state_size": "bench only: total checkpoint bytes",
    }
    out = io.StringIO()
    cp.write(out)
    return out.getvalue()


def scenario_matrix(sc: ScenarioConfig) -> List[Tuple[str, int, Optional[int], str]]:
    """(model, dp, checkpoint_every, strategy) labels in row order."""
    return [(r.model.name, r.topology.dp_degree, r.checkpoint_every, r.strategy.name) for r in sc.runs()]


__all__ = ["ScenarioConfig", "defaults_text", "load_config", "parse_config", "parse_size", "scenario_matrix"]
