"""Lazy asynchronous multi-tier checkpointing engine and cluster simulator."""
from .buffer_pool import HostBufferPool, Segment, SegmentState
from .consolidation import CommitStatus, Consolidator, Manifest, garbage_collect, latest_committed
from .engine import CaptureTicket, Engine, LocalCluster, TicketStatus, flatten, materialize, restore
from .errors import *  # noqa: F401,F403
from .fileformat import CheckpointFileHeader, HeaderEntry, read_header, write_header
from .simulator import (
    ClusterSpec,
    Metrics,
    PhaseProfile,
    RunConfig,
    Strategy,
    analytic_blocked_time,
    compare_strategies,
    preset_config,
    simulate,
)
from .topology import (
    CheckpointPlan,
    ModelSpec,
    ParallelTopology,
    RankCoord,
    ShardDescriptor,
    checkpoint_size,
    plan_checkpoint,
)
from .transfer import CopyTask, DeviceRegion, ThrottledChannel, TransferEngine

__version__ = "0.1.0"
