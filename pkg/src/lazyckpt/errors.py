"""Exception hierarchy shared by the engine, file format and simulator."""


class LazyCkptError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(LazyCkptError, ValueError):
    pass


class TopologyError(ConfigError):
    pass


class PlanImbalance(ConfigError):
    pass


class ConfigInvalid(ConfigError):
    """Raised by the simulator for an unusable RunConfig."""


# buffer pool
class SizeExceedsCapacity(LazyCkptError):
    pass


class WaitTimeout(LazyCkptError):
    pass


class IllegalTransition(LazyCkptError):
    pass


# transfers / engine
class TornSnapshot(LazyCkptError):
    """A source region changed while its snapshot copy was in flight."""


class DuplicatePath(LazyCkptError, ValueError):
    pass


class NotCommitted(LazyCkptError):
    pass


class EngineClosed(LazyCkptError):
    pass


# file format
class CheckpointFormatError(LazyCkptError):
    pass


class BadMagic(CheckpointFormatError):
    pass


class TruncatedFile(CheckpointFormatError):
    pass


class ChecksumMismatch(CheckpointFormatError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"checksum mismatch for entry {key!r}")


# storage
class IOFailure(LazyCkptError, OSError):
    pass


class StorageFull(IOFailure):
    pass


class SimulatedCrash(LazyCkptError):
    """Injected to emulate the process dying mid-flush."""


# consolidation
class CorruptManifest(LazyCkptError):
    pass
