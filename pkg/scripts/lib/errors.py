"""Exception hierarchy shared by every kvdesk module."""


class KVDeskError(Exception):
    """Base class; the CLI turns any of these into `[Error]: ...` and exit status 1."""


class ConfigError(KVDeskError):
    pass


class InfeasibleBudget(KVDeskError):
    pass


class NoFreeBlocks(KVDeskError):
    pass


class DoubleFree(KVDeskError):
    pass


class SharedBlockWrite(KVDeskError):
    pass


class SlotOutOfRange(KVDeskError, IndexError):
    pass


class UnboundSlot(KVDeskError):
    pass


class WindowNotFull(KVDeskError):
    pass


class GlobalDisabled(KVDeskError):
    pass


class ZeroNormKey(KVDeskError):
    pass


class BudgetExceedsLength(KVDeskError):
    pass


class NoPreemptable(KVDeskError):
    pass


class CapacityExceeded(KVDeskError):
    """A single request needs more blocks than the whole pool holds."""


class SchemaError(KVDeskError):
    """Workload file problem, carrying the line and field that caused it."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class SchedulerStalled(KVDeskError):
    """Requests remain but no step can make progress."""
