"""Exception hierarchy shared by every layer of the simulator.

Faults are ordinary exceptions: the simulator keeps running after one so it
can be reported, it never takes the process down.
"""


class SimError(Exception):
    """Base class for all simulator errors."""


# memory
class OutOfMemory(SimError):
    pass


class Fault(SimError):
    """Out-of-bounds or wrong-space access (a simulated segfault)."""


class ConstnessViolation(Fault):
    pass


class TranslationMiss(SimError):
    pass


# allocators
class InvalidFree(SimError):
    pass


class ConfigError(SimError, ValueError):
    pass


# rpc
class ManglingError(SimError, ValueError):
    pass


class PayloadOverflow(SimError):
    pass


class DispatchError(SimError):
    """The host server had no landing pad for the requested callee."""


class RemoteFault(SimError):
    """The host landing pad raised while serving a call."""


class InternalInconsistency(SimError):
    """A runtime dispatch found no candidate the analysis promised."""


# runtime
class DeadlockError(SimError, TimeoutError):
    """A blocking operation exceeded the watchdog limit."""


class LaunchRejected(SimError):
    pass


class RegionFault(SimError):
    def __init__(self, region_id, cause):
        super().__init__(f"parallel region {region_id} faulted: {cause!r}")
        self.region_id = region_id
        self.cause = cause


# mini IR
class IRError(SimError):
    pass


class ParseError(IRError):
    def __init__(self, message, line=0, column=0):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class ResolveError(ParseError):
    pass
