"""One simulated system: device, host and shared memory plus its agents.

Device memory layout::

    [0, static_size)                      globals and other statics
    [static_size, static_size+stack_size) the initial agent's stack
    [.., device_capacity)                 heap, owned by the allocator
"""

from __future__ import annotations

from dataclasses import dataclass

from .allocators import ObjectLookup, make_allocator
from .hostlib import HostFiles, make_library
from .memory import Memory, MemorySpace, SimAddress, Space, StackArena
from .protocol import DEFAULT_PAYLOAD_CAPACITY, KERNEL_LAUNCH_CALLEE, Mailbox
from .rpc import LandingPad, RPCClient, RPCServer
from .runtime import MultiTeamRuntime


@dataclass
class MachineConfig:
    device_capacity: int = 64 << 20
    host_capacity: int = 16 << 20
    shared_capacity: int = 64 << 10
    allocator: str = "balanced:32,16"
    static_size: int = 1 << 20
    stack_size: int = 1 << 20
    payload_capacity: int = DEFAULT_PAYLOAD_CAPACITY
    agent_limit: int = 4096
    pool_width: int = 32
    watchdog_s: float = 30.0
    handler_delay_s: float = 0.0


class Machine:
    def __init__(self, config: MachineConfig | None = None):
        self.config = cfg = config or MachineConfig()
        heap_base = cfg.static_size + cfg.stack_size
        if heap_base >= cfg.device_capacity:
            raise ValueError("device memory too small for statics and stack")
        self.spaces = {
            Space.DEVICE: MemorySpace(Space.DEVICE, cfg.device_capacity, cfg.static_size),
            Space.HOST: MemorySpace(Space.HOST, cfg.host_capacity),
            Space.SHARED: MemorySpace(Space.SHARED, cfg.shared_capacity),
        }
        self.memory = Memory(self.spaces)
        self.device_memory = self.memory.view(Space.DEVICE, Space.SHARED)
        self.host_memory = self.memory.view(Space.HOST, Space.SHARED)
        dev = self.spaces[Space.DEVICE]
        self.stack = StackArena(dev, cfg.static_size, heap_base)
        self.allocator = make_allocator(cfg.allocator, dev, heap_base,
                                        cfg.device_capacity - heap_base)
        self.mailbox = Mailbox(self.spaces[Space.SHARED], 0, cfg.payload_capacity)
        self.server = RPCServer(self.mailbox, self.host_memory)
        self.client = RPCClient(self.mailbox, self.device_memory, cfg.watchdog_s)
        self.files = HostFiles(self.host_memory)
        self.library = make_library(self.files, cfg.handler_delay_s)
        self.runtime = MultiTeamRuntime(self, cfg.agent_limit, cfg.pool_width, cfg.watchdog_s)
        self.server.register(LandingPad("__kernel_launch", KERNEL_LAUNCH_CALLEE,
                                        self.runtime.launch_pad))

    def find_object(self, addr: SimAddress | None) -> ObjectLookup | None:
        """Object containing ``addr`` among heap, device statics and the stack."""
        if addr is None or addr.space != Space.DEVICE:
            return None
        rec = self.allocator.find_object(addr)
        if rec is None:
            rec = self.spaces[Space.DEVICE].find_static(addr.offset)
        if rec is None:
            rec = self.stack.find(addr)
        if rec is None or not rec.live:
            return None
        return ObjectLookup(rec.base, rec.size, addr - rec.base, rec)

    def register_pad(self, name: str, callee_id: int, handler) -> LandingPad:
        return self.server.register(LandingPad(name, callee_id, handler), replace=True)

    def start(self) -> Machine:
        self.server.start()
        return self

    def stop(self) -> None:
        self.server.stop()
        self.runtime.shutdown()

    def __enter__(self) -> Machine:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
