"""Executes mini-IR programs on the initial device agent of a Machine.

Globals become device statics, allocas and byval copies live on the agent's
stack, heap allocations go through the machine allocator. External calls are
lowered once per module and executed as RPCs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import Fault, IRError
from .ir import (
    Alloca, CallExternal, CallLocal, Const, FieldAddr, Free, Gep, HeapAlloc, Load, Loop,
    MiniIR, Return, Select, Store, SIZEOF, is_pointer,
)
from .lowering import Base, LoweringPlan, lower_module
from .memory import SimAddress, Space
from .rpc import build_request

MAX_DEPTH = 64


@dataclass
class Frame:
    func: str
    values: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict)


class _Return(Exception):
    def __init__(self, value):
        self.value = value


def _load_type(ty: str) -> str:
    if is_pointer(ty) or ty == "opaque":
        return "u64"
    return ty


class Interpreter:
    """``handlers`` maps callee names to landing-pad handlers; the host
    library of the machine is used for anything not listed. ``on_call`` is
    invoked as ``on_call(interp, plan, argvals)`` before every RPC."""

    def __init__(self, machine, ir: MiniIR, plans: list[LoweringPlan] | None = None,
                 handlers: dict | None = None, on_call=None):
        self.machine = machine
        self.ir = ir
        self.mem = machine.device_memory
        self.on_call = on_call
        self.plans = {id(p.call): p for p in (lower_module(ir) if plans is None else plans)}
        self.frames: list[Frame] = []
        self.globals: dict[str, SimAddress] = {}
        for g in ir.globals:
            self.globals[g.name] = self.mem.place_static(
                Space.DEVICE, g.init or b"", g.constant, size=g.size, tag=Base(None, g.name))
        handlers = {**machine.library, **(handlers or {})}
        for p in self.plans.values():
            h = handlers.get(p.callee)
            if h is not None:
                machine.register_pad(p.landing_pad, p.callee_id, h)

    # -- object naming --------------------------------------------------------

    def resolve_base(self, base: Base) -> SimAddress | None:
        if base.func is None:
            return self.globals.get(base.name)
        for fr in reversed(self.frames):
            if fr.func == base.func:
                return fr.objects.get(base.name)
        return None

    def global_address(self, name: str) -> SimAddress:
        return self.globals[name]

    # -- execution ------------------------------------------------------------

    def run(self, entry: str = "main", args=()):
        fn = self.ir.function(entry)
        if any(p.byval is not None for p in fn.params):
            raise IRError(f"entry function {entry} cannot take byval parameters")
        return self._call(entry, list(args))

    def _call(self, name: str, argvals: list):
        if len(self.frames) >= MAX_DEPTH:
            raise Fault(f"call depth exceeded entering {name}")
        fn = self.ir.function(name)
        stack = self.machine.stack
        mark = stack.mark()
        frame = Frame(name)
        self.frames.append(frame)
        try:
            for p, v in zip(fn.params, argvals):
                if p.byval is not None:
                    copy = stack.push(p.byval, tag=Base(name, p.name))
                    self.mem.copy(copy, v, p.byval)
                    frame.objects[p.name] = copy
                    v = copy
                frame.values[p.name] = v
            try:
                self._block(frame, fn.body)
            except _Return as r:
                return r.value
            return None
        finally:
            self.frames.pop()
            stack.release(mark)

    def _val(self, frame: Frame, name: str):
        if name.startswith("@"):
            return self.globals[name[1:]]
        return frame.values[name]

    def _block(self, frame: Frame, body) -> None:
        for ins in body:
            self._step(frame, ins)

    def _step(self, frame: Frame, ins) -> None:
        v = frame.values
        if isinstance(ins, Alloca):
            addr = self.machine.stack.push(ins.size, tag=Base(frame.func, ins.dest))
            frame.objects[ins.dest] = addr
            v[ins.dest] = addr
        elif isinstance(ins, FieldAddr):
            v[ins.dest] = self._ptr(frame, ins.base) + ins.offset
        elif isinstance(ins, Gep):
            step = SIZEOF.get(ins.elem, 1)
            v[ins.dest] = self._ptr(frame, ins.base) + int(self._val(frame, ins.index)) * step
        elif isinstance(ins, Select):
            v[ins.dest] = self._val(frame, ins.a if self._val(frame, ins.cond) else ins.b)
        elif isinstance(ins, HeapAlloc):
            v[ins.dest] = self.machine.allocator.allocate(ins.size)
        elif isinstance(ins, Free):
            self.machine.allocator.deallocate(self._ptr(frame, ins.ptr))
        elif isinstance(ins, Load):
            raw = self.mem.load(self._ptr(frame, ins.ptr), _load_type(ins.type))
            v[ins.dest] = SimAddress.from_raw(raw) if is_pointer(ins.type) else raw
        elif isinstance(ins, Store):
            ty = self.ir.type_of(frame.func, ins.value)
            val = self._val(frame, ins.value)
            if isinstance(val, SimAddress) or val is None:
                val = 0 if val is None else val.raw
            elif ty in ("f32", "f64"):
                val = float(val)
            self.mem.store(self._ptr(frame, ins.ptr), _load_type(ty), val)
        elif isinstance(ins, Const):
            v[ins.dest] = ins.value
        elif isinstance(ins, Loop):
            for _ in range(ins.count):
                self._block(frame, ins.body)
        elif isinstance(ins, CallLocal):
            ret = self._call(ins.callee, [self._val(frame, a) for a in ins.args])
            if ins.dest:
                v[ins.dest] = ret
        elif isinstance(ins, CallExternal):
            ret = self._external(frame, ins)
            if ins.dest:
                v[ins.dest] = ret
        elif isinstance(ins, Return):
            raise _Return(None if ins.value is None else self._val(frame, ins.value))
        else:  # pragma: no cover - the parser produces nothing else
            raise IRError(f"cannot execute {ins!r}")

    def _ptr(self, frame: Frame, name: str) -> SimAddress:
        p = self._val(frame, name)
        if not isinstance(p, SimAddress):
            raise Fault(f"{name} in {frame.func} is not a valid address ({p!r})")
        return p

    def _external(self, frame: Frame, call: CallExternal):
        plan = self.plans[id(call)]
        argvals = [self._val(frame, a) for a in call.args]
        if self.on_call is not None:
            self.on_call(self, plan, argvals)
        m = self.machine
        req = build_request(plan, argvals, self.resolve_base, m.find_object)
        ret = m.client.issue_call(req)
        if call.type in ("f32", "f64"):
            return struct.unpack("<d", struct.pack("<q", ret))[0]
        if call.type == "i32":
            ret &= 0xFFFF_FFFF
            return ret - (1 << 32) if ret >> 31 else ret
        return ret
