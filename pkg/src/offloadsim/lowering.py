"""Call-site lowering: classify the arguments of every external call.

For each pointer argument the analysis walks back through ``fieldaddr``,
``select`` and local-call parameters to the objects it may point into. One
known object gives a ``StaticRef``, a finite set gives a ``Dispatch`` that is
resolved at run time by pointer comparison, anything else a ``DynamicLookup``.
Non-pointer and opaque arguments are passed as ``Value``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import IRError
from .ir import Alloca, CallExternal, CallLocal, FieldAddr, MiniIR, Select, Store, is_pointer, walk
from .protocol import AccessMode, KERNEL_LAUNCH_CALLEE, mangle, type_code

_EFFECT_MODES = {
    "read": AccessMode.READ,
    "write": AccessMode.WRITE,
    "readwrite": AccessMode.READWRITE,
}


# --- analysis results ---------------------------------------------------------

@dataclass(frozen=True)
class Base:
    """An object the analysis can name: a global (``func`` is None), an alloca
    or a byval parameter of ``func``."""

    func: str | None
    name: str

    def __str__(self) -> str:
        return f"@{self.name}" if self.func is None else self.name


@dataclass(frozen=True)
class Unique:
    base: Base
    offset: int


@dataclass(frozen=True)
class Candidates:
    items: tuple[tuple[Base, int], ...]


@dataclass(frozen=True)
class Unknown:
    reason: str = ""


# --- classifications ----------------------------------------------------------

@dataclass(frozen=True)
class Value:
    def __str__(self) -> str:
        return "Value"


@dataclass(frozen=True)
class StaticRef:
    obj: Base
    offset: int
    size: int
    mode: AccessMode

    def short(self) -> str:
        return f"({self.obj},{self.offset},{self.size},{self.mode})"

    def __str__(self) -> str:
        return f"StaticRef{self.short()}"


@dataclass(frozen=True)
class Dispatch:
    candidates: tuple[StaticRef, ...]

    def __str__(self) -> str:
        return "Dispatch{" + ",".join(c.short() for c in self.candidates) + "}"


@dataclass(frozen=True)
class DynamicLookup:
    mode: AccessMode

    def __str__(self) -> str:
        return f"DynamicLookup({self.mode})"


Classification = Value | StaticRef | Dispatch | DynamicLookup


@dataclass(frozen=True)
class LoweringPlan:
    call_site: str
    func: str
    call: CallExternal
    args: tuple
    landing_pad: str
    derived_pad: str
    callee_id: int

    @property
    def callee(self) -> str:
        return self.call.callee

    def __str__(self) -> str:
        cls = ", ".join(str(a) for a in self.args)
        return f"{self.call_site} {self.landing_pad} id={self.callee_id} [{cls}]"


# --- module facts -------------------------------------------------------------

class _Facts:
    """Per-module lookups the analysis needs, computed once."""

    def __init__(self, ir: MiniIR):
        self.ir = ir
        self.funcs = {f.name: f for f in ir.functions}
        self.defs: dict[str, dict[str, tuple[object, bool]]] = {}
        self.callers: dict[str, list[tuple[str, CallLocal]]] = {f.name: [] for f in ir.functions}
        edges: dict[str, set[str]] = {f.name: set() for f in ir.functions}
        for f in ir.functions:
            d = {}
            for ins, in_loop in walk(f.body):
                dest = getattr(ins, "dest", None)
                if dest:
                    d[dest] = (ins, in_loop)
                if isinstance(ins, CallLocal):
                    self.callers[ins.callee].append((f.name, ins))
                    edges[f.name].add(ins.callee)
            self.defs[f.name] = d
        self.recursive = {f for f in edges if self._reaches(edges, f, f)}

    @staticmethod
    def _reaches(edges, start, goal) -> bool:
        seen, todo = set(), list(edges[start])
        while todo:
            n = todo.pop()
            if n == goal:
                return True
            if n not in seen:
                seen.add(n)
                todo.extend(edges[n])
        return False

    def param(self, func: str, name: str):
        for i, p in enumerate(self.funcs[func].params):
            if p.name == name:
                return i, p
        return None

    def object_size(self, base: Base) -> int:
        if base.func is None:
            return self.ir.global_(base.name).size
        hit = self.defs[base.func].get(base.name)
        if hit is not None and isinstance(hit[0], Alloca):
            return hit[0].size
        return self.param(base.func, base.name)[1].byval

    def constant(self, base: Base) -> bool:
        return base.func is None and self.ir.global_(base.name).constant


def _facts(ir: MiniIR) -> _Facts:
    # keyed by object, not equality: the analysis matches instructions by identity
    facts = ir.analysis_cache.get("lowering")
    if facts is None:
        facts = ir.analysis_cache["lowering"] = _Facts(ir)
    return facts


# --- underlying objects -------------------------------------------------------

# how many local-call boundaries a parameter may be traced through
SUMMARY_DEPTH = 1


def underlying_objects(ir: MiniIR, func: str, value: str, depth: int = SUMMARY_DEPTH):
    """Objects ``value`` (a pointer in ``func``) may point into."""
    facts = _facts(ir)
    found: list[tuple[Base, int]] = []
    reason = _collect(facts, func, value, 0, depth, found)
    if reason is not None:
        return Unknown(reason)
    uniq = list(dict.fromkeys(found))
    if len(uniq) == 1:
        return Unique(*uniq[0])
    return Candidates(tuple(uniq))


def _collect(facts: _Facts, func: str, value: str, offset: int, depth: int, out) -> str | None:
    """Append ``(base, offset)`` pairs to ``out``; return a reason on failure."""
    if value.startswith("@"):
        out.append((Base(None, value[1:]), offset))
        return None
    hit = facts.defs[func].get(value)
    if hit is None:
        p = facts.param(func, value)
        if p is None:
            return f"{value} is not defined in {func}"
        index, param = p
        if param.byval is not None:
            if func in facts.recursive:
                return f"byval {value} of recursive {func}"
            out.append((Base(func, value), offset))
            return None
        if depth <= 0:
            return f"parameter {value} of {func} beyond summary depth"
        sites = facts.callers[func]
        if not sites:
            return f"parameter {value} of entry function {func}"
        for caller, call in sites:
            r = _collect(facts, caller, call.args[index], offset, depth - 1, out)
            if r is not None:
                return r
        return None
    ins, in_loop = hit
    if isinstance(ins, Alloca):
        if in_loop:
            return f"alloca {value} inside a loop"
        if func in facts.recursive:
            return f"alloca {value} in recursive {func}"
        out.append((Base(func, value), offset))
        return None
    if isinstance(ins, FieldAddr):
        return _collect(facts, func, ins.base, offset + ins.offset, depth, out)
    if isinstance(ins, Select):
        return (_collect(facts, func, ins.a, offset, depth, out)
                or _collect(facts, func, ins.b, offset, depth, out))
    return f"{value} comes from {type(ins).__name__}"


# --- classification -----------------------------------------------------------

def _static_ref(facts: _Facts, func: str, call: CallExternal, base: Base, offset: int,
                mode: AccessMode) -> StaticRef | None:
    size = facts.object_size(base)
    if not 0 <= offset < size:
        return None
    if facts.constant(base):
        mode = AccessMode.READ
    elif mode == AccessMode.READWRITE and _write_only(facts, func, call, base):
        mode = AccessMode.WRITE
    return StaticRef(base, offset, size, mode)


def _write_only(facts: _Facts, func: str, call: CallExternal, base: Base) -> bool:
    """True when ``base`` certainly holds no defined value at ``call``.

    Only a non-looped alloca of the calling function qualifies, and only if
    nothing before the call stores to it, stores its address, or hands its
    address to another call.
    """
    if base.func != func:
        return False
    d = facts.defs[func].get(base.name)
    if d is None or not isinstance(d[0], Alloca) or d[1]:
        return False

    def mentions(v: str) -> bool:
        if v.startswith("@") or v == base.name:
            return v == base.name
        found: list = []
        r = _collect(facts, func, v, 0, 0, found)
        return r is None and any(b == base for b, _ in found)

    for ins, in_loop in walk(facts.funcs[func].body):
        if ins is call:
            return not in_loop
        if isinstance(ins, Store):
            if mentions(ins.ptr) or mentions(ins.value):
                return False
        elif isinstance(ins, (CallLocal, CallExternal)):
            if any(mentions(a) for a in ins.args):
                return False
    return False


def classify_arg(ir: MiniIR, func: str, call: CallExternal, index: int) -> Classification:
    facts = _facts(ir)
    arg = call.args[index]
    ext = ir.extern(call.callee)
    effect = ext.params[index] if index < len(ext.params) else "readwrite"
    if effect in ("opaque", "value") or not is_pointer(ir.type_of(func, arg)):
        return Value()
    mode = _EFFECT_MODES[effect]
    found = underlying_objects(ir, func, arg)
    if isinstance(found, Unique):
        ref = _static_ref(facts, func, call, found.base, found.offset, mode)
        return ref if ref is not None else DynamicLookup(mode)
    if isinstance(found, Candidates):
        refs = [_static_ref(facts, func, call, b, o, mode) for b, o in found.items]
        if any(r is None for r in refs):
            return DynamicLookup(mode)
        return Dispatch(tuple(refs))
    return DynamicLookup(mode)


def derived_pad(ir: MiniIR, func: str, call: CallExternal) -> str:
    ext = ir.extern(call.callee)
    codes = [type_code(ir.type_of(func, a)) for a in call.args[len(ext.params):]]
    return mangle(call.callee, codes)


def _check_override(call: CallExternal, derived: str) -> None:
    """An explicit pad name may only reorder the derived type codes."""
    base = "__" + call.callee
    if not (call.pad == base or call.pad.startswith(base + "_")):
        raise IRError(f"pad {call.pad} does not name callee {call.callee}")
    got = sorted(call.pad[len(base) + 1:].split("_")) if call.pad != base else []
    want = sorted(derived[len(base) + 1:].split("_")) if derived != base else []
    if got != want:
        raise IRError(f"pad {call.pad} does not match argument types ({derived})")


def call_sites(ir: MiniIR) -> list[tuple[str, str, CallExternal]]:
    """``(call_site_id, func, call)`` for every external call, in source order."""
    out = []
    for f in ir.functions:
        k = 0
        for ins, _ in walk(f.body):
            if isinstance(ins, CallExternal):
                out.append((f"{f.name}#{k}", f.name, ins))
                k += 1
    return out


def callee_ids(ir: MiniIR) -> dict[str, int]:
    """Dense ids from 1 per landing pad, in source order (0 is the kernel launch)."""
    ids: dict[str, int] = {}
    for _, func, call in call_sites(ir):
        pad = call.pad or derived_pad(ir, func, call)
        ids.setdefault(pad, len(ids) + KERNEL_LAUNCH_CALLEE + 1)
    return ids


def lower_call_site(ir: MiniIR, func: str, call: CallExternal) -> LoweringPlan:
    derived = derived_pad(ir, func, call)
    pad = derived
    if call.pad is not None:
        _check_override(call, derived)
        pad = call.pad
    site = next(s for s, f, c in call_sites(ir) if c is call)
    args = tuple(classify_arg(ir, func, call, i) for i in range(len(call.args)))
    return LoweringPlan(site, func, call, args, pad, derived, callee_ids(ir)[pad])


def lower_module(ir: MiniIR) -> list[LoweringPlan]:
    return [lower_call_site(ir, func, call) for _, func, call in call_sites(ir)]


def dump_plans(plans) -> str:
    return "".join(f"{p}\n" for p in plans)
