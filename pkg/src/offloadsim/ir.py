"""A small line-oriented IR for simulated device programs.

Values are SSA-like names, pointers carry their element type (``i32*``), and
the only way to reach another object is through ``fieldaddr``/``gep``/
``select`` over a base (global, alloca, byval parameter, heap allocation).
See ``docs/ir-grammar.md`` for the grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

from .errors import ParseError, ResolveError

SCALARS = ("i8", "i32", "i64", "f32", "f64")
ELEM_TYPES = SCALARS + ("void",)
SIZEOF = {"i8": 1, "i32": 4, "i64": 8, "f32": 4, "f64": 8, "opaque": 8}
PARAM_EFFECTS = ("read", "write", "readwrite", "opaque", "value")


def is_pointer(ty: str) -> bool:
    return ty.endswith("*")


def pointee(ty: str) -> str:
    return ty[:-1]


# --- data model --------------------------------------------------------------

@dataclass(frozen=True)
class Global:
    name: str
    size: int
    constant: bool = False
    init: bytes | None = None
    elem: str = "i8"


@dataclass(frozen=True)
class Extern:
    name: str
    params: tuple[str, ...]
    variadic: bool = False
    ret: str = "i32"


@dataclass(frozen=True)
class Param:
    name: str
    type: str
    byval: int | None = None


@dataclass(frozen=True)
class Alloca:
    dest: str
    size: int
    elem: str


@dataclass(frozen=True)
class FieldAddr:
    dest: str
    base: str
    offset: int
    elem: str


@dataclass(frozen=True)
class Gep:
    dest: str
    base: str
    index: str
    elem: str


@dataclass(frozen=True)
class Select:
    dest: str
    cond: str
    a: str
    b: str


@dataclass(frozen=True)
class HeapAlloc:
    dest: str
    size: int
    elem: str


@dataclass(frozen=True)
class Load:
    dest: str
    ptr: str
    type: str


@dataclass(frozen=True)
class Store:
    value: str
    ptr: str


@dataclass(frozen=True)
class Const:
    dest: str
    value: int | float
    type: str


@dataclass(frozen=True)
class CallExternal:
    dest: str | None
    callee: str
    args: tuple[str, ...]
    type: str = "i32"
    pad: str | None = None


@dataclass(frozen=True)
class CallLocal:
    dest: str | None
    callee: str
    args: tuple[str, ...]
    type: str = "i32"


@dataclass(frozen=True)
class Free:
    ptr: str


@dataclass(frozen=True)
class Loop:
    count: int
    body: tuple


@dataclass(frozen=True)
class Return:
    value: str | None = None


Instr = Union[Alloca, FieldAddr, Gep, Select, HeapAlloc, Load, Store, Const, CallExternal,
              CallLocal, Free, Loop, Return]


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[Param, ...]
    body: tuple


@dataclass(frozen=True)
class MiniIR:
    globals: tuple[Global, ...] = ()
    externs: tuple[Extern, ...] = ()
    functions: tuple[Function, ...] = ()
    # derived lookups, excluded from equality
    value_types: dict = field(default_factory=dict, compare=False, repr=False, hash=False)
    # per-object memo for analyses; equal modules must not share it
    analysis_cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def global_(self, name: str) -> Global:
        return next(g for g in self.globals if g.name == name)

    def extern(self, name: str) -> Extern:
        return next(e for e in self.externs if e.name == name)

    def function(self, name: str) -> Function:
        return next(f for f in self.functions if f.name == name)

    def type_of(self, func: str, value: str) -> str:
        if value.startswith("@"):
            return self.global_(value[1:]).elem + "*"
        return self.value_types[func][value]


def walk(body, in_loop: bool = False) -> Iterator[tuple[Instr, bool]]:
    """Flatten a body in textual order; yields ``(instr, inside_loop)``."""
    for ins in body:
        if isinstance(ins, Loop):
            yield ins, in_loop
            yield from walk(ins.body, True)
        else:
            yield ins, in_loop


def defined_name(ins) -> str | None:
    return getattr(ins, "dest", None)


def external_calls(ir: MiniIR) -> list[tuple[Function, CallExternal]]:
    return [(f, ins) for f in ir.functions for ins, _ in walk(f.body)
            if isinstance(ins, CallExternal)]


# --- tokenizer --------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>\#.*)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<num>-?(?:0x[0-9a-fA-F]+|\d+\.\d*(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?|\.\d+))
  | (?P<ellipsis>\.\.\.)
  | (?P<gname>@[A-Za-z_][\w.]*)
  | (?P<name>[A-Za-z_][\w.]*\**)
  | (?P<punct>[=,(){}:+*\[\]])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(line: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if not m:
            raise ParseError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), lineno, pos + 1))
        pos = m.end()
    return toks


def _unescape(s: str) -> bytes:
    return s[1:-1].encode("latin-1").decode("unicode_escape").encode("latin-1")


def _escape(b: bytes) -> str:
    out = []
    for i, c in enumerate(b):
        ch = chr(c)
        if ch == '"' or ch == "\\":
            out.append("\\" + ch)
        elif 32 <= c < 127:
            out.append(ch)
        elif c == 0 and not b[i + 1:i + 2].isdigit():
            out.append("\\0")
        elif ch == "\n":
            out.append("\\n")
        else:
            out.append(f"\\x{c:02x}")
    return '"' + "".join(out) + '"'


class _Line:
    def __init__(self, toks: list[_Tok], lineno: int, text: str):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.text = text

    def peek(self, text: str | None = None) -> _Tok | None:
        if self.i >= len(self.toks):
            return None
        t = self.toks[self.i]
        if text is not None and t.text != text:
            return None
        return t

    def err(self, msg: str, tok: _Tok | None = None):
        col = tok.col if tok else (len(self.text.rstrip()) + 1)
        return ParseError(msg, self.lineno, col)

    def next(self, kind: str | None = None, text: str | None = None) -> _Tok:
        t = self.peek()
        if t is None:
            want = text or kind or "token"
            raise self.err(f"expected {want} at end of line")
        if (kind and t.kind != kind) or (text and t.text != text):
            raise self.err(f"expected {text or kind}, got {t.text!r}", t)
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        if self.peek(text):
            self.i += 1
            return True
        return False

    def done(self) -> None:
        t = self.peek()
        if t is not None:
            raise self.err(f"unexpected {t.text!r}", t)

    def int(self) -> int:
        t = self.next("num")
        try:
            return int(t.text, 0)
        except ValueError:
            raise self.err(f"expected integer, got {t.text!r}", t) from None

    def type(self) -> str:
        t = self.next("name")
        base = t.text.rstrip("*")
        if base not in ELEM_TYPES + ("opaque",):
            raise self.err(f"unknown type {t.text!r}", t)
        stars = len(t.text) - len(base)
        while self.accept("*"):
            stars += 1
        if base == "void" and not stars:
            raise self.err("void is only valid behind a pointer", t)
        return base + "*" * stars

    def operand(self) -> str:
        t = self.next()
        if t.kind not in ("name", "gname"):
            raise self.err(f"expected value name, got {t.text!r}", t)
        return t.text


# --- parser -----------------------------------------------------------------

def parse_ir(text: str) -> MiniIR:
    lines = [(_Line(_tokenize(raw, n), n, raw)) for n, raw in enumerate(text.splitlines(), 1)]
    lines = [ln for ln in lines if ln.toks]
    globals_: list[Global] = []
    externs: list[Extern] = []
    functions: list[Function] = []
    positions: dict = {}
    it = iter(lines)
    for ln in it:
        head = ln.next("name")
        if head.text == "global":
            globals_.append(_parse_global(ln))
            positions[("global", globals_[-1].name)] = (ln.lineno, head.col)
        elif head.text == "extern":
            externs.append(_parse_extern(ln))
            positions[("extern", externs[-1].name)] = (ln.lineno, head.col)
        elif head.text == "func":
            fn, calls = _parse_function(ln, it)
            functions.append(fn)
            positions[("func", fn.name)] = (ln.lineno, head.col)
            positions.update(calls)
        else:
            raise ln.err(f"expected global, extern or func, got {head.text!r}", head)
    ir = MiniIR(tuple(globals_), tuple(externs), tuple(functions))
    _validate(ir, positions)
    return ir


def _parse_global(ln: _Line) -> Global:
    name = ln.next("gname").text[1:]
    size = None
    constant = False
    init = None
    elem = "i8"
    while ln.peek() is not None:
        t = ln.next()
        if t.text == "size":
            ln.next(text="=")
            size = ln.int()
        elif t.text == "const":
            constant = True
        elif t.text == "init":
            ln.next(text="=")
            init = _unescape(ln.next("str").text)
        elif t.text == ":":
            elem = ln.type()
        else:
            raise ln.err(f"unexpected {t.text!r} in global", t)
    if size is None:
        size = len(init) if init is not None else None
    if size is None or size <= 0:
        raise ln.err(f"global @{name} needs a positive size")
    if init is not None and len(init) > size:
        raise ln.err(f"initializer of @{name} exceeds its size")
    return Global(name, size, constant, init, elem)


def _parse_extern(ln: _Line) -> Extern:
    name = ln.next("name").text
    ln.next(text="(")
    params: list[str] = []
    variadic = False
    while not ln.accept(")"):
        if params or variadic:
            ln.next(text=",")
        if ln.peek() and ln.peek().kind == "ellipsis":
            ln.next()
            variadic = True
            continue
        t = ln.next("name")
        if t.text not in PARAM_EFFECTS or variadic:
            raise ln.err(f"bad extern parameter {t.text!r}", t)
        params.append(t.text)
    ret = "i32"
    if ln.accept(":"):
        ret = ln.type()
    ln.done()
    return Extern(name, tuple(params), variadic, ret)


def _parse_args(ln: _Line) -> tuple[str, ...]:
    ln.next(text="(")
    args = []
    while not ln.accept(")"):
        if args:
            ln.next(text=",")
        args.append(ln.operand())
    return tuple(args)


def _parse_function(ln: _Line, it) -> tuple[Function, dict]:
    name = ln.next("name").text
    ln.next(text="(")
    params = []
    while not ln.accept(")"):
        if params:
            ln.next(text=",")
        pname = ln.next("name").text
        ln.next(text=":")
        if ln.accept("byval"):
            params.append(Param(pname, "void*", ln.int()))
        else:
            params.append(Param(pname, ln.type()))
    ln.next(text="{")
    ln.done()
    calls: dict = {}
    body = _parse_block(it, ln, calls)
    return Function(name, tuple(params), body), calls


def _parse_block(it, opener: _Line, calls: dict) -> tuple:
    body = []
    for ln in it:
        if ln.accept("}"):
            ln.done()
            return tuple(body)
        body.append(_parse_instr(ln, it, calls))
    raise ParseError("missing closing '}'", opener.lineno, 1)


def _parse_instr(ln: _Line, it, calls: dict):
    first = ln.next("name")
    if first.text == "loop":
        count = ln.int()
        ln.next(text="{")
        ln.done()
        return Loop(count, _parse_block(it, ln, calls))
    if first.text == "store":
        v = ln.operand()
        ln.next(text=",")
        p = ln.operand()
        ln.done()
        return Store(v, p)
    if first.text == "free":
        p = ln.operand()
        ln.done()
        return Free(p)
    if first.text == "ret":
        v = ln.operand() if ln.peek() else None
        ln.done()
        return Return(v)
    dest = None
    op = first
    if ln.accept("="):
        dest = first.text
        op = ln.next("name")
    if op.text == "call":
        ins = _parse_call(ln, dest)
        calls[("call", id(ins))] = (ln.lineno, op.col)
        return ins
    if dest is None:
        raise ln.err(f"unknown instruction {op.text!r}", op)
    if op.text == "alloca":
        size = ln.int()
        elem = ln.type() if ln.accept(":") else "i8"
        ins = Alloca(dest, size, elem)
    elif op.text == "heapalloc":
        size = ln.int()
        elem = ln.type() if ln.accept(":") else "i8"
        ins = HeapAlloc(dest, size, elem)
    elif op.text == "fieldaddr":
        base = ln.operand()
        ln.next(text="+")
        off = ln.int()
        ln.next(text=":")
        ins = FieldAddr(dest, base, off, ln.type())
    elif op.text == "gep":
        base = ln.operand()
        ln.next(text="+")
        idx = ln.operand()
        ln.next(text=":")
        ins = Gep(dest, base, idx, ln.type())
    elif op.text == "select":
        c = ln.operand()
        ln.next(text=",")
        a = ln.operand()
        ln.next(text=",")
        b = ln.operand()
        ins = Select(dest, c, a, b)
    elif op.text == "load":
        p = ln.operand()
        ln.next(text=":")
        ins = Load(dest, p, ln.type())
    elif op.text == "const":
        t = ln.next("num")
        ln.next(text=":")
        ty = ln.type()
        try:
            value = float(t.text) if ty in ("f32", "f64") else int(t.text, 0)
        except ValueError:
            raise ln.err(f"bad {ty} literal {t.text!r}", t) from None
        ins = Const(dest, value, ty)
    else:
        raise ln.err(f"unknown instruction {op.text!r}", op)
    ln.done()
    return ins


def _parse_call(ln: _Line, dest):
    if ln.accept("ext"):
        callee = ln.next("name").text
        args = _parse_args(ln)
        ty = ln.type() if ln.accept(":") else "i32"
        pad = None
        if ln.accept("pad"):
            ln.next(text="=")
            pad = ln.next("name").text
        ln.done()
        return CallExternal(dest, callee, args, ty, pad)
    callee = ln.next("name").text
    args = _parse_args(ln)
    ty = ln.type() if ln.accept(":") else "i32"
    ln.done()
    return CallLocal(dest, callee, args, ty)


# --- validation -------------------------------------------------------------

def _validate(ir: MiniIR, positions: dict) -> None:
    def fail(msg, key=None, cls=ResolveError):
        line, col = positions.get(key, (0, 0))
        raise cls(msg, line, col)

    seen = set()
    for g in ir.globals:
        if g.name in seen:
            fail(f"duplicate global @{g.name}", ("global", g.name))
        seen.add(g.name)
    names = [e.name for e in ir.externs] + [f.name for f in ir.functions]
    for n in names:
        if names.count(n) > 1:
            fail(f"duplicate definition of {n!r}", ("func", n))
    externs = {e.name: e for e in ir.externs}
    funcs = {f.name: f for f in ir.functions}
    for fn in ir.functions:
        types: dict[str, str] = {}
        for p in fn.params:
            if p.name in types:
                fail(f"duplicate parameter {p.name!r} in {fn.name}", ("func", fn.name))
            types[p.name] = p.type
        _validate_block(ir, fn, fn.body, set(types), types, externs, funcs, fail)
        ir.value_types[fn.name] = types


def _validate_block(ir, fn, body, scope, types, externs, funcs, fail):
    """``scope`` holds names visible here; ``types`` every name in the function."""

    def use(v, ins):
        key = ("call", id(ins)) if isinstance(ins, (CallExternal, CallLocal)) else ("func", fn.name)
        if v.startswith("@"):
            if not any(g.name == v[1:] for g in ir.globals):
                fail(f"undefined global {v} in {fn.name}", key)
            return ir.global_(v[1:]).elem + "*"
        if v not in scope:
            fail(f"undefined value {v!r} in {fn.name}", key)
        return types[v]

    def define(name, ty):
        if name in types:
            fail(f"value {name!r} defined twice in {fn.name}", ("func", fn.name))
        types[name] = ty
        scope.add(name)

    for ins in body:
        if isinstance(ins, Loop):
            # values defined inside a loop are not visible after it
            _validate_block(ir, fn, ins.body, set(scope), types, externs, funcs, fail)
        elif isinstance(ins, (Alloca, HeapAlloc)):
            define(ins.dest, ins.elem + "*")
        elif isinstance(ins, FieldAddr):
            if not is_pointer(use(ins.base, ins)):
                fail(f"fieldaddr base {ins.base!r} is not a pointer", ("func", fn.name))
            define(ins.dest, ins.elem + "*")
        elif isinstance(ins, Gep):
            use(ins.base, ins)
            if is_pointer(use(ins.index, ins)):
                fail(f"gep index {ins.index!r} must be an integer", ("func", fn.name))
            define(ins.dest, ins.elem + "*")
        elif isinstance(ins, Select):
            use(ins.cond, ins)
            ta, tb = use(ins.a, ins), use(ins.b, ins)
            if is_pointer(ta) != is_pointer(tb):
                fail(f"select arms of {ins.dest!r} disagree", ("func", fn.name))
            define(ins.dest, ta)
        elif isinstance(ins, Load):
            use(ins.ptr, ins)
            define(ins.dest, ins.type)
        elif isinstance(ins, Store):
            use(ins.value, ins)
            use(ins.ptr, ins)
        elif isinstance(ins, Const):
            define(ins.dest, ins.type)
        elif isinstance(ins, Free):
            use(ins.ptr, ins)
        elif isinstance(ins, Return):
            if ins.value is not None:
                use(ins.value, ins)
        elif isinstance(ins, CallExternal):
            ext = externs.get(ins.callee)
            if ext is None:
                fail(f"call to undeclared callee {ins.callee!r}", ("call", id(ins)))
            if len(ins.args) < len(ext.params) or (
                    not ext.variadic and len(ins.args) != len(ext.params)):
                fail(f"wrong number of arguments to {ins.callee}", ("call", id(ins)))
            for a in ins.args:
                use(a, ins)
            if ins.dest:
                define(ins.dest, ins.type)
        elif isinstance(ins, CallLocal):
            callee = funcs.get(ins.callee)
            if callee is None:
                fail(f"call to undefined function {ins.callee!r}", ("call", id(ins)))
            if len(ins.args) != len(callee.params):
                fail(f"wrong number of arguments to {ins.callee}", ("call", id(ins)))
            for a in ins.args:
                use(a, ins)
            if ins.dest:
                define(ins.dest, ins.type)


# --- printer ----------------------------------------------------------------

def _fmt_num(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def print_ir(ir: MiniIR) -> str:
    out = []
    for g in ir.globals:
        parts = [f"global @{g.name} size={g.size}"]
        if g.constant:
            parts.append("const")
        if g.init is not None:
            parts.append(f"init={_escape(g.init)}")
        if g.elem != "i8":
            parts.append(f": {g.elem}")
        out.append(" ".join(parts))
    for e in ir.externs:
        params = list(e.params) + (["..."] if e.variadic else [])
        out.append(f"extern {e.name}({', '.join(params)}) : {e.ret}")
    for fn in ir.functions:
        params = ", ".join(f"{p.name}: byval {p.byval}" if p.byval is not None
                           else f"{p.name}: {p.type}" for p in fn.params)
        out.append(f"func {fn.name}({params}) {{")
        _print_block(fn.body, out, "  ")
        out.append("}")
    return "\n".join(out) + "\n"


def _print_block(body, out, ind):
    for ins in body:
        if isinstance(ins, Loop):
            out.append(f"{ind}loop {ins.count} {{")
            _print_block(ins.body, out, ind + "  ")
            out.append(f"{ind}}}")
        else:
            out.append(ind + format_instr(ins))


def format_instr(ins) -> str:
    d = f"{ins.dest} = " if getattr(ins, "dest", None) else ""
    if isinstance(ins, Alloca):
        return f"{d}alloca {ins.size} : {ins.elem}"
    if isinstance(ins, HeapAlloc):
        return f"{d}heapalloc {ins.size} : {ins.elem}"
    if isinstance(ins, FieldAddr):
        return f"{d}fieldaddr {ins.base} + {ins.offset} : {ins.elem}"
    if isinstance(ins, Gep):
        return f"{d}gep {ins.base} + {ins.index} : {ins.elem}"
    if isinstance(ins, Select):
        return f"{d}select {ins.cond}, {ins.a}, {ins.b}"
    if isinstance(ins, Load):
        return f"{d}load {ins.ptr} : {ins.type}"
    if isinstance(ins, Store):
        return f"store {ins.value}, {ins.ptr}"
    if isinstance(ins, Const):
        return f"{d}const {_fmt_num(ins.value)} : {ins.type}"
    if isinstance(ins, Free):
        return f"free {ins.ptr}"
    if isinstance(ins, Return):
        return "ret" + (f" {ins.value}" if ins.value else "")
    if isinstance(ins, CallExternal):
        s = f"{d}call ext {ins.callee}({', '.join(ins.args)}) : {ins.type}"
        return s + (f" pad={ins.pad}" if ins.pad else "")
    if isinstance(ins, CallLocal):
        return f"{d}call {ins.callee}({', '.join(ins.args)}) : {ins.type}"
    raise TypeError(ins)
