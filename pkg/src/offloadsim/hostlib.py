"""Host-side C library services reachable through landing pads.

``FILE*`` handles live in host memory (an 8-byte static per stream), so the
device can only carry them around as opaque values. The scanf and printf
engines here are small, self-contained subsets of the C formats.
"""

from __future__ import annotations

import io
import re
import struct
import time

from .memory import Memory, SimAddress, Space
from .rpc import HostCall

# --- FILE handles -----------------------------------------------------------


class HostFiles:
    """Maps simulated ``FILE*`` values to Python text streams."""

    def __init__(self, memory: Memory):
        self.memory = memory
        self._streams: dict[int, io.TextIOBase] = {}
        self.stdout = self.open(io.StringIO(), "stdout")

    def open(self, stream: io.TextIOBase, name: str = "") -> SimAddress:
        addr = self.memory.place_static(Space.HOST, struct.pack("<Q", len(self._streams) + 1),
                                        tag=f"FILE:{name}")
        self._streams[addr.raw] = stream
        return addr

    def open_text(self, text: str, name: str = "input") -> SimAddress:
        return self.open(io.StringIO(text), name)

    def stream(self, handle: int | SimAddress) -> io.TextIOBase:
        raw = handle.raw if isinstance(handle, SimAddress) else handle
        try:
            return self._streams[raw]
        except KeyError:
            raise ValueError(f"{raw:#x} is not an open FILE handle") from None


# --- scanf ------------------------------------------------------------------

EOF = -1

_SCAN_SPEC = re.compile(rb"%(\*?)(\d*)(hh|h|ll|l|L)?([diufeEgGxXoscn%])")
_INT_RE = re.compile(r"[-+]?\d+")
_HEX_RE = re.compile(r"[-+]?(0[xX])?[0-9a-fA-F]+")
_OCT_RE = re.compile(r"[-+]?[0-7]+")
_FLOAT_RE = re.compile(r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|inf|nan)",
                       re.IGNORECASE)
_INT_STORE = {None: "i32", "hh": "i8", "h": "i16", "l": "i64", "ll": "i64"}


class _Input:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_space(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def match(self, rx: re.Pattern, width: int | None) -> str | None:
        limit = len(self.text) if not width else min(len(self.text), self.pos + width)
        m = rx.match(self.text, self.pos, limit)
        if not m or not m.group(0):
            return None
        self.pos = m.end()
        return m.group(0)


def scan(fmt: bytes, text: str, memory: Memory, targets) -> tuple[int, int]:
    """Run a scanf format over ``text``.

    ``targets`` is an iterator of destination addresses. Returns
    ``(result, consumed)`` where ``result`` follows C: the number of
    assignments, or EOF when input ended before the first conversion.
    """
    inp = _Input(text)
    assigned = 0
    converted_any = False
    i = 0
    while i < len(fmt):
        ch = fmt[i:i + 1]
        if ch.isspace():
            inp.skip_space()
            i += 1
            continue
        if ch != b"%":
            if inp.at_end():
                return (EOF if not converted_any else assigned), inp.pos
            if inp.text[inp.pos] != ch.decode("latin-1"):
                break
            inp.pos += 1
            i += 1
            continue
        m = _SCAN_SPEC.match(fmt, i)
        if not m:
            break
        i = m.end()
        suppress, width, length, conv = m.group(1), m.group(2), m.group(3), m.group(4)
        width = int(width) if width else None
        length = length.decode() if length else None
        conv = conv.decode()
        if conv == "%":
            inp.skip_space()
            if inp.at_end() or inp.text[inp.pos] != "%":
                break
            inp.pos += 1
            continue
        if conv == "n":
            if not suppress:
                memory.store(next(targets), "i32", inp.pos)
            continue
        if conv != "c":
            inp.skip_space()
        if inp.at_end():
            return (EOF if not converted_any else assigned), inp.pos
        if conv in "di":
            tok = inp.match(_INT_RE if conv == "d" else _HEX_RE, width)
            value = None if tok is None else int(tok, 10 if conv == "d" else 0)
            store = _INT_STORE[length]
        elif conv in "uxXo":
            rx = {"u": _INT_RE, "o": _OCT_RE}.get(conv, _HEX_RE)
            tok = inp.match(rx, width)
            value = None if tok is None else int(tok, {"u": 10, "o": 8}.get(conv, 16))
            store = _INT_STORE[length]
        elif conv in "feEgG":
            tok = inp.match(_FLOAT_RE, width)
            value = None if tok is None else float(tok)
            store = "f64" if length in ("l", "L") else "f32"
        elif conv == "s":
            start = inp.pos
            end = start
            while end < len(inp.text) and not inp.text[end].isspace() and (
                    width is None or end - start < width):
                end += 1
            value = inp.text[start:end].encode("latin-1") + b"\0"
            inp.pos = end
            store = "bytes"
        else:  # c
            n = width or 1
            if len(inp.text) - inp.pos < n:
                break
            value = inp.text[inp.pos:inp.pos + n].encode("latin-1")
            inp.pos += n
            store = "bytes"
        if value is None:
            break
        converted_any = True
        if suppress:
            continue
        dst = next(targets)
        if store == "bytes":
            memory.write_bytes(dst, value)
        elif store in ("f32", "f64"):
            memory.store(dst, store, value)
        else:
            bits = {"i8": 8, "i16": 16, "i32": 32, "i64": 64}[store]
            value &= (1 << bits) - 1
            memory.store(dst, store.replace("i", "u"), value)
        assigned += 1
    return assigned, inp.pos


# --- printf -----------------------------------------------------------------

_PRINT_SPEC = re.compile(rb"%([-+ #0]*)(\d*|\*)(?:\.(\d*|\*))?(hh|h|ll|l|L|z)?([diouxXeEfgGcsp%])")


def format_c(fmt: bytes, call: HostCall, first: int) -> bytes:
    """Render a printf format using ``call`` arguments from index ``first``."""
    out = bytearray()
    k = first
    pos = 0
    for m in _PRINT_SPEC.finditer(fmt):
        out += fmt[pos:m.start()]
        pos = m.end()
        flags, width, prec, length, conv = (None if g is None else g.decode() for g in m.groups())
        if conv == "%":
            out += b"%"
            continue
        if width == "*":
            width = str(call.int(k, 32))
            k += 1
        if prec == "*":
            prec = str(call.int(k, 32))
            k += 1
        spec = "%" + (flags or "") + (width or "") + (f".{prec}" if prec is not None else "")
        if conv in "di":
            v = call.int(k, 64 if length in ("l", "ll", "z") else 32)
            piece = (spec + "d") % v
        elif conv in "ouxX":
            bits = 64 if length in ("l", "ll", "z") else 32
            piece = (spec + ("d" if conv == "u" else conv)) % (call.raw(k) & ((1 << bits) - 1))
        elif conv in "eEfgG":
            piece = (spec + conv) % call.float(k)
        elif conv == "c":
            piece = (spec + "c") % chr(call.raw(k) & 0xFF)
        elif conv == "s":
            piece = (spec + "s") % call.cstring(k).decode("latin-1")
        else:  # p
            piece = (spec + "s") % hex(call.raw(k))
        k += 1
        out += piece.encode("latin-1")
    out += fmt[pos:]
    return bytes(out)


# --- landing-pad handlers ---------------------------------------------------

def _targets(call: HostCall, first: int):
    for i in range(first, len(call)):
        yield call.ptr(i)


def make_library(files: HostFiles, delay_s: float = 0.0) -> dict:
    """Handlers keyed by C function name; each one serves every pad of it."""

    def fscanf(call: HostCall) -> int:
        stream = files.stream(call.raw(0))
        start = stream.tell()
        result, used = scan(call.cstring(1), stream.read(), call.memory, _targets(call, 2))
        # leave the unconsumed input for the next call
        stream.seek(start + used)
        return result

    def sscanf(call: HostCall) -> int:
        text = call.cstring(0).decode("latin-1")
        return scan(call.cstring(1), text, call.memory, _targets(call, 2))[0]

    def fprintf(call: HostCall) -> int:
        if delay_s:
            time.sleep(delay_s)
        data = format_c(call.cstring(1), call, 2)
        files.stream(call.raw(0)).write(data.decode("latin-1"))
        return len(data)

    def printf(call: HostCall) -> int:
        data = format_c(call.cstring(0), call, 1)
        files.stream(files.stdout).write(data.decode("latin-1"))
        return len(data)

    return {"fscanf": fscanf, "sscanf": sscanf, "fprintf": fprintf, "printf": printf}


def run_direct(handler, memory: Memory, args) -> int:
    """Call a handler against real object addresses, bypassing the mailbox.

    ``args`` holds ints/floats (passed as values) and SimAddress objects.
    This is the oracle path: same code, no migration.
    """
    from .protocol import encode_value

    translated = [a if isinstance(a, SimAddress) else encode_value(a) for a in args]
    return handler(HostCall(memory, [], translated))
