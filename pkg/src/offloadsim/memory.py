"""Simulated device, host and shared byte arenas.

Every pointer the simulated program handles is a :class:`SimAddress`, a
``(space, offset)`` pair, so a device address can never be confused with a
host address. Multi-byte scalars are little-endian.
"""

from __future__ import annotations

import bisect
import enum
import struct
import threading
from dataclasses import dataclass, field

from .errors import ConstnessViolation, Fault, OutOfMemory, TranslationMiss

MiB = 1 << 20
KiB = 1 << 10

DEFAULT_DEVICE_CAPACITY = 64 * MiB
DEFAULT_HOST_CAPACITY = 64 * MiB
DEFAULT_SHARED_CAPACITY = 64 * KiB

# offset 0 of every space stays unused so a zero raw value is NULL
NULL_GUARD = 16


class Space(enum.IntEnum):
    DEVICE = 1
    HOST = 2
    SHARED = 3


class Origin(enum.Enum):
    HEAP = "heap"
    STATIC = "static"
    STACK = "stack"


_RAW_SHIFT = 56
_RAW_MASK = (1 << _RAW_SHIFT) - 1


@dataclass(frozen=True, slots=True)
class SimAddress:
    space: Space
    offset: int

    def __add__(self, delta: int) -> SimAddress:
        return SimAddress(self.space, self.offset + delta)

    def __sub__(self, other):
        if isinstance(other, SimAddress):
            if other.space != self.space:
                raise Fault(f"cannot subtract addresses of different spaces: {self} - {other}")
            return self.offset - other.offset
        return SimAddress(self.space, self.offset - other)

    def __lt__(self, other: SimAddress) -> bool:
        return (self.space, self.offset) < (other.space, other.offset)

    @property
    def raw(self) -> int:
        """8-byte opaque encoding used when a pointer travels as a value."""
        return (int(self.space) << _RAW_SHIFT) | self.offset

    @classmethod
    def from_raw(cls, raw: int) -> SimAddress | None:
        raw &= (1 << 64) - 1
        kind = raw >> _RAW_SHIFT
        if kind == 0 and raw == 0:
            return None
        try:
            return cls(Space(kind), raw & _RAW_MASK)
        except ValueError:
            raise Fault(f"raw value {raw:#x} is not a simulated address") from None

    def __repr__(self) -> str:
        return f"{self.space.name.lower()}:{self.offset:#x}"


@dataclass(slots=True)
class ObjectRecord:
    base: SimAddress
    size: int
    live: bool = True
    origin: Origin = Origin.HEAP
    constant: bool = False
    tag: object = None

    def contains(self, addr: SimAddress) -> bool:
        return (addr.space == self.base.space
                and self.base.offset <= addr.offset < self.base.offset + self.size)


@dataclass(frozen=True, slots=True)
class Translation:
    """Maps ``[source_base, source_base + length)`` onto a copy at ``dest_base``."""

    source_base: SimAddress
    dest_base: SimAddress
    length: int

    def translate(self, addr: SimAddress) -> SimAddress:
        src = self.source_base
        if addr.space != src.space or not src.offset <= addr.offset < src.offset + self.length:
            raise TranslationMiss(f"{addr!r} outside [{src!r}, +{self.length})")
        return self.dest_base + (addr.offset - src.offset)


def translate(addr: SimAddress, translation: Translation) -> SimAddress:
    return translation.translate(addr)


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


class MemorySpace:
    """One bounds-checked byte arena.

    Static objects are bump-placed from ``NULL_GUARD`` up to ``static_limit``;
    the rest of the arena belongs to whoever the machine hands it to (stack,
    heap, mailbox).
    """

    def __init__(self, kind: Space, capacity: int, static_limit: int | None = None):
        self.kind = kind
        self.capacity = capacity
        self.contents = bytearray(capacity)
        self.static_limit = capacity if static_limit is None else static_limit
        self.next_static = NULL_GUARD
        self.statics: list[ObjectRecord] = []
        self._static_bases: list[int] = []
        self._const_starts: list[int] = []
        self._const_ends: list[int] = []
        self._lock = threading.Lock()

    def address(self, offset: int) -> SimAddress:
        return SimAddress(self.kind, offset)

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.capacity or offset >= self.capacity:
            raise Fault(f"{self.kind.name.lower()} read [{offset:#x}, +{length}) "
                        f"outside capacity {self.capacity:#x}")
        return bytes(self.contents[offset:offset + length])

    def write(self, offset: int, data: bytes, *, force: bool = False) -> None:
        n = len(data)
        if offset < 0 or offset + n > self.capacity or offset >= self.capacity:
            raise Fault(f"{self.kind.name.lower()} write [{offset:#x}, +{n}) "
                        f"outside capacity {self.capacity:#x}")
        if self._const_starts and not force:
            # last constant range starting before the end of the write
            i = bisect.bisect_left(self._const_starts, offset + n) - 1
            if i >= 0 and self._const_ends[i] > offset:
                raise ConstnessViolation(
                    f"write to constant object at {self.kind.name.lower()}:"
                    f"{self._const_starts[i]:#x}")
        self.contents[offset:offset + n] = data

    def place_static(self, data: bytes, constant: bool = False, *, size: int | None = None,
                     align: int = 16, tag: object = None) -> SimAddress:
        size = len(data) if size is None else size
        if len(data) > size:
            raise ValueError("initializer larger than object")
        with self._lock:
            base = align_up(self.next_static, align)
            if base + size > self.static_limit:
                raise OutOfMemory(f"static region of {self.kind.name.lower()} space exhausted "
                                  f"({size} bytes requested)")
            self.next_static = base + size
            self.contents[base:base + len(data)] = data
            rec = ObjectRecord(SimAddress(self.kind, base), size, True, Origin.STATIC,
                               constant, tag)
            i = bisect.bisect(self._static_bases, base)
            self._static_bases.insert(i, base)
            self.statics.insert(i, rec)
            if constant and size:
                j = bisect.bisect(self._const_starts, base)
                self._const_starts.insert(j, base)
                self._const_ends.insert(j, base + size)
        return rec.base

    def find_static(self, offset: int) -> ObjectRecord | None:
        i = bisect.bisect_right(self._static_bases, offset) - 1
        if i >= 0:
            rec = self.statics[i]
            if offset < rec.base.offset + rec.size:
                return rec
        return None


class FlagCell:
    """A 4-byte cell used as the cross-agent notification point.

    Stores are release and loads are acquire: the lock orders every byte
    written before ``store`` ahead of any ``load`` that observes the value.
    """

    def __init__(self, space: MemorySpace, offset: int):
        self.space = space
        self.offset = offset
        self._lock = threading.Lock()

    def load(self) -> int:
        with self._lock:
            return struct.unpack_from("<I", self.space.contents, self.offset)[0]

    def store(self, value: int) -> None:
        with self._lock:
            struct.pack_into("<I", self.space.contents, self.offset, value)

    def compare_exchange(self, expected: int, value: int) -> bool:
        with self._lock:
            cur = struct.unpack_from("<I", self.space.contents, self.offset)[0]
            if cur != expected:
                return False
            struct.pack_into("<I", self.space.contents, self.offset, value)
            return True


_SCALARS = {
    "i8": "<b", "u8": "<B", "i16": "<h", "u16": "<H", "i32": "<i", "u32": "<I", "i64": "<q", "u64": "<Q",
    "f32": "<f", "f64": "<d",
}


class Memory:
    """Address-routed access to a set of spaces.

    A restricted view (see :meth:`view`) refuses spaces it cannot see; the
    host side gets one without the device arena.
    """

    def __init__(self, spaces: dict[Space, MemorySpace], visible: frozenset[Space] | None = None):
        self.spaces = spaces
        self.visible = frozenset(spaces) if visible is None else visible
        self._atomic_lock = threading.Lock()

    def view(self, *kinds: Space) -> Memory:
        v = Memory(self.spaces, frozenset(kinds))
        v._atomic_lock = self._atomic_lock
        return v

    def space(self, kind: Space) -> MemorySpace:
        if kind not in self.visible:
            raise Fault(f"{kind.name.lower()} memory is not accessible from this agent")
        return self.spaces[kind]

    def read_bytes(self, addr: SimAddress, length: int) -> bytes:
        return self.space(addr.space).read(addr.offset, length)

    def write_bytes(self, addr: SimAddress, data: bytes) -> None:
        self.space(addr.space).write(addr.offset, data)

    def copy(self, dst: SimAddress, src: SimAddress, length: int) -> None:
        self.write_bytes(dst, self.read_bytes(src, length))

    def place_static(self, kind: Space, data: bytes, constant: bool = False, **kw) -> SimAddress:
        return self.space(kind).place_static(data, constant, **kw)

    def load(self, addr: SimAddress, ty: str):
        fmt = _SCALARS[ty]
        return struct.unpack(fmt, self.read_bytes(addr, struct.calcsize(fmt)))[0]

    def store(self, addr: SimAddress, ty: str, value) -> None:
        self.write_bytes(addr, struct.pack(_SCALARS[ty], value))

    def read_cstring(self, addr: SimAddress, limit: int = 1 << 16) -> bytes:
        sp = self.space(addr.space)
        if not 0 <= addr.offset < sp.capacity:
            raise Fault(f"string read at {addr!r} out of bounds")
        end = sp.contents.find(b"\0", addr.offset, min(sp.capacity, addr.offset + limit))
        if end < 0:
            raise Fault(f"unterminated string at {addr!r}")
        return bytes(sp.contents[addr.offset:end])

    def atomic_add(self, addr: SimAddress, delta, ty: str = "i64"):
        """Atomic read-modify-write; returns the previous value."""
        with self._atomic_lock:
            old = self.load(addr, ty)
            self.store(addr, ty, old + delta)
            return old

    def compare_exchange(self, addr: SimAddress, expected, value, ty: str = "i64") -> bool:
        with self._atomic_lock:
            if self.load(addr, ty) != expected:
                return False
            self.store(addr, ty, value)
            return True


@dataclass
class StackArena:
    """Bump-allocated simulated stack with an object registry for lookups."""

    space: MemorySpace
    start: int
    end: int
    cursor: int = field(init=False)
    records: list[ObjectRecord] = field(default_factory=list, init=False)

    def __post_init__(self):
        self.cursor = self.start
        self._lock = threading.Lock()

    def mark(self) -> int:
        with self._lock:
            return len(self.records)

    def push(self, size: int, tag: object = None, align: int = 16) -> SimAddress:
        with self._lock:
            base = align_up(self.cursor, align)
            if base + max(size, 1) > self.end:
                raise OutOfMemory("simulated stack overflow")
            self.cursor = base + max(size, 1)
            self.space.contents[base:base + size] = bytes(size)
            rec = ObjectRecord(SimAddress(self.space.kind, base), size, True, Origin.STACK,
                               False, tag)
            self.records.append(rec)
            return rec.base

    def release(self, mark: int) -> None:
        with self._lock:
            for rec in self.records[mark:]:
                rec.live = False
            del self.records[mark:]
            self.cursor = (self.records[-1].base.offset + max(self.records[-1].size, 1)
                           if self.records else self.start)

    def find(self, addr: SimAddress) -> ObjectRecord | None:
        if addr.space != self.space.kind or not self.start <= addr.offset < self.end:
            return None
        with self._lock:
            bases = [r.base.offset for r in self.records]
            i = bisect.bisect_right(bases, addr.offset) - 1
            if i >= 0 and addr.offset < bases[i] + self.records[i].size:
                return self.records[i]
        return None
