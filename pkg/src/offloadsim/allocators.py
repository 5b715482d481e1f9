"""Device heap allocators and interior-address object lookup.

Two policies share one interface:

* ``generic``: one region guarded by one lock, tracked by an allocation list
  and an address-ordered free list (first fit, split, coalesce).
* ``balanced:N,M[,ratio]``: the heap is cut into N x M chunks. A thread uses
  chunk ``(thread_id % N, team_id % M)``; the first chunk of every team row is
  ``ratio`` times larger. Each chunk bumps a watermark and keeps its metadata
  in 16-byte headers stored directly below the user data, in device memory.
"""

from __future__ import annotations

import re
import struct
import threading
from dataclasses import dataclass
from typing import NamedTuple

from .errors import ConfigError, InvalidFree, OutOfMemory
from .memory import MemorySpace, ObjectRecord, Origin, SimAddress, align_up

DEFAULT_ALIGNMENT = 16
DEFAULT_FIRST_CHUNK_RATIO = 4

# user_size (8) | prev header offset in chunk (4) | flags (4)
HEADER = struct.Struct("<QII")
HEADER_SIZE = HEADER.size
NO_PREV = 0xFFFFFFFF
_MAGIC = 0xA110C000
_IN_USE = 1


@dataclass(frozen=True)
class AllocatorConfig:
    kind: str = "generic"
    n_thread_slots: int = 1
    m_team_slots: int = 1
    first_chunk_ratio: float = DEFAULT_FIRST_CHUNK_RATIO
    alignment: int = DEFAULT_ALIGNMENT

    def __post_init__(self):
        if self.kind not in ("generic", "balanced"):
            raise ConfigError(f"unknown allocator kind {self.kind!r}")
        if self.n_thread_slots < 1 or self.m_team_slots < 1:
            raise ConfigError("N and M must be at least 1")
        if self.first_chunk_ratio < 1:
            raise ConfigError("first chunk ratio must be >= 1")
        if self.alignment < 1 or self.alignment & (self.alignment - 1):
            raise ConfigError("alignment must be a power of two")
        if self.alignment < HEADER_SIZE and self.kind == "balanced":
            raise ConfigError(f"balanced allocator needs alignment >= {HEADER_SIZE}")

    def __str__(self) -> str:
        if self.kind == "generic":
            return "generic"
        ratio = self.first_chunk_ratio
        ratio_s = str(int(ratio)) if float(ratio).is_integer() else str(ratio)
        return f"balanced:{self.n_thread_slots},{self.m_team_slots},{ratio_s}"


_CONFIG_RE = re.compile(
    r"^\s*(?:(generic)|balanced[:\[]\s*(\d+)\s*,\s*(\d+)\s*(?:,\s*([0-9.]+)\s*)?\]?)\s*$")


def parse_allocator(text: str) -> AllocatorConfig:
    """Parse ``generic`` or ``balanced:N,M[,ratio]`` (``balanced[N,M]`` also accepted)."""
    m = _CONFIG_RE.match(text)
    if not m:
        raise ConfigError(f"bad allocator spec {text!r}; expected generic or balanced:N,M[,ratio]")
    if m.group(1):
        return AllocatorConfig("generic")
    ratio = float(m.group(4)) if m.group(4) else DEFAULT_FIRST_CHUNK_RATIO
    return AllocatorConfig("balanced", int(m.group(2)), int(m.group(3)), ratio)


def chunk_index(thread_id: int, team_id: int, config: AllocatorConfig) -> tuple[int, int]:
    return thread_id % config.n_thread_slots, team_id % config.m_team_slots


class ObjectLookup(NamedTuple):
    base: SimAddress
    size: int
    offset: int
    record: ObjectRecord


@dataclass(frozen=True)
class ChunkState:
    """Snapshot of one balanced chunk; offsets are relative to the chunk base."""

    base: SimAddress
    size: int
    bottom: int
    top: int
    last: int | None


class Entry(NamedTuple):
    header: int
    user: int
    size: int
    in_use: bool


class _Block:
    __slots__ = ("start", "size", "user_size", "next")

    def __init__(self, start, size, user_size=0, next=None):
        self.start = start
        self.size = size
        self.user_size = user_size
        self.next = next


class GenericAllocator:
    def __init__(self, space: MemorySpace, heap_base: int, heap_size: int,
                 config: AllocatorConfig | None = None):
        self.config = config or AllocatorConfig("generic")
        self.space = space
        a = self.config.alignment
        self.heap_base = align_up(heap_base, a)
        self.heap_size = (heap_base + heap_size - self.heap_base) // a * a
        self._lock = threading.Lock()
        self._allocs: _Block | None = None
        self._free: _Block | None = _Block(self.heap_base, self.heap_size)

    def allocate(self, size: int, thread_id: int = 0, team_id: int = 0) -> SimAddress:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        need = align_up(size, self.config.alignment)
        with self._lock:
            prev, cur = None, self._free
            while cur is not None and cur.size < need:
                prev, cur = cur, cur.next
            if cur is None:
                raise OutOfMemory(f"generic heap cannot fit {size} bytes")
            start = cur.start
            if cur.size == need:
                if prev is None:
                    self._free = cur.next
                else:
                    prev.next = cur.next
            else:
                cur.start += need
                cur.size -= need
            self._allocs = _Block(start, need, size, self._allocs)
        return SimAddress(self.space.kind, start)

    def deallocate(self, addr: SimAddress) -> None:
        if addr.space != self.space.kind:
            raise InvalidFree(f"{addr!r} is not a heap address")
        with self._lock:
            prev, cur = None, self._allocs
            while cur is not None and cur.start != addr.offset:
                prev, cur = cur, cur.next
            if cur is None:
                raise InvalidFree(f"{addr!r} is not the base of a live allocation")
            if prev is None:
                self._allocs = cur.next
            else:
                prev.next = cur.next
            self._insert_free(cur.start, cur.size)

    def _insert_free(self, start: int, size: int) -> None:
        prev, cur = None, self._free
        while cur is not None and cur.start < start:
            prev, cur = cur, cur.next
        if cur is not None and start + size == cur.start:
            cur.start = start
            cur.size += size
            node = cur
        else:
            node = _Block(start, size, 0, cur)
            if prev is None:
                self._free = node
            else:
                prev.next = node
        if prev is not None and prev.start + prev.size == node.start:
            prev.size += node.size
            prev.next = node.next

    def find_object(self, addr: SimAddress) -> ObjectRecord | None:
        if addr.space != self.space.kind:
            return None
        off = addr.offset
        if not self.heap_base <= off < self.heap_base + self.heap_size:
            return None
        with self._lock:
            cur = self._allocs
            while cur is not None:
                if cur.start <= off < cur.start + cur.user_size:
                    return ObjectRecord(SimAddress(self.space.kind, cur.start), cur.user_size)
                cur = cur.next
        return None

    def contains(self, addr: SimAddress) -> bool:
        return (addr.space == self.space.kind
                and self.heap_base <= addr.offset < self.heap_base + self.heap_size)

    def live_objects(self) -> list[tuple[int, int]]:
        with self._lock:
            out = []
            cur = self._allocs
            while cur is not None:
                out.append((cur.start, cur.user_size))
                cur = cur.next
        return sorted(out)

    def free_ranges(self) -> list[tuple[int, int]]:
        with self._lock:
            out = []
            cur = self._free
            while cur is not None:
                out.append((cur.start, cur.size))
                cur = cur.next
        return out


class _Chunk:
    __slots__ = ("base", "size", "top", "last", "lock")

    def __init__(self, base: int, size: int):
        self.base = base
        self.size = size
        self.top = 0
        self.last = NO_PREV
        self.lock = threading.Lock()


class BalancedAllocator:
    def __init__(self, space: MemorySpace, heap_base: int, heap_size: int,
                 config: AllocatorConfig):
        if config.kind != "balanced":
            raise ConfigError("BalancedAllocator needs a balanced config")
        self.config = config
        self.space = space
        a = config.alignment
        N, M = config.n_thread_slots, config.m_team_slots
        self.heap_base = align_up(heap_base, a)
        usable = heap_base + heap_size - self.heap_base
        unit = int(usable // ((N - 1 + config.first_chunk_ratio) * M)) // a * a
        first = int(config.first_chunk_ratio * unit) // a * a
        if unit < HEADER_SIZE + a and N > 1 or first < HEADER_SIZE + a:
            raise ConfigError(f"heap of {heap_size} bytes too small for {config}")
        self.unit = unit
        self.first = first
        self.row = first + (N - 1) * unit
        self.heap_size = self.row * M
        self._first_header = align_up(HEADER_SIZE, a) - HEADER_SIZE
        self.chunks = [
            _Chunk(self.heap_base + m * self.row + (0 if n == 0 else first + (n - 1) * unit),
                   first if n == 0 else unit)
            for m in range(M) for n in range(N)
        ]

    # geometry

    def chunk_index(self, thread_id: int, team_id: int) -> tuple[int, int]:
        return chunk_index(thread_id, team_id, self.config)

    def _chunk(self, n: int, m: int) -> _Chunk:
        return self.chunks[m * self.config.n_thread_slots + n]

    def _locate(self, offset: int) -> _Chunk | None:
        rel = offset - self.heap_base
        if rel < 0 or rel >= self.heap_size:
            return None
        m, rem = divmod(rel, self.row)
        n = 0 if rem < self.first else 1 + (rem - self.first) // self.unit
        return self._chunk(n, m)

    def contains(self, addr: SimAddress) -> bool:
        return addr.space == self.space.kind and self._locate(addr.offset) is not None

    # header codec

    def _read(self, chunk: _Chunk, hdr: int) -> tuple[int, int, int]:
        return HEADER.unpack_from(self.space.contents, chunk.base + hdr)

    def _write(self, chunk: _Chunk, hdr: int, size: int, prev: int, in_use: bool) -> None:
        HEADER.pack_into(self.space.contents, chunk.base + hdr, size, prev,
                         _MAGIC | (_IN_USE if in_use else 0))

    # operations

    def allocate(self, size: int, thread_id: int = 0, team_id: int = 0) -> SimAddress:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        n, m = self.chunk_index(thread_id, team_id)
        chunk = self._chunk(n, m)
        a = self.config.alignment
        with chunk.lock:
            user = align_up(chunk.top + HEADER_SIZE, a)
            if user + size <= chunk.size:
                hdr = user - HEADER_SIZE
                self._write(chunk, hdr, size, chunk.last, True)
                chunk.last = hdr
                chunk.top = user + size
                return SimAddress(self.space.kind, chunk.base + user)
            # chunk exhausted: first fit over dead entries, top down
            bound = chunk.top
            cur = chunk.last
            while cur != NO_PREV:
                _, prev, flags = self._read(chunk, cur)
                user = cur + HEADER_SIZE
                if not flags & _IN_USE and bound - user >= size:
                    self._write(chunk, cur, size, prev, True)
                    return SimAddress(self.space.kind, chunk.base + user)
                bound = cur
                cur = prev
        raise OutOfMemory(f"chunk ({n},{m}) cannot fit {size} bytes")

    def deallocate(self, addr: SimAddress) -> None:
        chunk = self._locate(addr.offset) if addr.space == self.space.kind else None
        if chunk is None:
            raise InvalidFree(f"{addr!r} is not a heap address")
        hdr = addr.offset - chunk.base - HEADER_SIZE
        with chunk.lock:
            if not self._is_entry(chunk, hdr):
                raise InvalidFree(f"{addr!r} is not the base of a live allocation")
            size, prev, _ = self._read(chunk, hdr)
            self._write(chunk, hdr, size, prev, False)
            if hdr != chunk.last:
                return
            # reclaim the top entry and any dead entries directly below it
            cur = hdr
            while True:
                _, prev, flags = self._read(chunk, cur)
                if flags & _IN_USE:
                    break
                if prev == NO_PREV:
                    chunk.last, chunk.top = NO_PREV, 0
                    break
                psize = self._read(chunk, prev)[0]
                chunk.last, chunk.top = prev, prev + HEADER_SIZE + psize
                cur = prev

    def _is_entry(self, chunk: _Chunk, hdr: int) -> bool:
        if hdr < 0 or hdr + HEADER_SIZE >= chunk.top or chunk.last == NO_PREV:
            return False
        if (hdr + HEADER_SIZE) % self.config.alignment:
            return False
        size, prev, flags = self._read(chunk, hdr)
        if flags != _MAGIC | _IN_USE or hdr + HEADER_SIZE + size > chunk.top:
            return False
        if prev == NO_PREV:
            return hdr == self._first_header
        if prev >= hdr:
            return False
        psize, _, pflags = self._read(chunk, prev)
        return pflags & ~_IN_USE == _MAGIC and prev + HEADER_SIZE + psize <= hdr

    def find_object(self, addr: SimAddress) -> ObjectRecord | None:
        chunk = self._locate(addr.offset) if addr.space == self.space.kind else None
        if chunk is None:
            return None
        rel = addr.offset - chunk.base
        with chunk.lock:
            if rel >= chunk.top:
                return None
            cur = chunk.last
            while cur != NO_PREV:
                size, prev, flags = self._read(chunk, cur)
                user = cur + HEADER_SIZE
                if rel >= user:
                    if rel < user + size and flags & _IN_USE:
                        return ObjectRecord(SimAddress(self.space.kind, chunk.base + user), size)
                    return None
                cur = prev
        return None

    # introspection

    def chunk_state(self, n: int, m: int) -> ChunkState:
        c = self._chunk(n, m)
        with c.lock:
            return ChunkState(SimAddress(self.space.kind, c.base), c.size, 0, c.top,
                              None if c.last == NO_PREV else c.last)

    def entries(self, n: int, m: int) -> list[Entry]:
        """Header chain of one chunk, walked from the top entry down."""
        c = self._chunk(n, m)
        out = []
        with c.lock:
            cur = c.last
            while cur != NO_PREV:
                size, prev, flags = self._read(c, cur)
                out.append(Entry(cur, cur + HEADER_SIZE, size, bool(flags & _IN_USE)))
                cur = prev
        return out

    def live_objects(self) -> list[tuple[int, int]]:
        out = []
        N, M = self.config.n_thread_slots, self.config.m_team_slots
        for m in range(M):
            for n in range(N):
                base = self._chunk(n, m).base
                out.extend((base + e.user, e.size) for e in self.entries(n, m) if e.in_use)
        return sorted(out)


def make_allocator(config: AllocatorConfig | str, space: MemorySpace, heap_base: int,
                   heap_size: int):
    if isinstance(config, str):
        config = parse_allocator(config)
    if config.kind == "generic":
        return GenericAllocator(space, heap_base, heap_size, config)
    return BalancedAllocator(space, heap_base, heap_size, config)


def reallocate(allocator, memory_space: MemorySpace, addr: SimAddress | None, size: int,
               thread_id: int = 0, team_id: int = 0) -> SimAddress:
    """Naive realloc: allocate, copy the common prefix, free the old block."""
    new = allocator.allocate(size, thread_id, team_id)
    if addr is not None:
        old = allocator.find_object(addr)
        if old is None or old.base != addr:
            allocator.deallocate(new)
            raise InvalidFree(f"{addr!r} is not the base of a live allocation")
        n = min(old.size, size)
        memory_space.contents[new.offset:new.offset + n] = \
            memory_space.contents[addr.offset:addr.offset + n]
        allocator.deallocate(addr)
    return new


__all__ = [
    "AllocatorConfig", "BalancedAllocator", "ChunkState", "Entry", "GenericAllocator",
    "ObjectLookup", "ObjectRecord", "Origin", "chunk_index", "make_allocator",
    "parse_allocator", "reallocate", "HEADER_SIZE",
]
