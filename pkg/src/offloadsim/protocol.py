"""Wire-level pieces of the device-to-host call protocol.

The mailbox is a fixed layout inside the shared space::

    0   state      u32   EMPTY -> REQUESTED (client) -> DONE (server) -> EMPTY
    4   error      u32   0, or a DispatchStatus
    8   callee     u32
    12  nargs      u32
    16  ret        u64
    24  host stamps 4 x u64 (pickup, invoke start, invoke end, done set)
    64  descriptors, 32 bytes each
    ... payload (migrated objects), 16-byte aligned, sequential in arg order
"""

from __future__ import annotations

import enum
import json
import re
import struct
from dataclasses import dataclass, field

from .errors import ManglingError, PayloadOverflow
from .memory import FlagCell, MemorySpace, SimAddress, align_up

EMPTY, REQUESTED, DONE = 0, 1, 2

KERNEL_LAUNCH_CALLEE = 0
MAX_ARGS = 32
DEFAULT_PAYLOAD_CAPACITY = 16 * 1024
PAYLOAD_ALIGN = 16

# error, callee, nargs, ret; the state word at +0 is owned by the FlagCell
_HEADER = struct.Struct("<IIIQ")
_HEADER_AT = 4
_STAMPS = struct.Struct("<4Q")
_STAMPS_AT = 24
_DESC = struct.Struct("<BBHIQQQ")
_DESC_AT = 64


class DispatchStatus(enum.IntEnum):
    OK = 0
    UNKNOWN_CALLEE = 1
    HANDLER_FAULT = 2


# in-band return codes written to ``ret`` on failure
ENOSYS = -38
EFAULT = -14


class AccessMode(enum.IntFlag):
    READ = 1
    WRITE = 2
    READWRITE = 3

    @property
    def copies_in(self) -> bool:
        return bool(self & AccessMode.READ)

    @property
    def copies_out(self) -> bool:
        return bool(self & AccessMode.WRITE)

    def __str__(self) -> str:
        return {1: "Read", 2: "Write", 3: "ReadWrite"}[int(self)]


class ArgKind(enum.IntEnum):
    VALUE = 0
    REF = 1


def encode_value(v) -> int:
    """Bit pattern of a scalar or pointer passed by value (8 bytes)."""
    if v is None:
        return 0
    if isinstance(v, SimAddress):
        return v.raw
    if isinstance(v, float):
        return struct.unpack("<Q", struct.pack("<d", v))[0]
    return int(v) & 0xFFFF_FFFF_FFFF_FFFF


@dataclass
class ArgDescriptor:
    kind: ArgKind
    raw: int = 0
    addr: SimAddress | None = None
    mode: AccessMode | None = None
    obj_size: int = 0
    obj_offset: int = 0
    payload_offset: int = 0

    @classmethod
    def value(cls, v) -> ArgDescriptor:
        return cls(ArgKind.VALUE, raw=encode_value(v))

    @classmethod
    def ref(cls, addr: SimAddress, mode: AccessMode, obj_size: int, obj_offset: int):
        if not 0 <= obj_offset < obj_size:
            raise ValueError(f"offset {obj_offset} outside object of {obj_size} bytes")
        return cls(ArgKind.REF, raw=addr.raw, addr=addr, mode=AccessMode(mode),
                   obj_size=obj_size, obj_offset=obj_offset)

    @property
    def object_base(self) -> SimAddress:
        return self.addr - self.obj_offset


@dataclass
class CallRequest:
    """Argument information for one call (what the device fills in)."""

    callee: int
    args: list[ArgDescriptor] = field(default_factory=list)
    ret: int = 0
    state: int = EMPTY

    def add_value(self, v) -> None:
        self.args.append(ArgDescriptor.value(v))

    def add_ref(self, addr: SimAddress, mode: AccessMode, obj_size: int, obj_offset: int):
        self.args.append(ArgDescriptor.ref(addr, mode, obj_size, obj_offset))

    def layout_payload(self, capacity: int) -> int:
        """Assign payload offsets; returns bytes used."""
        cursor = 0
        for a in self.args:
            if a.kind == ArgKind.REF:
                cursor = align_up(cursor, PAYLOAD_ALIGN)
                a.payload_offset = cursor
                cursor += a.obj_size
        if cursor > capacity:
            raise PayloadOverflow(f"call needs {cursor} payload bytes, capacity is {capacity}")
        return cursor


class Mailbox:
    def __init__(self, space: MemorySpace, base: int = 0,
                 payload_capacity: int = DEFAULT_PAYLOAD_CAPACITY):
        self.space = space
        self.base = base
        self.state = FlagCell(space, base)
        self.payload_at = align_up(base + _DESC_AT + MAX_ARGS * _DESC.size, 256)
        self.payload_capacity = payload_capacity
        if self.payload_at + payload_capacity > space.capacity:
            raise ValueError("shared space too small for the mailbox")

    def payload_address(self, offset: int = 0) -> SimAddress:
        return self.space.address(self.payload_at + offset)

    def write_request(self, req: CallRequest) -> None:
        if len(req.args) > MAX_ARGS:
            raise PayloadOverflow(f"{len(req.args)} arguments exceed the {MAX_ARGS} slots")
        buf = self.space.contents
        _HEADER.pack_into(buf, self.base + _HEADER_AT, 0, req.callee, len(req.args), 0)
        at = self.base + _DESC_AT
        for a in req.args:
            _DESC.pack_into(buf, at, a.kind, int(a.mode or 0), 0, a.payload_offset, a.raw,
                            a.obj_size, a.obj_offset)
            at += _DESC.size

    def state_peek(self) -> int:
        return struct.unpack_from("<I", self.space.contents, self.base)[0]

    def read_request(self) -> CallRequest:
        buf = self.space.contents
        _, callee, nargs, _ = _HEADER.unpack_from(buf, self.base + _HEADER_AT)
        req = CallRequest(callee, state=self.state_peek())
        at = self.base + _DESC_AT
        for _ in range(min(nargs, MAX_ARGS)):
            kind, mode, _, poff, raw, size, off = _DESC.unpack_from(buf, at)
            at += _DESC.size
            if kind == ArgKind.REF:
                req.args.append(ArgDescriptor(ArgKind.REF, raw, SimAddress.from_raw(raw),
                                              AccessMode(mode), size, off, poff))
            else:
                req.args.append(ArgDescriptor(ArgKind.VALUE, raw))
        return req

    def write_result(self, ret: int, error: int) -> None:
        struct.pack_into("<I", self.space.contents, self.base + 4, error)
        struct.pack_into("<Q", self.space.contents, self.base + 16, encode_value(ret))

    def read_result(self) -> tuple[int, int]:
        error = struct.unpack_from("<I", self.space.contents, self.base + 4)[0]
        ret = struct.unpack_from("<q", self.space.contents, self.base + 16)[0]
        return ret, error

    def write_stamps(self, *stamps: int) -> None:
        _STAMPS.pack_into(self.space.contents, self.base + _STAMPS_AT, *stamps)

    def read_stamps(self) -> tuple[int, int, int, int]:
        return _STAMPS.unpack_from(self.space.contents, self.base + _STAMPS_AT)


# --- landing-pad names ------------------------------------------------------

_SCALAR_CODES = {"i32": "i", "f32": "f", "f64": "d", "i64": "l", "i8": "c", "void": "v",
                 "opaque": "vp"}
_CODE_RE = re.compile(r"^[ifdlcv]p*$")


def type_code(ty: str) -> str:
    stars = len(ty) - len(ty.rstrip("*"))
    base = ty.rstrip("*")
    if base not in _SCALAR_CODES:
        raise ManglingError(f"no type code for {ty!r}")
    return _SCALAR_CODES[base] + "p" * stars


def mangle(base_name: str, variadic_type_codes) -> str:
    codes = list(variadic_type_codes)
    for c in codes:
        if not _CODE_RE.match(c):
            raise ManglingError(f"unknown type code {c!r}")
    return "__" + "_".join([base_name] + codes)


# --- stage accounting -------------------------------------------------------

DEVICE_STAGES = ("init", "identify", "wait", "copyback")
HOST_STAGES = ("copyin", "invoke", "copyout", "gap")


@dataclass
class StageTimes:
    callee: int
    device: dict[str, int]
    host: dict[str, int]

    @staticmethod
    def _fractions(d: dict[str, int]) -> dict[str, float]:
        total = sum(d.values())
        return {k: (v / total if total else 0.0) for k, v in d.items()}

    def device_fractions(self) -> dict[str, float]:
        return self._fractions(self.device)

    def host_fractions(self) -> dict[str, float]:
        return self._fractions(self.host)

    def to_json(self) -> str:
        return json.dumps({
            "callee": self.callee,
            "device": {f"{k}_ns": v for k, v in self.device.items()},
            "host": {f"{k}_ns": v for k, v in self.host.items()},
        })

    @classmethod
    def from_json(cls, line: str) -> StageTimes:
        d = json.loads(line)
        strip = lambda m: {k[:-3]: v for k, v in m.items()}  # noqa: E731
        return cls(d["callee"], strip(d["device"]), strip(d["host"]))
