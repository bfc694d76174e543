"""Message encoding, opcode table, fabric addressing and the text assembler.

A fabric message is one 64-bit word, least-significant bit first::

    bits  0..3   present opcode
    bits  4..15  present destination (flat SiteO id)
    bits 16..47  value (IEEE-754 single, raw bits)
    bits 48..51  next opcode
    bits 52..63  next destination

Binary words are stored little-endian.  The numeric opcode table is a local
convention: mnemonics are numbered in listing order and codes 13..15 are
reserved.
"""

from __future__ import annotations

import enum
import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ADDRESS_BITS = 12
ADDRESS_LIMIT = 1 << ADDRESS_BITS  # 4096
SITEOS_PER_SITEM = 16
SITEM_SIDE = 4

PROGRAM_MAGIC = b"MIPUPROG"
PROGRAM_VERSION = 1
_HEADER = struct.Struct("<8sI")
_RECORD = struct.Struct("<IHHQ")


class IsaError(ValueError):
    """Base class for encoding and assembly errors."""


class InvalidOpcode(IsaError):
    pass


class AddressOutOfRange(IsaError):
    pass


class ParseError(IsaError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class UnknownMnemonic(ParseError):
    pass


class Opcode(enum.IntEnum):
    Prog = 0
    UPDATE = 1
    A_ADD = 2
    A_ADDS = 3
    A_SUB = 4
    A_SUBS = 5
    A_MUL = 6
    A_MULS = 7
    A_DIV = 8
    A_DIVS = 9
    Av_ADD = 10
    RELU = 11
    CMP = 12

    @classmethod
    def from_code(cls, code: int) -> "Opcode":
        try:
            return cls(code)
        except ValueError:
            raise InvalidOpcode(f"opcode {code} is reserved") from None

    @classmethod
    def from_mnemonic(cls, name: str) -> "Opcode":
        try:
            return cls[name]
        except KeyError:
            raise UnknownMnemonic(f"unknown mnemonic {name!r}") from None


STATIONARY_OPS = frozenset({Opcode.A_ADDS, Opcode.A_SUBS, Opcode.A_MULS, Opcode.A_DIVS})
PAIR_OPS = frozenset({Opcode.A_ADD, Opcode.A_SUB, Opcode.A_MUL, Opcode.A_DIV})
REDUCTION_OPS = frozenset({Opcode.A_ADDS, Opcode.Av_ADD, Opcode.CMP})


def isa_table_hash() -> str:
    """Short digest of the mnemonic/code table, printed by ``--version``."""
    text = ",".join(f"{op.name}={op.value}" for op in Opcode)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, order=True)
class SiteAddress:
    """Flat 12-bit SiteO id, SiteM-major with a row-major 4x4 local grid."""

    raw: int

    def __post_init__(self):
        if not 0 <= self.raw < ADDRESS_LIMIT:
            raise AddressOutOfRange(f"address {self.raw} outside [0, {ADDRESS_LIMIT})")

    @classmethod
    def from_parts(cls, sitem: int, local_row: int, local_col: int) -> "SiteAddress":
        if not (0 <= local_row < SITEM_SIDE and 0 <= local_col < SITEM_SIDE):
            raise AddressOutOfRange(f"local position ({local_row}, {local_col})")
        return cls(sitem * SITEOS_PER_SITEM + local_row * SITEM_SIDE + local_col)

    @property
    def sitem_index(self) -> int:
        return self.raw // SITEOS_PER_SITEM

    @property
    def local_index(self) -> int:
        return self.raw % SITEOS_PER_SITEM

    @property
    def local_row(self) -> int:
        return self.local_index // SITEM_SIDE

    @property
    def local_col(self) -> int:
        return self.local_index % SITEM_SIDE

    def __int__(self) -> int:
        return self.raw


def f32_to_bits(value: float) -> int:
    return int(np.array(value, dtype=np.float32).view(np.uint32))


def bits_to_f32(bits: int) -> np.float32:
    return np.array(bits & 0xFFFFFFFF, dtype=np.uint32).view(np.float32)[()]


def _check_address(addr: int, what: str) -> int:
    addr = int(addr)
    if not 0 <= addr < ADDRESS_LIMIT:
        raise AddressOutOfRange(f"{what} {addr} outside [0, {ADDRESS_LIMIT})")
    return addr


@dataclass(frozen=True)
class Message:
    present_opcode: Opcode
    present_dest: int
    value_bits: int
    next_opcode: Opcode
    next_dest: int

    def __post_init__(self):
        object.__setattr__(self, "present_opcode", Opcode(self.present_opcode))
        object.__setattr__(self, "next_opcode", Opcode(self.next_opcode))
        _check_address(self.present_dest, "present_dest")
        _check_address(self.next_dest, "next_dest")
        if not 0 <= self.value_bits <= 0xFFFFFFFF:
            raise IsaError(f"value bits {self.value_bits:#x} exceed 32 bits")

    @classmethod
    def make(cls, op, dest, value: float = 0.0, next_op=Opcode.Prog, next_dest=0) -> "Message":
        """Build a message from a float payload (rounded to single precision)."""
        return cls(Opcode(op), int(dest), f32_to_bits(value), Opcode(next_op), int(next_dest))

    @property
    def value(self) -> np.float32:
        return bits_to_f32(self.value_bits)

    def encode(self) -> int:
        return encode_message(self)


def encode_message(m: Message) -> int:
    return (
        (m.next_dest << 52)
        | (int(m.next_opcode) << 48)
        | (m.value_bits << 16)
        | (m.present_dest << 4)
        | int(m.present_opcode)
    )


def decode_message(word: int) -> Message:
    if not 0 <= word < (1 << 64):
        raise IsaError(f"word {word:#x} is not a 64-bit value")
    return Message(
        Opcode.from_code(word & 0xF),
        (word >> 4) & 0xFFF,
        (word >> 16) & 0xFFFFFFFF,
        Opcode.from_code((word >> 48) & 0xF),
        (word >> 52) & 0xFFF,
    )


# --- ingress ports -------------------------------------------------------

_PORT_KINDS = ("T", "V", "H")
_PORT_RE = re.compile(r"^([TVH])(\d+)(?:\.(\d+))?$")


@dataclass(frozen=True, order=True)
class Port:
    """An ingress port.

    ``T<n>`` is the top hop port above column ``n % 4`` of SiteM ``n // 4``.
    ``V<n>.<lane>`` drives a vertical bus lane of that SiteM column and
    ``H<n>.<lane>`` a horizontal bus lane of SiteM ``n // 4``, local row ``n % 4``.
    """

    kind: str
    index: int
    lane: int = 0

    def __post_init__(self):
        if self.kind not in _PORT_KINDS:
            raise IsaError(f"bad port kind {self.kind!r}")
        if not 0 <= self.index < 1024 or not 0 <= self.lane < 16:
            raise IsaError(f"port {self.kind}{self.index}.{self.lane} out of range")
        if self.kind == "T" and self.lane:
            raise IsaError("top ports have no lanes")

    @property
    def sitem(self) -> int:
        return self.index // SITEM_SIDE

    @property
    def position(self) -> int:
        """Column (T/V) or row (H) within the SiteM."""
        return self.index % SITEM_SIDE

    @classmethod
    def parse(cls, text: str) -> "Port":
        m = _PORT_RE.match(text)
        if not m:
            raise IsaError(f"bad port {text!r}")
        return cls(m.group(1), int(m.group(2)), int(m.group(3) or 0))

    def to_u16(self) -> int:
        return (_PORT_KINDS.index(self.kind) << 14) | (self.lane << 10) | self.index

    @classmethod
    def from_u16(cls, raw: int) -> "Port":
        kind = raw >> 14
        if kind >= len(_PORT_KINDS):
            raise IsaError(f"bad port code {raw:#06x}")
        return cls(_PORT_KINDS[kind], raw & 0x3FF, (raw >> 10) & 0xF)

    def __str__(self) -> str:
        if self.kind == "T":
            return f"T{self.index}"
        return f"{self.kind}{self.index}.{self.lane}" if self.lane else f"{self.kind}{self.index}"


@dataclass(frozen=True)
class Injection:
    cycle: int
    port: Port
    message: Message


@dataclass
class MessageProgram:
    injections: list[Injection] = field(default_factory=list)
    expected_egress: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.injections.sort(key=lambda inj: inj.cycle)
        seen = set()
        for inj in self.injections:
            key = (inj.cycle, inj.port)
            if key in seen:
                raise IsaError(f"two injections on port {inj.port} at cycle {inj.cycle}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.injections)

    def to_bytes(self) -> bytes:
        out = [_HEADER.pack(PROGRAM_MAGIC, PROGRAM_VERSION)]
        for inj in self.injections:
            out.append(_RECORD.pack(inj.cycle, inj.port.to_u16(), 0, encode_message(inj.message)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MessageProgram":
        if len(data) < _HEADER.size:
            raise IsaError("truncated program header")
        magic, version = _HEADER.unpack_from(data)
        if magic != PROGRAM_MAGIC:
            raise IsaError("not a message program (bad magic)")
        if version != PROGRAM_VERSION:
            raise IsaError(f"unsupported program version {version}")
        body = data[_HEADER.size:]
        if len(body) % _RECORD.size:
            raise IsaError("truncated program record")
        injections = [
            Injection(cycle, Port.from_u16(port), decode_message(word))
            for cycle, port, _pad, word in _RECORD.iter_unpack(body)
        ]
        return cls(injections)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MessageProgram":
        return cls.from_bytes(Path(path).read_bytes())


# --- text assembler ------------------------------------------------------

def format_value(bits: int) -> str:
    """Shortest decimal that round-trips to ``bits``; raw hex for non-finite values."""
    v = bits_to_f32(bits)
    if not np.isfinite(v):
        return f"0x{bits:08X}"
    text = str(v)
    if f32_to_bits(float(text)) != bits:
        return f"0x{bits:08X}"
    return text


def _parse_value(token: str, line: int) -> int:
    if token.lower().startswith("0x"):
        try:
            bits = int(token, 16)
        except ValueError:
            raise ParseError(f"bad raw value {token!r}", line) from None
        if bits > 0xFFFFFFFF:
            raise ParseError(f"raw value {token!r} exceeds 32 bits", line)
        return bits
    try:
        return f32_to_bits(float(token))
    except ValueError:
        raise ParseError(f"bad value {token!r}", line) from None


def _parse_int(token: str, what: str, line: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise ParseError(f"bad {what} {token!r}", line) from None


def assemble(text: str) -> MessageProgram:
    """Parse ``@<cycle> <port> <OP> <dest> <value> <NEXT_OP> <next_dest>`` lines.

    ``#`` and ``;`` start comments; blank lines are ignored.
    """
    injections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.split(r"[#;]", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 7 or not tokens[0].startswith("@"):
            raise ParseError("expected '@<cycle> <port> <OP> <dest> <value> <NEXT_OP> <next_dest>'", lineno)
        cycle = _parse_int(tokens[0][1:], "cycle", lineno)
        if cycle < 0:
            raise ParseError("negative cycle", lineno)
        try:
            port = Port.parse(tokens[1])
        except IsaError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            op = Opcode.from_mnemonic(tokens[2])
            next_op = Opcode.from_mnemonic(tokens[5])
        except UnknownMnemonic as exc:
            raise UnknownMnemonic(str(exc), lineno) from None
        dest = _parse_int(tokens[3], "destination", lineno)
        next_dest = _parse_int(tokens[6], "destination", lineno)
        for addr in (dest, next_dest):
            if not 0 <= addr < ADDRESS_LIMIT:
                raise AddressOutOfRange(f"line {lineno}: address {addr} outside [0, {ADDRESS_LIMIT})")
        msg = Message(op, dest, _parse_value(tokens[4], lineno), next_op, next_dest)
        injections.append(Injection(cycle, port, msg))
    try:
        return MessageProgram(injections)
    except IsaError as exc:
        raise ParseError(str(exc)) from None


def format_injection(inj: Injection) -> str:
    m = inj.message
    return (f"@{inj.cycle} {inj.port} {m.present_opcode.name} {m.present_dest} "
            f"{format_value(m.value_bits)} {m.next_opcode.name} {m.next_dest}")


def disassemble(program: MessageProgram) -> str:
    return "".join(format_injection(inj) + "\n" for inj in program.injections)
