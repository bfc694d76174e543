"""Cycle-stepped simulation of the SiteO / SiteM / Tile hierarchy.

Every cycle runs in two phases.  In phase A each busy SiteO looks at the
messages waiting for it (bus receive registers plus the heads of its Left
and Top FIFOs), in ascending source order, and either executes them or
moves them into one of its output registers.  In phase B every occupied
output register and every due ingress port offers its message to the
destination; offers are granted in ascending source order and a refused
offer stays with its sender (a ``stall_backpressure`` event).  A message
therefore covers one hop or one bus segment per cycle.

Geometry: SiteM ``s`` sits in a 4x4 SiteM Tile, Tiles are laid out 4x4, so
SiteO ``(sitem, local_row, local_col)`` has global coordinates
``(4*gy + local_row, 4*gx + local_col)``.  Addresses at or above
``sitems * 16`` are memory-mapped egress.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .isa import (
    ADDRESS_LIMIT,
    PAIR_OPS,
    SITEM_SIDE,
    SITEOS_PER_SITEM,
    AddressOutOfRange,
    Message,
    MessageProgram,
    Opcode,
    Port,
    encode_message,
    f32_to_bits,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

INSTR_BUFFER_WORDS = 8
# Prog payload that configures a reduction: a signalling-NaN pattern whose low
# 22 bits carry the operand count.
REDUCTION_TAG = 0x7F800000
REDUCTION_TAG_MASK = 0xFFC00000
MAX_ARITY = 0x3FFFFF

_POS_ZERO = np.float32(0.0)


def reduction_header(arity: int) -> int:
    """Prog value bits that turn the target SiteO into an ``arity``-operand reduction."""
    if not 1 <= arity <= MAX_ARITY:
        raise ValueError(f"arity {arity} outside [1, {MAX_ARITY}]")
    return REDUCTION_TAG | arity


def header_arity(bits: int) -> int:
    if bits & REDUCTION_TAG_MASK == REDUCTION_TAG:
        return bits & MAX_ARITY
    return 0


class FabricError(RuntimeError):
    pass


class ConfigError(FabricError, ValueError):
    pass


class PortError(FabricError, ValueError):
    pass


class ContinuationMissing(FabricError):
    pass


class DeadlockDetected(FabricError):
    pass


@dataclass(frozen=True)
class FabricConfig:
    sitems: int = 16              # SiteMs in the fabric, each 16 SiteOs
    fifo_depth: int = 4           # entries per Left/Top FIFO
    buses_per_row: int = 4        # horizontal bus lanes per SiteM row
    buses_per_col: int = 4        # vertical bus lanes per SiteM column
    sitem_egress_width: int = 12  # hop/memory messages leaving a SiteM per cycle
    clock_hz: float = 1e8

    def __post_init__(self):
        if not 1 <= self.sitems or self.sitems * SITEOS_PER_SITEM > ADDRESS_LIMIT:
            raise ConfigError(f"sitems={self.sitems}: fabric must hold 1..{ADDRESS_LIMIT} SiteOs")
        if self.fifo_depth < 1:
            raise ConfigError("fifo_depth must be >= 1")
        if not 1 <= self.buses_per_row <= 16 or not 1 <= self.buses_per_col <= 16:
            raise ConfigError("bus lanes must be in 1..16")
        if self.sitem_egress_width < 3:
            raise ConfigError("sitem_egress_width must be >= 3")
        if self.clock_hz <= 0:
            raise ConfigError("clock_hz must be positive")

    @property
    def siteos(self) -> int:
        return self.sitems * SITEOS_PER_SITEM

    @classmethod
    def from_mapping(cls, data: dict) -> "FabricConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: (float(v) if k == "clock_hz" else int(v)) for k, v in data.items()}
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "FabricConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad config file: {exc}") from None
        return cls.from_mapping(data.get("fabric", data))

    @classmethod
    def load(cls, path) -> "FabricConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


# --- geometry --------------------------------------------------------------

def sitem_grid_position(sitem: int) -> tuple[int, int]:
    """(row, col) of a SiteM in the SiteM grid; Tiles are 4x4 SiteMs, Blocks 4x4 Tiles."""
    tile, within = divmod(sitem, 16)
    block, tile_in_block = divmod(tile, 16)
    tr, tc = divmod(tile_in_block, 4)
    mr, mc = divmod(within, 4)
    return tr * 4 + mr, block * 16 + tc * 4 + mc


def site_coords(site_id: int) -> tuple[int, int]:
    """Global (row, col) of a SiteO."""
    gy, gx = sitem_grid_position(site_id // SITEOS_PER_SITEM)
    local = site_id % SITEOS_PER_SITEM
    return gy * SITEM_SIDE + local // SITEM_SIDE, gx * SITEM_SIDE + local % SITEM_SIDE


def tile_of(sitem: int) -> int:
    return sitem // 16


# --- trace -----------------------------------------------------------------

TRACE_KINDS = ("inject", "hop", "bus_tx", "execute", "emit", "stall_backpressure", "egress")


@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    unit: object     # SiteO id, port name, or "mem:<addr>"
    kind: str
    word: int
    uid: int = -1    # message copy identity, for conservation checks
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps({"cycle": self.cycle, "unit": self.unit, "kind": self.kind,
                           "word": f"{self.word:016x}"})


def trace_hash(events) -> str:
    h = hashlib.sha256()
    for ev in events:
        h.update(f"{ev.cycle}|{ev.unit}|{ev.kind}|{ev.word:016x}|{ev.uid}|{ev.detail}\n".encode())
    return h.hexdigest()


def write_trace_jsonl(events, path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def write_trace_csv(events, path) -> None:
    with open(path, "w") as fh:
        fh.write("cycle,unit,kind,word\n")
        for ev in events:
            fh.write(f"{ev.cycle},{ev.unit},{ev.kind},{ev.word:016x}\n")


# --- state -----------------------------------------------------------------

class _Flit:
    """A message copy in flight, with the bookkeeping the word itself lacks."""

    __slots__ = ("msg", "word", "uid", "src", "broadcast", "target")

    def __init__(self, msg: Message, uid: int, src: int, broadcast: bool = False):
        self.msg = msg
        self.word = encode_message(msg)
        self.uid = uid
        self.src = src
        self.broadcast = broadcast
        self.target = None


class _SiteO:
    __slots__ = ("id", "row", "col", "sitem", "lrow", "lcol", "left", "right", "up", "down",
                 "stored", "cont", "instr_buffer", "arity", "counter", "latch",
                 "fifo_left", "fifo_top", "rx", "out_right", "out_down", "out_emit", "out_mem",
                 "max_fifo")

    def __init__(self, site_id: int):
        self.id = site_id
        self.row, self.col = site_coords(site_id)
        self.sitem = site_id // SITEOS_PER_SITEM
        self.lrow, self.lcol = divmod(site_id % SITEOS_PER_SITEM, SITEM_SIDE)
        self.left = self.right = self.up = self.down = None
        self.stored = _POS_ZERO
        self.cont = None
        self.instr_buffer = []
        self.arity = 0
        self.counter = 0
        self.latch = None
        self.fifo_left = deque()
        self.fifo_top = deque()
        self.rx = {}
        self.out_right = self.out_down = self.out_emit = self.out_mem = None
        self.max_fifo = 0

    def busy(self) -> bool:
        return bool(self.fifo_left or self.fifo_top or self.rx or self.out_right is not None
                    or self.out_down is not None or self.out_emit is not None
                    or self.out_mem is not None)

    def mid_reduction(self) -> bool:
        return self.counter > 0


@dataclass(frozen=True)
class SiteOState:
    id: int
    stored_value: float
    stored_bits: int
    continuation: tuple | None
    instr_buffer: tuple
    counter: int
    arity: int
    latched: int | None
    fifo_left: tuple
    fifo_top: tuple
    left: int | None
    right: int | None
    up: int | None
    down: int | None


@dataclass
class RunReport:
    total_cycles: int = 0
    first_injection_cycle: int | None = None
    last_cycle: int | None = None
    last_prog_cycle: int | None = None
    phases: dict = field(default_factory=lambda: {"programming": 0, "operation": 0, "offload": 0})
    egress: list = field(default_factory=list)  # (cycle, address, value_bits)
    stalls: int = 0
    injected: int = 0
    emitted: int = 0
    fanout: int = 0
    executed: int = 0
    egressed: int = 0
    misrouted: int = 0
    max_fifo_occupancy: int = 0
    reductions: list = field(default_factory=list)  # (cycle, site, operand source ids)
    clock_hz: float = 1e8

    @property
    def wall_time_s(self) -> float:
        return self.total_cycles / self.clock_hz

    def egress_values(self, address: int) -> list[float]:
        from .isa import bits_to_f32
        return [float(bits_to_f32(b)) for _, a, b in self.egress if a == address]

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "first_injection_cycle": self.first_injection_cycle,
            "last_cycle": self.last_cycle,
            "last_prog_cycle": self.last_prog_cycle,
            "phases": dict(self.phases),
            "wall_time_s": self.wall_time_s,
            "stalls": self.stalls,
            "counts": {"injected": self.injected, "emitted": self.emitted, "fanout": self.fanout,
                       "executed": self.executed, "egressed": self.egressed,
                       "misrouted": self.misrouted},
            "max_fifo_occupancy": self.max_fifo_occupancy,
            "egress": [{"cycle": c, "address": a, "value": f"{b:08x}"} for c, a, b in self.egress],
        }


# --- the engine -------------------------------------------------------------

class Fabric:
    """Full simulated state of one m-IPU fabric.  Not thread-safe; use one per thread."""

    def __init__(self, cfg: FabricConfig | None = None):
        self.cfg = cfg or FabricConfig()
        self.n_sites = self.cfg.siteos
        self.sites = [_SiteO(i) for i in range(self.n_sites)]
        self._by_coord = {(s.row, s.col): s.id for s in self.sites}
        for s in self.sites:
            s.right = self._by_coord.get((s.row, s.col + 1))
            s.left = self._by_coord.get((s.row, s.col - 1))
            s.down = self._by_coord.get((s.row + 1, s.col))
            s.up = self._by_coord.get((s.row - 1, s.col))
        self.cycle = 0
        self._uid = 0
        self._active: set[int] = set()
        self._ports: dict[Port, deque] = {}
        self._egress_arrivals: list = []
        self.report = RunReport(clock_hz=self.cfg.clock_hz)

    # ---- helpers
    def _new_uid(self) -> int:
        self._uid += 1
        return self._uid

    def coords(self, site_id: int) -> tuple[int, int]:
        return self.sites[site_id].row, self.sites[site_id].col

    def site_at(self, row: int, col: int) -> int | None:
        return self._by_coord.get((row, col))

    def top_port_exists(self, port: Port) -> bool:
        return port.sitem < self.cfg.sitems and sitem_grid_position(port.sitem)[0] == 0

    def validate_port(self, port: Port, msg: Message) -> None:
        if port.sitem >= self.cfg.sitems:
            raise PortError(f"port {port} addresses SiteM {port.sitem}, fabric has {self.cfg.sitems}")
        if port.kind == "T":
            if not self.top_port_exists(port):
                raise PortError(f"SiteM {port.sitem} is not on the fabric's top edge; no port {port}")
            return
        lanes = self.cfg.buses_per_col if port.kind == "V" else self.cfg.buses_per_row
        if port.lane >= lanes:
            raise PortError(f"port {port}: lane {port.lane} >= {lanes}")
        dest = msg.present_dest
        if dest >= self.n_sites:
            raise PortError(f"bus port {port} cannot carry memory-bound message to {dest}")
        d = self.sites[dest]
        if port.kind == "V":
            if d.sitem != port.sitem or d.lcol != port.position:
                raise PortError(f"V port {port} reaches column {port.position} of SiteM {port.sitem}, "
                                f"not SiteO {dest}")
        else:
            base = self.sites[port.sitem * SITEOS_PER_SITEM + port.position * SITEM_SIDE]
            if d.row != base.row:
                raise PortError(f"H port {port} drives global row {base.row}, not SiteO {dest}")

    def inspect(self, site_id: int) -> SiteOState:
        if not 0 <= site_id < self.n_sites:
            raise AddressOutOfRange(f"SiteO {site_id} not in a {self.n_sites}-SiteO fabric")
        s = self.sites[site_id]
        return SiteOState(
            id=s.id, stored_value=float(s.stored), stored_bits=f32_to_bits(s.stored),
            continuation=(s.cont[0].name, s.cont[1]) if s.cont else None,
            instr_buffer=tuple((op.name, d) for op, d in s.instr_buffer),
            counter=s.counter, arity=s.arity,
            latched=s.latch.word if s.latch is not None else None,
            fifo_left=tuple(f.word for f in s.fifo_left), fifo_top=tuple(f.word for f in s.fifo_top),
            left=s.left, right=s.right, up=s.up, down=s.down,
        )

    def route(self, site_id: int, msg: Message, generated: bool = False) -> str:
        """Routing decision for ``msg`` held by ``site_id``.

        Returns one of ``execute_here``, ``stream_right``, ``stream_down``,
        ``bus_broadcast`` (generated messages for the same global row) or ``egress``.
        """
        dest = msg.present_dest
        if dest == site_id and not generated:
            return "execute_here"
        if dest >= self.n_sites:
            return "egress"
        s = self.sites[site_id]
        drow = self.sites[dest].row
        if drow == s.row:
            return "bus_broadcast" if generated else "stream_right"
        return "stream_down"

    # ---- injection
    def inject(self, cycle: int, port: Port, msg: Message) -> None:
        self.validate_port(port, msg)
        q = self._ports.setdefault(port, deque())
        if q and q[-1][0] > cycle:
            raise PortError("injections must be queued in cycle order")
        q.append((cycle, msg))

    def pending(self) -> bool:
        return bool(self._active or any(self._ports.values()) or self._egress_arrivals)

    # ---- one cycle
    def step(self, injections=()) -> list[TraceEvent]:
        """Advance one cycle; ``injections`` are (port, message) pairs due now."""
        for port, msg in injections:
            self.inject(self.cycle, port, msg)
        t = self.cycle
        events: list[TraceEvent] = []
        rep = self.report

        for addr, flit in self._egress_arrivals:
            detail = "edge" if len(flit.target) > 2 else ""
            events.append(TraceEvent(t, f"mem:{addr}", "egress", flit.word, flit.uid, detail))
            rep.egressed += 1
            rep.egress.append((t, addr, flit.msg.value_bits))
        self._egress_arrivals = []

        with np.errstate(all="ignore"):
            for sid in sorted(self._active):
                self._phase_a(self.sites[sid], t, events)
        self._phase_b(t, events)

        self._active = {sid for sid in self._active if self.sites[sid].busy()}
        self.cycle += 1
        return events

    def _phase_a(self, s: _SiteO, t: int, events: list) -> None:
        cands = []
        for seg, flit in s.rx.items():
            cands.append((flit.src, 0, seg, flit))
        if s.fifo_left:
            cands.append((s.fifo_left[0].src, 1, "L", s.fifo_left[0]))
        if s.fifo_top:
            cands.append((s.fifo_top[0].src, 2, "T", s.fifo_top[0]))
        cands.sort(key=lambda c: (c[0], c[1], str(c[2])))
        for _, _, where, flit in cands:
            if not self._consume(s, flit, t, events):
                break
            if where == "L":
                s.fifo_left.popleft()
            elif where == "T":
                s.fifo_top.popleft()
            else:
                del s.rx[where]

    def _consume(self, s: _SiteO, flit: _Flit, t: int, events: list) -> bool:
        """Try to take ``flit`` this cycle; False leaves it (and everything after it) waiting."""
        decision = "execute_here" if flit.broadcast else self.route(s.id, flit.msg)
        if decision == "execute_here":
            return self._execute(s, flit, t, events)
        if decision == "egress":
            if s.out_mem is not None:
                return False
            flit.target = ("mem", flit.msg.present_dest)
            s.out_mem = flit
            return True
        if decision == "stream_right":
            if s.right is None:
                return self._fall_off(s, flit)
            if s.out_right is not None:
                return False
            flit.target = ("fifo", s.right, "left")
            s.out_right = flit
            return True
        # stream_down
        if s.down is None:
            return self._fall_off(s, flit)
        if s.out_down is not None:
            return False
        flit.target = ("fifo", s.down, "top")
        s.out_down = flit
        return True

    def _fall_off(self, s: _SiteO, flit: _Flit) -> bool:
        # No neighbour in the routing direction: the message leaves at the fabric edge.
        if s.out_mem is not None:
            return False
        flit.target = ("mem", flit.msg.present_dest, "edge")
        s.out_mem = flit
        return True

    def _execute(self, s: _SiteO, flit: _Flit, t: int, events: list) -> bool:
        msg = flit.msg
        op = msg.present_opcode
        v = msg.value
        emit_value = None
        emit_dest = None  # (op, dest) for the produced message
        emit_next = (msg.next_opcode, msg.next_dest)
        completes = False

        if op == Opcode.Prog:
            arity = header_arity(msg.value_bits)
            cont = (msg.next_opcode, msg.next_dest)
            if s.mid_reduction() or s.instr_buffer:
                # Continuation queued (in order) until the running reduction completes.
                if len(s.instr_buffer) >= INSTR_BUFFER_WORDS:
                    return False
                s.instr_buffer.append(cont)
            else:
                s.cont = cont
                s.arity = arity
                s.counter = 0
                s.stored = _POS_ZERO if arity else v
            self._log_exec(s, flit, t, events)
            if self.report.last_prog_cycle is None or t > self.report.last_prog_cycle:
                self.report.last_prog_cycle = t
            return True

        if op == Opcode.UPDATE:
            s.stored = v
            self._log_exec(s, flit, t, events)
            return True

        if op in PAIR_OPS:
            if s.latch is None:
                s.latch = msg
                self._log_exec(s, flit, t, events)
                return True
            if s.out_emit is not None:
                return False
            a = s.latch.value
            emit_value = _arith(op, a, v)
            emit_dest = (msg.next_opcode, msg.next_dest)
            emit_next = (s.latch.next_opcode, s.latch.next_dest)
            s.latch = None
        elif s.arity and op in (Opcode.A_ADDS, Opcode.Av_ADD, Opcode.CMP):
            fresh = s.counter == 0
            completes = s.counter == 1 or (fresh and s.arity == 1)
            if completes and s.out_emit is not None:
                return False
            if completes and s.cont is None:
                raise ContinuationMissing(f"SiteO {s.id} completes a reduction with no continuation")
            if fresh:
                s.counter = s.arity
                s.stored = v
            elif op == Opcode.CMP:
                s.stored = v if v > s.stored else s.stored
            else:
                s.stored = np.float32(s.stored + v)
            s.counter -= 1
            self._record_operand(s, flit, t, fresh)
            if not completes:
                self._log_exec(s, flit, t, events)
                return True
            emit_value = s.stored
            if op == Opcode.Av_ADD:
                emit_value = np.float32(emit_value / np.float32(s.arity))
            emit_dest = s.cont
            s.stored = _POS_ZERO
        else:
            if s.out_emit is not None:
                return False
            if s.cont is None:
                raise ContinuationMissing(f"SiteO {s.id} fires {op.name} with no continuation")
            emit_dest = s.cont
            if op == Opcode.RELU:
                emit_value = v if v > 0 else _POS_ZERO
            elif op == Opcode.CMP:
                emit_value = v if v > s.stored else s.stored
            elif op == Opcode.Av_ADD:
                emit_value = np.float32(np.float32(s.stored + v) / np.float32(2.0))
            else:
                emit_value = _arith(op, s.stored, v)

        self._log_exec(s, flit, t, events)
        out = Message(emit_dest[0], emit_dest[1], f32_to_bits(emit_value), emit_next[0], emit_next[1])
        new = _Flit(out, self._new_uid(), s.id)
        decision = self.route(s.id, out, generated=True)
        if decision == "egress":
            new.target = ("mem", out.present_dest)
        elif decision == "bus_broadcast":
            new.target = ("hbus", out.present_dest)
        elif s.down is not None:
            new.target = ("fifo", s.down, "top")
        else:
            new.target = ("mem", out.present_dest, "edge")
        s.out_emit = new
        self.report.emitted += 1
        events.append(TraceEvent(t, s.id, "emit", new.word, new.uid))
        if completes and s.instr_buffer:
            s.cont = s.instr_buffer.pop(0)
        return True

    def _record_operand(self, s: _SiteO, flit: _Flit, t: int, fresh: bool) -> None:
        reds = self.report.reductions
        if fresh:
            reds.append((t, s.id, [flit.src]))
        else:
            for i in range(len(reds) - 1, -1, -1):
                if reds[i][1] == s.id:
                    reds[i][2].append(flit.src)
                    break

    def _log_exec(self, s: _SiteO, flit: _Flit, t: int, events: list) -> None:
        self.report.executed += 1
        events.append(TraceEvent(t, s.id, "execute", flit.word, flit.uid, flit.msg.present_opcode.name))

    # ---- phase B: grant offers
    def _phase_b(self, t: int, events: list) -> None:
        rep = self.report
        offers = []
        for port, q in self._ports.items():
            if q and q[0][0] <= t:
                offers.append((-1 - port.to_u16(), 0, port))
        for sid in self._active:
            s = self.sites[sid]
            for k, reg in enumerate(("out_right", "out_down", "out_emit", "out_mem")):
                if getattr(s, reg) is not None:
                    offers.append((sid, 1 + k, reg))
        offers.sort(key=lambda o: (o[0], o[1]))

        lanes_used: set = set()
        sitem_class: dict = {}
        class_cap = self.cfg.sitem_egress_width // 3

        for src, _, what in offers:
            if src < 0:
                self._offer_port(what, t, events, lanes_used)
                continue
            s = self.sites[src]
            flit = getattr(s, what)
            target = flit.target
            kind = target[0]
            ok = False
            if kind == "fifo":
                dst = self.sites[target[1]]
                cls = self._crossing_class(s, dst)
                fifo = dst.fifo_left if target[2] == "left" else dst.fifo_top
                if len(fifo) < self.cfg.fifo_depth and (
                        cls is None or sitem_class.get((s.sitem, cls), 0) < class_cap):
                    fifo.append(flit)
                    flit.src = s.id
                    if cls is not None:
                        sitem_class[(s.sitem, cls)] = sitem_class.get((s.sitem, cls), 0) + 1
                    self._note_fifo(dst, fifo)
                    self._active.add(dst.id)
                    events.append(TraceEvent(t, s.id, "hop", flit.word, flit.uid, f"->{dst.id}"))
                    ok = True
            elif kind == "hbus":
                dst = self.sites[target[1]]
                for lane in range(self.cfg.buses_per_row):
                    seg = ("H", s.sitem, s.lrow, lane)
                    if seg in lanes_used or seg in dst.rx:
                        continue
                    lanes_used.add(seg)
                    flit.src = s.id
                    dst.rx[seg] = flit
                    self._active.add(dst.id)
                    events.append(TraceEvent(t, s.id, "bus_tx", flit.word, flit.uid,
                                             f"H{s.sitem}.{s.lrow}.{lane}->{dst.id}"))
                    ok = True
                    break
            else:  # memory egress
                key = (s.sitem, "mem")
                if sitem_class.get(key, 0) < class_cap:
                    sitem_class[key] = sitem_class.get(key, 0) + 1
                    addr = target[1]
                    if len(target) > 2:
                        rep.misrouted += 1
                    self._egress_arrivals.append((addr, flit))
                    ok = True
            if ok:
                setattr(s, what, None)
            else:
                rep.stalls += 1
                events.append(TraceEvent(t, s.id, "stall_backpressure", flit.word, flit.uid, kind))

    def _crossing_class(self, s: _SiteO, dst: _SiteO):
        if s.sitem == dst.sitem:
            return None
        if tile_of(s.sitem) == tile_of(dst.sitem):
            return "tile"
        return "row" if dst.row == s.row else "column"

    def _note_fifo(self, dst: _SiteO, fifo) -> None:
        n = len(fifo)
        if n > dst.max_fifo:
            dst.max_fifo = n
            if n > self.report.max_fifo_occupancy:
                self.report.max_fifo_occupancy = n
        assert n <= self.cfg.fifo_depth, "FIFO overflow"

    def _offer_port(self, port: Port, t: int, events: list, lanes_used: set) -> None:
        rep = self.report
        q = self._ports[port]
        msg = q[0][1]
        name = str(port)
        src = -1 - port.to_u16()
        ok = False
        if port.kind == "T":
            dst = self.sites[port.sitem * SITEOS_PER_SITEM + port.position]
            if len(dst.fifo_top) < self.cfg.fifo_depth:
                flit = _Flit(msg, self._new_uid(), src)
                dst.fifo_top.append(flit)
                self._note_fifo(dst, dst.fifo_top)
                self._active.add(dst.id)
                events.append(TraceEvent(t, name, "inject", flit.word, flit.uid))
                ok = True
        elif port.kind == "V":
            seg = ("V", port.sitem, port.position, port.lane)
            d = self.sites[msg.present_dest]
            base = port.sitem * SITEOS_PER_SITEM + port.position
            targets = [self.sites[base + r * SITEM_SIDE] for r in range(d.lrow + 1)]
            if seg not in lanes_used and all(seg not in x.rx for x in targets):
                lanes_used.add(seg)
                first = _Flit(msg, self._new_uid(), src, broadcast=True)
                events.append(TraceEvent(t, name, "inject", first.word, first.uid))
                for i, x in enumerate(targets):
                    flit = first if i == 0 else _Flit(msg, self._new_uid(), src, broadcast=True)
                    x.rx[seg] = flit
                    self._active.add(x.id)
                    events.append(TraceEvent(t, name, "bus_tx", flit.word, flit.uid,
                                             f"V{port.sitem}.{port.position}.{port.lane}->{x.id}"))
                rep.fanout += len(targets) - 1
                ok = True
        else:
            seg = ("H", port.sitem, port.position, port.lane)
            dst = self.sites[msg.present_dest]
            if seg not in lanes_used and seg not in dst.rx:
                lanes_used.add(seg)
                flit = _Flit(msg, self._new_uid(), src)
                dst.rx[seg] = flit
                self._active.add(dst.id)
                events.append(TraceEvent(t, name, "inject", flit.word, flit.uid))
                events.append(TraceEvent(t, name, "bus_tx", flit.word, flit.uid,
                                         f"H{port.sitem}.{port.position}.{port.lane}->{dst.id}"))
                ok = True
        if ok:
            q.popleft()
            rep.injected += 1
            if rep.first_injection_cycle is None:
                rep.first_injection_cycle = t
        else:
            rep.stalls += 1
            events.append(TraceEvent(t, name, "stall_backpressure", encode_message(msg)))


def _arith(op: Opcode, a: np.float32, b: np.float32) -> np.float32:
    if op in (Opcode.A_ADD, Opcode.A_ADDS):
        return np.float32(a + b)
    if op in (Opcode.A_SUB, Opcode.A_SUBS):
        return np.float32(a - b)
    if op in (Opcode.A_MUL, Opcode.A_MULS):
        return np.float32(a * b)
    if op in (Opcode.A_DIV, Opcode.A_DIVS):
        return np.float32(a / b)
    raise AssertionError(op)


def build_fabric(cfg: FabricConfig | None = None) -> Fabric:
    return Fabric(cfg)


def run_program(fabric: Fabric, program: MessageProgram, cycle_budget: int = 1_000_000,
                idle_window: int = 256, trace_sink=None) -> tuple[RunReport, list[TraceEvent]]:
    """Run ``program`` to completion and return the report and full trace.

    Stops when nothing is in flight and no SiteO is part-way through a
    reduction.  Raises :class:`DeadlockDetected` when the cycle budget is
    exhausted, when ``idle_window`` cycles pass without progress, or when the
    fabric drains with a reduction still waiting for operands.
    """
    for inj in program.injections:
        fabric.inject(inj.cycle, inj.port, inj.message)
    trace: list[TraceEvent] = []
    last_inj = program.injections[-1].cycle if program.injections else -1
    idle = 0
    while fabric.pending() or fabric.cycle <= last_inj:
        if fabric.cycle >= cycle_budget:
            raise DeadlockDetected(f"cycle budget {cycle_budget} exhausted with messages in flight")
        events = fabric.step()
        if trace_sink is not None:
            for ev in events:
                trace_sink(ev)
        trace.extend(events)
        if any(ev.kind != "stall_backpressure" for ev in events) or fabric.cycle <= last_inj:
            idle = 0
        else:
            idle += 1
            if idle > idle_window:
                raise DeadlockDetected(f"no progress for {idle_window} cycles at cycle {fabric.cycle}")
    stuck = [s.id for s in fabric.sites if s.mid_reduction() or s.latch is not None]
    if stuck:
        raise DeadlockDetected(f"fabric drained with partial reductions at SiteOs {stuck[:8]}")
    _finish_report(fabric.report, trace)
    return fabric.report, trace


def _finish_report(rep: RunReport, trace: list[TraceEvent]) -> None:
    if not trace or rep.first_injection_cycle is None:
        rep.total_cycles = 0
        return
    first = rep.first_injection_cycle
    last = max(ev.cycle for ev in trace)
    if rep.egress:
        last = max(c for c, _, _ in rep.egress)
    rep.last_cycle = last
    rep.total_cycles = last - first + 1
    last_exec = max((ev.cycle for ev in trace if ev.kind == "execute"), default=first)
    prog_end = rep.last_prog_cycle if rep.last_prog_cycle is not None else first - 1
    prog_end = min(prog_end, last)
    rep.phases = {
        "programming": max(0, prog_end - first + 1),
        "operation": max(0, last_exec - max(prog_end, first - 1)),
        "offload": max(0, last - max(last_exec, prog_end)),
    }
