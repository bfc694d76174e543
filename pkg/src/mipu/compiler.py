"""Lower matrix multiplication and small CNNs to timed message programs.

Both mappings use the same pattern: stationary operands are loaded with Prog
messages pushed down from the fabric's top ports (deepest row first, so a
whole column finishes programming in the same cycle), streaming operands are
broadcast on vertical bus lanes one vector per cycle, products meet in a
reduction SiteO on the same row, and results leave through memory-mapped
egress addresses just past the last SiteO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fabric import FabricConfig, RunReport, reduction_header
from .isa import ADDRESS_LIMIT, SITEM_SIDE, SITEOS_PER_SITEM, Injection, Message, MessageProgram, Opcode, Port
from .workloads import CnnSpec, MatMulSpec, ShapeError

FABRIC_ROWS = 64   # SiteO rows in a block (4 tile rows x 4 SiteM rows x 4)
FABRIC_COLS = 64   # SiteO columns in a block

# Measured latency = matmul_span(N, P) + SCHEDULE_OFFSET.  The offset is the
# cycle spent writing the last result to its memory address.
SCHEDULE_OFFSET = 1


class CompileError(ValueError):
    pass


class FabricTooSmall(CompileError):
    def __init__(self, required: int, available: int):
        super().__init__(f"workload needs {required} SiteMs, fabric has {available}")
        self.required = required
        self.available = available


def site_id_at(row: int, col: int) -> int:
    """SiteO id at global coordinates (inverse of ``fabric.site_coords``)."""
    if not (0 <= row < FABRIC_ROWS and col >= 0):
        raise CompileError(f"coordinates ({row}, {col}) are outside the fabric")
    gy, lr = divmod(row, SITEM_SIDE)
    gx, lc = divmod(col, SITEM_SIDE)
    tr, mr = divmod(gy, 4)
    block, rem = divmod(gx, 16)
    tc, mc = divmod(rem, 4)
    sitem = (block * 16 + tr * 4 + tc) * 16 + mr * 4 + mc
    return sitem * SITEOS_PER_SITEM + lr * SITEM_SIDE + lc


def matmul_span(n: int, p: int) -> int:
    """Closed-form schedule length N + P + 2 of the matmul mapping (before the write-back cycle)."""
    return n + p + 2


def siteo_count(n: int, m: int, p: int, mode: str = "parallel_sitems") -> int:
    """SiteOs the matmul mapping programs: (N*M + N) per output column in parallel mode."""
    per_region = n * m + n
    return per_region * (p if mode == "parallel_sitems" else 1)


@dataclass
class CompiledWorkload:
    kind: str
    program: MessageProgram
    config: FabricConfig
    required_sitems: int
    placement: dict = field(default_factory=dict)        # role tuple -> SiteO id
    static_schedule: dict = field(default_factory=dict)  # phase -> (first, last) cycle
    reduction_order: dict = field(default_factory=dict)  # output index -> operand order
    egress_map: dict = field(default_factory=dict)       # address -> list of output indices in arrival order
    output_shape: tuple = ()
    spec: object = None

    @property
    def predicted_total_cycles(self) -> int:
        return self.static_schedule["offload"][1] + 1

    def decode(self, report: RunReport) -> np.ndarray:
        """Scatter egress words back into the output tensor."""
        out = np.full(self.output_shape, np.nan, dtype=np.float32)
        flat = out.reshape(-1)
        seen: dict[int, int] = {}
        for _, addr, bits in report.egress:
            slots = self.egress_map.get(addr)
            if slots is None:
                raise CompileError(f"unexpected egress at address {addr}")
            i = seen.get(addr, 0)
            if i >= len(slots):
                raise CompileError(f"too many results at address {addr}")
            flat[slots[i]] = np.uint32(bits).view(np.float32)
            seen[addr] = i + 1
        missing = sum(len(v) for v in self.egress_map.values()) - sum(seen.values())
        if missing:
            raise CompileError(f"{missing} results never reached memory")
        return out


class _Builder:
    """Collects injections and placement for one compiled workload."""

    def __init__(self):
        self.injections: list[Injection] = []
        self.used: set[int] = set()
        self.progs: dict[int, list] = {}

    def place(self, row: int, col: int) -> int:
        sid = site_id_at(row, col)
        self.used.add(sid // SITEOS_PER_SITEM)
        return sid

    def queue_prog(self, row: int, col: int, msg: Message) -> None:
        self.progs.setdefault(col, []).append((row, msg))

    def flush_progs(self, start: int = 0) -> int:
        """Push queued Prog messages down each column from its top port, deepest first.

        A message entering at cycle c executes in row r on cycle c + 1 + r, so
        a contiguous column finishes programming in a single cycle.  Returns
        the cycle by which every queued Prog has executed.
        """
        done = start - 1
        for col, items in sorted(self.progs.items()):
            top = site_id_at(0, col) // SITEOS_PER_SITEM
            port = Port("T", top * SITEM_SIDE + col % SITEM_SIDE)
            for k, (row, msg) in enumerate(sorted(items, key=lambda rm: -rm[0])):
                self.injections.append(Injection(start + k, port, msg))
                done = max(done, start + k + 1 + row)
        self.progs = {}
        return done

    def broadcast(self, cycle: int, col: int, rows: range, op: Opcode, value, next_op, next_dest) -> None:
        """Vertical-bus broadcast of one value to ``rows`` of column ``col`` (one lane per SiteM band)."""
        bands: dict[int, int] = {}
        for r in rows:
            bands[r // SITEM_SIDE] = max(bands.get(r // SITEM_SIDE, -1), r)
        for _, last_row in sorted(bands.items()):
            dest = site_id_at(last_row, col)
            sitem = dest // SITEOS_PER_SITEM
            port = Port("V", sitem * SITEM_SIDE + col % SITEM_SIDE, 0)
            self.injections.append(Injection(cycle, port, Message.make(op, dest, value, next_op, next_dest)))

    def required_sitems(self) -> int:
        return max(self.used) + 1


def _resolve_config(cfg: FabricConfig | None, required: int, n_addresses: int) -> FabricConfig:
    if cfg is None:
        cfg = FabricConfig(sitems=required)
    if cfg.sitems < required:
        raise FabricTooSmall(required, cfg.sitems)
    if cfg.siteos + n_addresses > ADDRESS_LIMIT:
        raise CompileError(f"{cfg.sitems} SiteMs leave {ADDRESS_LIMIT - cfg.siteos} memory addresses, "
                           f"{n_addresses} needed")
    return cfg


# --- matrix multiplication ---------------------------------------------------

def compile_matmul(spec: MatMulSpec, cfg: FabricConfig | None = None) -> CompiledWorkload:
    """C = A @ B.

    Each region holds A (N rows x M columns) as stationary A_MULS operands,
    plus a column of M-operand reductions.  Column j of B is broadcast at
    cycle N + j.  ``single_sitem_sequential`` reuses one region for every
    column of B; ``parallel_sitems`` gives each column its own region.
    """
    n, m, p = spec.dims
    width = m + 1
    if width > FABRIC_COLS or n > FABRIC_ROWS:
        raise ShapeError(f"A is {n}x{m}; a region must fit {FABRIC_ROWS} rows x {FABRIC_COLS - 1} columns")
    parallel = spec.mode == "parallel_sitems"
    n_regions = p if parallel else 1

    band = math.ceil(n / SITEM_SIDE) * SITEM_SIDE
    per_band = FABRIC_COLS // width
    origins = []
    for r in range(n_regions):
        b, k = divmod(r, per_band)
        if b * band + n > FABRIC_ROWS:
            raise ShapeError(f"{n_regions} regions of {n}x{width} SiteOs do not fit one block")
        origins.append((b * band, k * width))

    bld = _Builder()
    placement = {}
    for r, (r0, c0) in enumerate(origins):
        for i in range(n):
            for k in range(m):
                placement[("A", r, i, k)] = bld.place(r0 + i, c0 + k)
            placement[("acc", r, i)] = bld.place(r0 + i, c0 + m)
    required = bld.required_sitems()
    n_out = n * p
    cfg = _resolve_config(cfg, required, n_out if parallel else n)
    base = cfg.siteos

    def egress_addr(r: int, i: int) -> int:
        return base + r * n + i

    # Programming: every column of every region.
    for r, (r0, c0) in enumerate(origins):
        for i in range(n):
            acc = placement[("acc", r, i)]
            for k in range(m):
                bld.queue_prog(r0 + i, c0 + k, Message.make(Opcode.Prog, placement[("A", r, i, k)],
                                                            spec.a[i, k], Opcode.A_ADDS, acc))
            bld.queue_prog(r0 + i, c0 + m, Message(Opcode.Prog, acc, reduction_header(m),
                                                   Opcode.UPDATE, egress_addr(r, i)))
    prog_done = bld.flush_progs()

    # Streaming: B column j at prog_done + j; tag = column index.
    t0 = prog_done
    for j in range(p):
        r = j if parallel else 0
        r0, c0 = origins[r]
        for k in range(m):
            bld.broadcast(t0 + j, c0 + k, range(r0, r0 + n), Opcode.A_MULS, spec.b[k, j], Opcode.UPDATE, j)

    egress_map: dict[int, list[int]] = {}
    for j in range(p):
        r = j if parallel else 0
        for i in range(n):
            egress_map.setdefault(egress_addr(r, i), []).append(i * p + j)
    last_exec = t0 + (p - 1) + 2
    schedule = {
        "programming": (0, prog_done),
        "operation": (prog_done + 1, last_exec),
        "offload": (last_exec + 1, last_exec + 1),
    }
    order = {(i, j): list(range(m)) for i in range(n) for j in range(p)}
    return CompiledWorkload("matmul", MessageProgram(bld.injections), cfg, required, placement,
                            schedule, order, egress_map, (n, p), spec)


# --- convolution network -------------------------------------------------------

def cnn_windows(spec: CnnSpec) -> list[tuple[int, int, int]]:
    """(conv_row, conv_col, output_index) in feed order for one image.

    With pooling, each pooling window's conv positions are fed back to back
    (row-major inside the window); overlapping windows recompute shared
    positions so the max reduction never has to reorder its inputs.
    """
    if spec.pool is None:
        ho, wo = spec.conv_shape
        return [(y, x, y * wo + x) for y in range(ho) for x in range(wo)]
    pk, ps = spec.pool
    po, qo = spec.output_shape
    out = []
    for py in range(po):
        for px in range(qo):
            for dy in range(pk):
                for dx in range(pk):
                    out.append((py * ps + dy, px * ps + dx, py * qo + px))
    return out


def compile_cnn(spec: CnnSpec, cfg: FabricConfig | None = None) -> CompiledWorkload:
    """Convolution (+RELU, +max-pool) for every image in ``spec.images``.

    Filter f occupies global row f.  Columns 0..K-1 hold its K = C*k*k weights
    (channel-major, then kernel row, then kernel column), followed by the
    K-operand accumulator (omitted when K == 1), the RELU SiteO and the
    max-pool reduction, each present only if the layer uses it.  One window
    is broadcast per cycle; results for filter f go to memory address base + f.
    """
    nf, c, k = spec.n_filters, spec.channels, spec.kernel
    kk = c * k * k
    if nf > FABRIC_ROWS:
        raise ShapeError(f"{nf} filters exceed {FABRIC_ROWS} fabric rows")
    stages = []
    if kk > 1:
        stages.append("acc")
    if spec.relu:
        stages.append("relu")
    if spec.pool is not None:
        stages.append("pool")
    width = kk + len(stages)
    if width > FABRIC_COLS:
        raise ShapeError(f"{kk} weights + {len(stages)} stages exceed {FABRIC_COLS} columns")

    bld = _Builder()
    placement = {}
    for f in range(nf):
        for j in range(kk):
            placement[("w", f, j)] = bld.place(f, j)
        for s, name in enumerate(stages):
            placement[(name, f)] = bld.place(f, kk + s)
    required = bld.required_sitems()
    cfg = _resolve_config(cfg, required, nf)
    base = cfg.siteos

    def chain(f: int, after: int) -> tuple[Opcode, int]:
        """Continuation of the stage sitting in column ``after`` for filter f."""
        nxt = after + 1
        if nxt >= width:
            return Opcode.UPDATE, base + f
        name = stages[nxt - kk]
        op = {"acc": Opcode.A_ADDS, "relu": Opcode.RELU, "pool": Opcode.CMP}[name]
        return op, placement[(name, f)]

    flat_w = spec.filters.reshape(nf, kk)
    for f in range(nf):
        op, dest = chain(f, kk - 1)
        for j in range(kk):
            bld.queue_prog(f, j, Message.make(Opcode.Prog, placement[("w", f, j)], flat_w[f, j], op, dest))
        for s, name in enumerate(stages):
            op, dest = chain(f, kk + s)
            sid = placement[(name, f)]
            if name == "acc":
                msg = Message(Opcode.Prog, sid, reduction_header(kk), op, dest)
            elif name == "pool":
                msg = Message(Opcode.Prog, sid, reduction_header(spec.pool[0] ** 2), op, dest)
            else:
                msg = Message.make(Opcode.Prog, sid, 0.0, op, dest)
            bld.queue_prog(f, kk + s, msg)
    prog_done = bld.flush_progs()

    p = spec.padding
    imgs = np.pad(spec.images, ((0, 0), (0, 0), (p, p), (p, p))) if p else spec.images
    windows = cnn_windows(spec)
    po, qo = spec.output_shape
    n_out = po * qo
    t0 = prog_done
    st = spec.stride
    for b in range(spec.batch):
        for w, (oy, ox, tag) in enumerate(windows):
            t = t0 + b * len(windows) + w
            patch = imgs[b, :, oy * st:oy * st + k, ox * st:ox * st + k].reshape(kk)
            for j in range(kk):
                bld.broadcast(t, j, range(nf), Opcode.A_MULS, patch[j], Opcode.UPDATE,
                              (b * n_out + tag) % ADDRESS_LIMIT)

    # Pipeline depth from a window's broadcast to its value leaving the last stage.
    depth = 1 + len(stages)
    last_feed = t0 + spec.batch * len(windows) - 1
    last_exec = last_feed + depth
    schedule = {
        "programming": (0, prog_done),
        "operation": (prog_done + 1, last_exec),
        "offload": (last_exec + 1, last_exec + 1),
    }
    egress_map = {base + f: [((b * nf + f) * n_out) + o for b in range(spec.batch) for o in range(n_out)]
                  for f in range(nf)}
    order = {"conv": list(range(kk)), "pool": [i for i in range(spec.pool[0] ** 2)] if spec.pool else []}
    return CompiledWorkload("cnn", MessageProgram(bld.injections), cfg, required, placement,
                            schedule, order, egress_map, (spec.batch, nf, po, qo), spec)


def dense_head(features: np.ndarray, spec: CnnSpec) -> np.ndarray:
    """Host-side dense layers on flattened (filter, row, col) features; one row per image."""
    x = features.reshape(features.shape[0], -1).astype(np.float32)
    for layer in spec.dense:
        w = layer.weights
        y = np.zeros((x.shape[0], w.shape[0]), dtype=np.float32)
        for i in range(w.shape[1]):
            y = (y + x[:, i:i + 1] * w[:, i][None, :]).astype(np.float32)
        if layer.bias is not None:
            y = (y + layer.bias[None, :]).astype(np.float32)
        if layer.activation == "relu":
            y = np.where(y > 0, y, np.float32(0.0)).astype(np.float32)
        elif layer.activation == "softmax":
            z = y.astype(np.float64)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            y = (z / z.sum(axis=1, keepdims=True)).astype(np.float32)
        x = y
    return x


def compile_workload(spec, cfg: FabricConfig | None = None) -> CompiledWorkload:
    if isinstance(spec, MatMulSpec):
        return compile_matmul(spec, cfg)
    if isinstance(spec, CnnSpec):
        return compile_cnn(spec, cfg)
    raise TypeError(f"cannot compile {type(spec).__name__}")
