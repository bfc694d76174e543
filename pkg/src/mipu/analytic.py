"""Closed-form latency and resource models, sweeps, and a conv throughput estimate.

Latency (cycles) for C = A(NxM) @ B(MxP):

    tpu     N + 2M + P - 2
    meissa  N + M + P + ceil(log2 M) - 2
    mipu    N + P + 2

The throughput model is our own (the published procedure is not available);
its two knobs are explicit fields of :class:`ThroughputModel` and are never
fitted to published numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources as _res

ARCHS = ("mipu", "meissa", "tpu")
SWEEP_COLUMNS = ("varied", "value", "n", "m", "p", "mipu", "meissa", "tpu")
THROUGHPUT_COLUMNS = ("name", "images", "h", "w", "k", "filters", "channels", "siteos", "clock_hz",
                      "lane_efficiency", "fill_cycles", "cycles", "seconds", "images_per_second",
                      "published_value", "published_unit", "ratio", "citation")


def _check_dims(n: int, m: int, p: int) -> None:
    for name, v in (("N", n), ("M", m), ("P", p)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def latency(arch: str, n: int, m: int, p: int) -> int:
    _check_dims(n, m, p)
    if arch == "tpu":
        return n + 2 * m + p - 2
    if arch == "meissa":
        return n + m + p + math.ceil(math.log2(m)) - 2
    if arch == "mipu":
        return n + p + 2
    raise ValueError(f"unknown architecture {arch!r}")


def resources(arch: str, n: int, m: int, p: int) -> dict[str, int]:
    _check_dims(n, m, p)
    if arch == "tpu":
        return {"multipliers": n * p, "adders": m * p}
    if arch == "meissa":
        return {"multipliers": m * p, "adders": p * (m - 1)}
    if arch == "mipu":
        return {"siteos": (n * m + n) * p}
    raise ValueError(f"unknown architecture {arch!r}")


def sweep_points(lo: int, hi: int) -> list[int]:
    """Powers of two inside [lo, hi] plus both endpoints, ascending."""
    if lo < 1 or lo > hi:
        raise ValueError(f"bad sweep range [{lo}, {hi}]")
    pts = {lo, hi}
    v = 1
    while v <= hi:
        if v >= lo:
            pts.add(v)
        v *= 2
    return sorted(pts)


@dataclass
class SweepResult:
    varied: str
    lo: int
    hi: int
    fixed: dict
    rows: list = field(default_factory=list)   # dicts keyed by SWEEP_COLUMNS

    def column(self, name: str) -> list[int]:
        return [r[name] for r in self.rows]

    def ordering_holds(self) -> list[bool]:
        return [r["mipu"] < r["meissa"] < r["tpu"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"varied": self.varied, "lo": self.lo, "hi": self.hi,
                           "fixed": self.fixed, "rows": self.rows}, indent=2)


def sweep(varied: str, lo: int, hi: int, fixed: dict | None = None) -> SweepResult:
    dims = {"n": 128, "m": 128, "p": 128}
    fixed = dict(fixed or {})
    if varied not in dims:
        raise ValueError(f"can only vary n, m or p, not {varied!r}")
    unknown = set(fixed) - set(dims)
    if unknown:
        raise ValueError(f"unknown fixed dims {sorted(unknown)}")
    dims.update(fixed)
    res = SweepResult(varied, lo, hi, {k: v for k, v in dims.items() if k != varied})
    for v in sweep_points(lo, hi):
        d = dict(dims, **{varied: v})
        row = {"varied": varied, "value": v, **d}
        for arch in ARCHS:
            row[arch] = latency(arch, d["n"], d["m"], d["p"])
        res.rows.append(row)
    return res


# --- convolution throughput -------------------------------------------------

@dataclass(frozen=True)
class ConvWorkload:
    images: int
    h: int
    w: int
    k: int
    filters: int = 1
    channels: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.images < 0 or min(self.h, self.w, self.k, self.filters, self.channels, self.stride) < 1:
            raise ValueError("conv dims must be positive (images may be 0)")
        if self.k > self.h + 2 * self.padding or self.k > self.w + 2 * self.padding:
            raise ValueError("filter larger than padded image")

    @property
    def outputs_per_image(self) -> int:
        ho = (self.h + 2 * self.padding - self.k) // self.stride + 1
        wo = (self.w + 2 * self.padding - self.k) // self.stride + 1
        return self.filters * ho * wo

    @property
    def taps(self) -> int:
        return self.channels * self.k * self.k


@dataclass(frozen=True)
class ThroughputModel:
    """cycles = ceil(MACs / (siteos * lane_efficiency)) + fill_cycles.

    ``lane_efficiency`` defaults to K / (K + 1): each output needs K multiplier
    SiteOs plus one accumulator, so only that share of the fabric multiplies.
    ``fill_cycles`` covers programming one SiteM column (4 cycles) and the
    multiply / accumulate / activate / write-back pipeline (4 cycles).
    """

    lane_efficiency: float | None = None
    fill_cycles: int = 8


@dataclass
class ThroughputEstimate:
    name: str
    workload: ConvWorkload
    siteos: int
    clock_hz: float
    lane_efficiency: float
    fill_cycles: int
    cycles: int
    published_value: float | None = None
    published_unit: str = ""
    citation: str = ""

    @property
    def seconds(self) -> float:
        return self.cycles / self.clock_hz

    @property
    def images_per_second(self) -> float:
        return self.workload.images / self.seconds if self.cycles else 0.0

    @property
    def ratio(self) -> float | None:
        """model / published, in the published unit."""
        if self.published_value is None:
            return None
        model = self.images_per_second if self.published_unit == "images/s" else self.seconds * 1e3
        return model / self.published_value

    def row(self) -> dict:
        wl = self.workload
        return {"name": self.name, "images": wl.images, "h": wl.h, "w": wl.w, "k": wl.k,
                "filters": wl.filters, "channels": wl.channels, "siteos": self.siteos,
                "clock_hz": self.clock_hz, "lane_efficiency": round(self.lane_efficiency, 6),
                "fill_cycles": self.fill_cycles, "cycles": self.cycles, "seconds": self.seconds,
                "images_per_second": self.images_per_second, "published_value": self.published_value,
                "published_unit": self.published_unit,
                "ratio": None if self.ratio is None else round(self.ratio, 6),
                "citation": self.citation}


def conv_throughput(workload: ConvWorkload, siteos: int, clock_hz: float,
                    model: ThroughputModel = ThroughputModel(), name: str = "") -> ThroughputEstimate:
    if siteos < 2 or clock_hz <= 0:
        raise ValueError("need at least 2 SiteOs and a positive clock")
    kk = workload.taps
    eff = model.lane_efficiency if model.lane_efficiency is not None else kk / (kk + 1)
    if not 0 < eff <= 1:
        raise ValueError("lane efficiency must be in (0, 1]")
    macs = workload.images * workload.outputs_per_image * kk
    cycles = 0 if macs == 0 else math.ceil(macs / (siteos * eff)) + model.fill_cycles
    return ThroughputEstimate(name, workload, siteos, clock_hz, eff, model.fill_cycles, cycles)


def reference_values() -> dict:
    """Published constants with their citations (packaged JSON)."""
    text = _res.files("mipu.data").joinpath("reference_values.json").read_text()
    return json.loads(text)


def published_throughput_rows(model: ThroughputModel = ThroughputModel()) -> list[ThroughputEstimate]:
    """Model estimates for every published throughput benchmark, paired with the published value."""
    out = []
    for key, ref in reference_values()["throughput"].items():
        wl = ConvWorkload(**ref["workload"])
        est = conv_throughput(wl, ref["siteos"], ref["clock_hz"], model, name=key)
        est.published_value = ref["value"]
        est.published_unit = ref["unit"]
        est.citation = ref["citation"]
        out.append(est)
    return out


def throughput_csv(rows: list[ThroughputEstimate]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=THROUGHPUT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


def throughput_json(rows: list[ThroughputEstimate], extra: dict | None = None) -> str:
    doc = {"rows": [r.row() for r in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2)


def model_params(model: ThroughputModel) -> dict:
    return asdict(model)
