"""Compile + simulate + check in one call, plus the measured numbers the reports use."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import CompiledWorkload, compile_workload, matmul_span
from .fabric import Fabric, FabricConfig, RunReport, run_program
from .oracle import cnn_features_ref, matmul_ref
from .workloads import CnnSpec, MatMulSpec, small_cnn_spec


@dataclass
class RunOutcome:
    compiled: CompiledWorkload
    report: RunReport
    trace: list
    output: np.ndarray
    reference: np.ndarray

    @property
    def oracle_pass(self) -> bool:
        return self.output.shape == self.reference.shape and np.array_equal(
            self.output.view(np.uint32), self.reference.view(np.uint32))


def reference_for(spec) -> np.ndarray:
    if isinstance(spec, MatMulSpec):
        return matmul_ref(spec.a, spec.b)
    if isinstance(spec, CnnSpec):
        return cnn_features_ref(spec)
    raise TypeError(type(spec).__name__)


def run_workload(spec, cfg: FabricConfig | None = None, cycle_budget: int = 1_000_000,
                 trace_sink=None) -> RunOutcome:
    cw = compile_workload(spec, cfg)
    rep, trace = run_program(Fabric(cw.config), cw.program, cycle_budget=cycle_budget, trace_sink=trace_sink)
    return RunOutcome(cw, rep, trace, cw.decode(rep), reference_for(spec))


@dataclass
class PipelineCost:
    batch: int
    total_cycles: int
    marginal_cycles_per_image: float
    oracle_pass: bool

    def images_per_second(self, clock_hz: float) -> float:
        return clock_hz / self.marginal_cycles_per_image


def cnn_pipeline_cost(batch: int = 64, seed: int = 0) -> PipelineCost:
    """Feed ``batch`` images back to back through the small CNN; cost = spacing of last results."""
    out = run_workload(small_cnn_spec(seed=seed, batch=batch))
    per_image = len(out.compiled.egress_map[min(out.compiled.egress_map)]) // batch
    last_of_image = []
    cycles = [c for c, _, _ in out.report.egress]
    # every address receives per_image results per image, in image order
    by_addr: dict[int, list[int]] = {}
    for c, a, _ in out.report.egress:
        by_addr.setdefault(a, []).append(c)
    for b in range(batch):
        last_of_image.append(max(v[(b + 1) * per_image - 1] for v in by_addr.values()))
    marginal = (last_of_image[-1] - last_of_image[0]) / (batch - 1) if batch > 1 else float(max(cycles))
    return PipelineCost(batch, out.report.total_cycles, marginal, out.oracle_pass)


def matmul_offsets(ns=(1, 2, 4, 8, 16), ms=(1, 4, 16), ps=(1, 2, 4, 8, 16), seed: int = 0,
                   mode: str = "single_sitem_sequential") -> list[dict]:
    """Measured total cycles minus N + P + 2 for every point of the grid."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        for m in ms:
            for p in ps:
                spec = MatMulSpec(rng.standard_normal((n, m)), rng.standard_normal((m, p)), mode)
                out = run_workload(spec)
                rows.append({"n": n, "m": m, "p": p, "measured": out.report.total_cycles,
                             "span": matmul_span(n, p),
                             "offset": out.report.total_cycles - matmul_span(n, p),
                             "oracle_pass": out.oracle_pass})
    return rows
