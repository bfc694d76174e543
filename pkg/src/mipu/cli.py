"""Command-line entry point: ``mipu <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad program, failed oracle check,
deadlock, ...), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analytic import (
    ThroughputModel,
    latency,
    published_throughput_rows,
    reference_values,
    resources,
    sweep,
    throughput_csv,
    throughput_json,
)
from .compiler import SCHEDULE_OFFSET, CompileError, compile_workload
from .experiments import cnn_pipeline_cost, matmul_offsets, run_workload
from .fabric import (
    Fabric,
    FabricConfig,
    FabricError,
    run_program,
    write_trace_csv,
    write_trace_jsonl,
)
from .isa import IsaError, MessageProgram, PROGRAM_MAGIC, assemble, disassemble, isa_table_hash
from .workloads import ShapeError, WorkloadError, load_workload, small_cnn_spec

log = logging.getLogger("mipu")

DOMAIN_ERRORS = (IsaError, FabricError, CompileError, WorkloadError, ShapeError, OSError, ValueError)


class UsageError(Exception):
    pass


def _read_program(path: str) -> MessageProgram:
    data = Path(path).read_bytes()
    if data.startswith(PROGRAM_MAGIC):
        return MessageProgram.from_bytes(data)
    return assemble(data.decode())


def _config(args, overrides: dict | None = None) -> FabricConfig | None:
    if args.config:
        return FabricConfig.load(args.config)
    if overrides:
        return FabricConfig.from_mapping(overrides)
    return None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _write_trace(trace, path: str | None, fmt: str) -> None:
    if not path:
        return
    if fmt == "csv":
        write_trace_csv(trace, path)
    else:
        write_trace_jsonl(trace, path)


def _report_text(rep, extra: list[str] = ()) -> str:
    lines = [
        f"total cycles      {rep.total_cycles}",
        f"wall time         {rep.wall_time_s:.3e} s at {rep.clock_hz:.3g} Hz",
        f"phases            programming={rep.phases['programming']} operation={rep.phases['operation']} "
        f"offload={rep.phases['offload']}",
        f"last Prog         CC{rep.last_prog_cycle}" if rep.last_prog_cycle is not None else "last Prog         none",
        f"stalls            {rep.stalls}",
        f"messages          injected={rep.injected} emitted={rep.emitted} fanout={rep.fanout} "
        f"executed={rep.executed} egressed={rep.egressed} misrouted={rep.misrouted}",
        f"max FIFO depth    {rep.max_fifo_occupancy}",
        f"egress words      {len(rep.egress)}",
    ]
    return "\n".join(lines + list(extra)) + "\n"


# --- subcommands -----------------------------------------------------------

def cmd_asm(args) -> int:
    prog = assemble(Path(args.input).read_text())
    if not prog.injections:
        print("no injections", file=sys.stderr)
        return 1
    out = args.out or str(Path(args.input).with_suffix(".bin"))
    prog.save(out)
    print(f"{len(prog)} injections -> {out}")
    return 0


def cmd_disasm(args) -> int:
    prog = MessageProgram.load(args.input)
    _emit(disassemble(prog), args.out)
    return 0


def cmd_sim(args) -> int:
    prog = _read_program(args.input)
    if not prog.injections:
        print("no injections", file=sys.stderr)
        return 1
    fab = Fabric(_config(args) or FabricConfig())
    rep, trace = run_program(fab, prog, cycle_budget=args.cycle_budget)
    _write_trace(trace, args.trace, args.format)
    if args.format == "json":
        _emit(json.dumps(rep.to_dict(), indent=2), args.out)
    else:
        _emit(_report_text(rep), args.out)
    return 0


def _load(args):
    spec, fabric_table = load_workload(args.workload, seed=args.seed)
    return spec, _config(args, fabric_table)


def cmd_compile(args) -> int:
    spec, cfg = _load(args)
    cw = compile_workload(spec, cfg)
    if args.out:
        if args.out.endswith(".bin"):
            cw.program.save(args.out)
        else:
            Path(args.out).write_text(disassemble(cw.program))
    summary = {
        "kind": cw.kind,
        "injections": len(cw.program),
        "required_sitems": cw.required_sitems,
        "static_schedule": {k: list(v) for k, v in cw.static_schedule.items()},
        "predicted_total_cycles": cw.predicted_total_cycles,
    }
    if args.format == "json":
        print(json.dumps(summary, indent=2))
    else:
        for k, v in summary.items():
            print(f"{k:24s}{v}")
    return 0


def cmd_run(args) -> int:
    spec, cfg = _load(args)
    out = run_workload(spec, cfg, cycle_budget=args.cycle_budget)
    _write_trace(out.trace, args.trace, args.format)
    verdict = "PASS" if out.oracle_pass else "FAIL"
    cw = out.compiled
    if args.format == "json":
        doc = out.report.to_dict()
        doc.update({"oracle": verdict, "workload": str(args.workload), "required_sitems": cw.required_sitems,
                    "static_schedule": {k: list(v) for k, v in cw.static_schedule.items()}})
        _emit(json.dumps(doc, indent=2), args.out)
    else:
        extra = [
            f"workload          {cw.kind} on {cw.config.sitems} SiteMs (needs {cw.required_sitems})",
            f"Phase-1 end       CC{cw.static_schedule['programming'][1]}",
            f"predicted cycles  {cw.predicted_total_cycles}",
            f"oracle            {verdict}",
        ]
        if cw.kind == "cnn" and spec.dense:
            from .compiler import dense_head
            scores = dense_head(out.output, spec)
            extra.append(f"class scores      {scores.tolist()}")
        _emit(_report_text(out.report, extra), args.out)
    return 0 if out.oracle_pass else 1


def _parse_fixed(text: str | None) -> dict:
    fixed = {}
    if not text:
        return fixed
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--fixed expects dim=value pairs, got {part!r}")
        k, v = part.split("=", 1)
        try:
            fixed[k.strip()] = int(v)
        except ValueError:
            raise UsageError(f"--fixed value for {k} is not an integer") from None
    return fixed


def cmd_sweep(args) -> int:
    res = sweep(args.vary, args.lo, args.hi, _parse_fixed(args.fixed))
    _emit(res.to_json() if args.format == "json" else res.to_csv(), args.out)
    return 0


def _throughput_doc(args):
    model = ThroughputModel(args.lane_efficiency, args.fill_cycles)
    rows = published_throughput_rows(model)
    cost = cnn_pipeline_cost(args.batch, seed=args.seed or 0)
    sim = {"batch": cost.batch, "total_cycles": cost.total_cycles,
           "marginal_cycles_per_image": cost.marginal_cycles_per_image,
           "images_per_second_at_1ghz": cost.images_per_second(1e9),
           "oracle": "PASS" if cost.oracle_pass else "FAIL"}
    return model, rows, sim


def cmd_throughput(args) -> int:
    model, rows, sim = _throughput_doc(args)
    if args.format == "json":
        _emit(throughput_json(rows, {"model": {"lane_efficiency": model.lane_efficiency,
                                               "fill_cycles": model.fill_cycles},
                                     "simulated": sim}), args.out)
        return 0
    if args.format == "csv":
        _emit(throughput_csv(rows), args.out)
        return 0
    eff = "K/(K+1)" if model.lane_efficiency is None else str(model.lane_efficiency)
    lines = [f"model: cycles = ceil(MACs / (siteos * lane_efficiency)) + fill_cycles; "
             f"lane_efficiency={eff}, fill_cycles={model.fill_cycles}",
             f"{'benchmark':16s}{'model':>18s}{'published':>18s}{'ratio':>10s}  citation"]
    for r in rows:
        if r.published_unit == "images/s":
            model_s, published_s = f"{r.images_per_second:.4g} img/s", f"{r.published_value:.5g} img/s"
        else:
            model_s, published_s = f"{r.seconds * 1e3:.4g} ms", f"{r.published_value:g} ms"
        lines.append(f"{r.name:16s}{model_s:>18s}{published_s:>18s}{r.ratio:>10.3f}  {r.citation}")
    lines.append(f"simulated small CNN, batch {sim['batch']}: {sim['marginal_cycles_per_image']:.2f} "
                 f"cycles/image steady state ({sim['images_per_second_at_1ghz']:.4g} images/s at 1 GHz; "
                 f"published figure implies {1e9 / 142.45e6:.2f} cycles/image); oracle {sim['oracle']}")
    _emit("\n".join(lines), args.out)
    return 0


def cmd_report(args) -> int:
    refs = reference_values()
    lines = ["== closed-form latency at N=M=P=128 (cycles) =="]
    for arch in ("tpu", "meissa", "mipu"):
        lines.append(f"  {arch:7s}{latency(arch, 128, 128, 128):6d}   {refs['latency_formulas'][arch]['formula']}"
                     f"   [{refs['latency_formulas'][arch]['citation']}]")
    lines.append("== resources at N=4, M=3, P=3 ==")
    for arch in ("tpu", "meissa", "mipu"):
        lines.append(f"  {arch:7s}{resources(arch, 4, 3, 3)}   [{refs['resource_formulas'][arch]['citation']}]")

    rows = matmul_offsets(seed=args.seed or 0)
    offsets = sorted({r["offset"] for r in rows})
    ok = all(r["oracle_pass"] for r in rows)
    lines.append("== simulated matmul span vs N + P + 2 ==")
    lines.append(f"  {len(rows)} points, offsets {offsets}, constant c = {offsets[0] if len(offsets) == 1 else 'n/a'}"
                 f" (compiler constant {SCHEDULE_OFFSET}); oracle {'PASS' if ok else 'FAIL'}")

    sched = refs["small_cnn_schedule"]
    out = run_workload(small_cnn_spec(seed=args.seed or 0))
    ex = {}
    for ev in out.trace:
        if ev.kind == "execute":
            ex.setdefault(ev.detail, []).append(ev.cycle)
    measured = {
        "programming_done_cc": out.report.last_prog_cycle,
        "multiply_cc": min(ex.get("A_MULS", [-1])),
        "accumulate_emit_cc": min(ev.cycle for ev in out.trace if ev.kind == "emit"
                                  and out.compiled.placement.get(("acc", 0)) == ev.unit),
        "relu_cc": min(ex.get("RELU", [-1])),
        "cmp_cc": min(ex.get("CMP", [-1])),
    }
    lines.append("== small CNN schedule (simulated vs published) ==")
    for k, v in measured.items():
        lines.append(f"  {k:22s}{v:4d}  published {sched[k]:4d}  {'match' if v == sched[k] else 'DIFFERS'}")
    lines.append(f"  [{sched['citation']}]")

    args.batch = args.batch or 64
    model, trows, sim = _throughput_doc(args)
    lines.append("== throughput (model vs published vs simulated) ==")
    for r in trows:
        lines.append(f"  {r.name:16s} model {r.seconds * 1e3:.4g} ms / {r.images_per_second:.4g} img/s, "
                     f"published {r.published_value:g} {r.published_unit}, ratio {r.ratio:.3f}  [{r.citation}]")
    lines.append(f"  simulated small CNN: {sim['marginal_cycles_per_image']:.2f} cycles/image "
                 f"({sim['images_per_second_at_1ghz']:.4g} images/s at 1 GHz)")
    _emit("\n".join(lines), args.out)
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="fabric config (TOML)")
    common.add_argument("--out", metavar="PATH", help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json", "jsonl"), default=None)
    common.add_argument("--trace", metavar="PATH", help="write the event trace here")
    common.add_argument("--seed", type=int, default=None, help="seed for generated tensors")
    common.add_argument("--cycle-budget", type=int, default=1_000_000)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mipu", description="m-IPU fabric simulator and tools")
    p.add_argument("--version", action="version",
                   version=f"mipu {__version__} isa {isa_table_hash()}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("asm", parents=[common], help="assemble a text listing into a binary program")
    s.add_argument("input")
    s.set_defaults(func=cmd_asm)
    s = sub.add_parser("disasm", parents=[common], help="print a binary program as text")
    s.add_argument("input")
    s.set_defaults(func=cmd_disasm)
    s = sub.add_parser("sim", parents=[common], help="simulate a program (text or binary)")
    s.add_argument("input")
    s.set_defaults(func=cmd_sim)
    for name, fn, text in (("compile", cmd_compile, "lower a workload file to a program"),
                           ("run", cmd_run, "compile, simulate and check against the oracle")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--workload", required=True, metavar="PATH")
        s.set_defaults(func=fn)
    s = sub.add_parser("sweep", parents=[common], help="closed-form latency sweep")
    s.add_argument("--vary", choices=("n", "m", "p"), required=True)
    s.add_argument("--lo", type=int, default=2)
    s.add_argument("--hi", type=int, default=2048)
    s.add_argument("--fixed", default="m=128,p=128", help="e.g. m=128,p=128")
    s.set_defaults(func=cmd_sweep)
    for name, fn, text in (("throughput", cmd_throughput, "throughput model vs published numbers"),
                           ("report", cmd_report, "full comparison report")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--lane-efficiency", type=float, default=None)
        s.add_argument("--fill-cycles", type=int, default=ThroughputModel().fill_cycles)
        s.add_argument("--batch", type=int, default=64, help="images in the simulated pipeline")
        s.set_defaults(func=fn)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and args.format == "jsonl":
        print("sweep supports --format csv or json", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
