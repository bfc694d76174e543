"""Cycle-level simulator, workload compiler and analytic models for the m-IPU message-passing fabric."""

__version__ = "0.1.0"

from .isa import Message, MessageProgram, Opcode, Port, assemble, decode_message, disassemble, encode_message
from .fabric import Fabric, FabricConfig, RunReport, run_program
from .workloads import CnnSpec, MatMulSpec, load_workload
from .compiler import compile_cnn, compile_matmul, compile_workload

__all__ = [
    "Message", "MessageProgram", "Opcode", "Port", "assemble", "decode_message", "disassemble",
    "encode_message", "Fabric", "FabricConfig", "RunReport", "run_program", "CnnSpec", "MatMulSpec",
    "load_workload", "compile_cnn", "compile_matmul", "compile_workload",
]
