"""Bundled protocol instances runnable on every backend."""

from ._runtime import (
    BackendKind,
    LiveSink,
    ProtocolInstance,
    ProtocolResult,
    ProtocolSpec,
    RecorderSink,
    Runtime,
    noisy,
    run_exact,
    run_instance,
    run_monte_carlo,
    run_oracle,
)
from .distillation import (
    nested_distillation,
    nested_distillation_instance,
    single_distillation,
    single_distillation_instance,
)
from .teleportation import teleportation, teleportation_instance
from .swapping import chained_swapping, swap_chain_circuit, swap_chain_instance, swap_chain_protocol

__all__ = [
    "BackendKind",
    "LiveSink",
    "ProtocolInstance",
    "ProtocolResult",
    "ProtocolSpec",
    "RecorderSink",
    "Runtime",
    "chained_swapping",
    "nested_distillation",
    "nested_distillation_instance",
    "single_distillation",
    "single_distillation_instance",
    "teleportation",
    "teleportation_instance",
    "noisy",
    "run_exact",
    "run_instance",
    "run_monte_carlo",
    "run_oracle",
    "swap_chain_circuit",
    "swap_chain_instance",
    "swap_chain_protocol",
]
