"""Teleportation of one qubit from Alice to Bob, optionally over a distilled pair."""

from __future__ import annotations

from functools import partial

from ..cfa import AdaptationStrategy, DecisionFn
from ..noise import NoiseConfig, werner_state
from ..quantum import PureState, ValidationError
from ._runtime import BackendKind, ProtocolInstance, ProtocolResult, ProtocolSpec, Runtime, run_instance
from .distillation import ALICE, BOB, distill_tree
from .swapping import bell_measurement_channel, correction_table

SOURCE = "A.s"


def _script(psi: PureState, distill_depth: int, rt: Runtime) -> ProtocolSpec:
    f = rt.noise.gate_fidelity_f
    bell = bell_measurement_channel(f)
    fixes = correction_table(f)
    flags: tuple[str, ...] = ()
    # the input is ready (and starts dephasing) at t = 0
    rt.store(0, ALICE, SOURCE, psi.density())

    def teleport(pair: tuple[str, str], key: int) -> None:
        a, b = pair
        rt.op(key, ALICE, bell, (SOURCE, a))
        rt.measure(key, ALICE, SOURCE)
        rt.measure(key, ALICE, a)
        fn = DecisionFn.parity({"TX": [a], "TZ": [SOURCE]})

        def arrived() -> None:
            rt.decide(key, BOB, fn)
            rt.op(key + 1, BOB, None, (b,), controls=("TX", "TZ"), table=fixes)

        rt.send(ALICE, BOB, arrived)

    if distill_depth == 0:
        rt.generate(1, ALICE, BOB, ("A.a", "B.b"), werner_state(rt.noise.generation_fidelity_F, ("a", "b")),
                    lambda: teleport(("A.a", "B.b"), 1))
        out = "B.b"
    else:
        # distillation rounds take keys 1..2^d - 1
        root = distill_tree(rt, distill_depth, None, lambda node: teleport(node.kept, node.key + 1))
        flags = (root.flag,)
        out = root.kept[1]
    target = PureState((out,), psi.amplitudes)
    return ProtocolSpec((ALICE, BOB), (out,), target, flags, 0)


def teleportation_instance(psi: PureState, noise: NoiseConfig, latency: float = 1e-3,
                           distill_depth: int = 0) -> ProtocolInstance:
    if len(psi.qubits) != 1:
        raise ValidationError("teleportation sends a single-qubit state")
    if distill_depth < 0:
        raise ValueError("distill_depth must be non-negative")
    return ProtocolInstance("teleport", 1, noise, latency, partial(_script, psi, distill_depth))


def teleportation(psi: PureState, noise: NoiseConfig, backend=BackendKind.CFA, seed: int = 0,
                  latency: float = 1e-3, distill_depth: int = 0, trials: int = 10_000,
                  strategy=AdaptationStrategy.CHAIN, workers: int = 1) -> ProtocolResult:
    inst = teleportation_instance(psi, noise, latency, distill_depth)
    return run_instance(inst, backend, strategy, trials, seed, workers)
