"""Chained entanglement swapping over n parties A1..An.

Every link generates a Werner pair. Each router Bell-measures its two
qubits as soon as both links are up and reports both bits to A_n. A_n then
applies X^x Z^z, where x and z are the parities of the routers' right-hand
and left-hand outcomes.
"""

from __future__ import annotations

from functools import lru_cache, partial

from ..cfa import AdaptationStrategy, DecisionFn, LoccProtocol, round_circuits
from ..noise import NoiseConfig, werner_state
from ..quantum import CNOT, H, X, Z, PureState, compose
from ._runtime import BackendKind, ProtocolInstance, ProtocolResult, ProtocolSpec, Runtime, noisy, run_instance

BELL_KEY, CORRECTION_KEY = 1, 2


def _left(i: int) -> str:
    return f"A{i}.L"


def _right(i: int) -> str:
    return f"A{i}.R"


@lru_cache(maxsize=64)
def bell_measurement_channel(f: float):
    """CNOT(first->second) then H(first), each followed by operation dephasing."""
    return compose([(noisy(CNOT, ("a", "b"), f), ("a", "b")), (noisy(H, ("a",), f), ("a",))], ("a", "b"))


@lru_cache(maxsize=64)
def correction_table(f: float) -> tuple:
    """Entries for register value 2x + z; the zero branch applies nothing."""
    xg = noisy(X, ("q",), f)
    zg = noisy(Z, ("q",), f)
    both = compose([(xg, ("q",)), (zg, ("q",))], ("q",))
    return (None, zg, xg, both)


def swap_decision(n: int) -> DecisionFn:
    routers = range(2, n)
    return DecisionFn.parity({"R1": [_right(i) for i in routers], "R2": [_left(i) for i in routers]})


def _script(n: int, rt: Runtime) -> ProtocolSpec:
    noise = rt.noise
    f = noise.gate_fidelity_f
    parties = tuple(f"A{i}" for i in range(1, n + 1))
    end = parties[-1]
    template = werner_state(noise.generation_fidelity_F, ("a", "b"))
    bell = bell_measurement_channel(f)
    fixes = correction_table(f)
    fn = swap_decision(n)
    links_up = {i: 0 for i in range(1, n + 1)}
    waiting = {"reports": n - 2, "last_link": False}

    def finish() -> None:
        if waiting["reports"] or not waiting["last_link"]:
            return
        rt.decide(BELL_KEY, end, fn)
        rt.op(CORRECTION_KEY, end, None, (_left(n),), controls=("R1", "R2"), table=fixes)
        rt.touch(CORRECTION_KEY, parties[0], _right(1))

    def reported() -> None:
        waiting["reports"] -= 1
        finish()

    def measure(i: int) -> None:
        name = parties[i - 1]
        rt.op(BELL_KEY, name, bell, (_left(i), _right(i)))
        rt.measure(BELL_KEY, name, _left(i))
        rt.measure(BELL_KEY, name, _right(i))
        rt.send(name, end, reported)

    def link_up(i: int) -> None:
        for node in (i, i + 1):
            links_up[node] += 1
            if 1 < node < n and links_up[node] == 2:
                measure(node)
        if i + 1 == n:
            waiting["last_link"] = True
            finish()

    for i in range(1, n):
        rt.generate(BELL_KEY, parties[i - 1], parties[i], (_right(i), _left(i + 1)), template,
                    partial(link_up, i))
    return ProtocolSpec(parties, (_right(1), _left(n)), PureState.phi_plus(_right(1), _left(n)))


def swap_chain_instance(n: int, noise: NoiseConfig, latency: float = 1e-3) -> ProtocolInstance:
    if n < 3:
        raise ValueError("chained swapping needs at least 3 parties")
    return ProtocolInstance("swap_chain", n, noise, latency, partial(_script, n))


def swap_chain_protocol(n: int, noise: NoiseConfig | None = None, latency: float = 1e-3) -> LoccProtocol:
    return swap_chain_instance(n, noise or NoiseConfig(), latency).record()[0]


def chained_swapping(n: int, noise: NoiseConfig, backend=BackendKind.CFA, strategy=AdaptationStrategy.CHAIN,
                     seed: int = 0, latency: float = 1e-3, trials: int = 10_000, workers: int = 1) -> ProtocolResult:
    return run_instance(swap_chain_instance(n, noise, latency), backend, strategy, trials, seed, workers)


def swap_chain_circuit(n: int, strategy) -> str:
    protocol = swap_chain_protocol(n)
    return "".join(c.dump() for c in round_circuits(protocol, strategy) if c is not None)


__all__ = [
    "bell_measurement_channel",
    "chained_swapping",
    "correction_table",
    "swap_chain_circuit",
    "swap_chain_instance",
    "swap_chain_protocol",
    "swap_decision",
]
