"""Shared machinery: protocol sinks, the event-driven runtime and backends.

Protocols are written once against a small sink interface
(``prepare``/``apply``/``measure``/``decide``). :class:`RecorderSink`
collects the calls into a declarative :class:`~qnetcfa.cfa.LoccProtocol`
for the exact backends. :class:`LiveSink` executes them immediately with
sampled measurements for Monte Carlo.
"""

from __future__ import annotations

import enum
import math
import time
from functools import lru_cache
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from ..cfa import (
    Action,
    AdaptationStrategy,
    DecisionFn,
    LoccProtocol,
    Prepare,
    Round,
    bits_to_int,
    postselect_register,
    run_cfa,
    to_branch_program,
)
from ..netsim import EventQueue, Network
from ..noise import NoiseConfig, dephasing_channel
from ..quantum import (
    DEFAULT_MEASURE_CAP,
    BranchCapError,
    DensityOperator,
    KrausChannel,
    PureState,
    ZeroBranchError,
    apply_channel,
    compose,
    enumerate_branches,
    fidelity_pure,
    measure_discard,
    mix,
    partial_trace,
    tensor_product,
    unitary_channel,
)
from ..rng import RNG_ALGORITHM, substream
from ..tensor import ContractionStats, track

Table = Union[Sequence[Union[KrausChannel, None]], Mapping[int, Union[KrausChannel, None]]]


class BackendKind(str, enum.Enum):
    CFA = "cfa"
    MONTE_CARLO = "mc"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, name: Union[str, BackendKind]) -> BackendKind:
        if isinstance(name, cls):
            return name
        aliases = {"cfa": cls.CFA, "cfaexact": cls.CFA, "exact": cls.CFA, "mc": cls.MONTE_CARLO,
                   "montecarlo": cls.MONTE_CARLO, "oracle": cls.ORACLE}
        key = str(name).lower().replace("_", "").replace("-", "")
        if key not in aliases:
            raise ValueError(f"unknown backend {name!r}; expected one of cfa, mc, oracle")
        return aliases[key]


@dataclass
class ProtocolResult:
    success_probability: float
    output_fidelity: float | None
    trials: int = 1
    stderr_estimate: float = 0.0
    stats: ContractionStats = field(default_factory=ContractionStats)
    wallclock_seconds: float = 0.0
    final_sim_time: float = 0.0
    backend: str = ""
    note: str = ""
    rng_algorithm: str = RNG_ALGORITHM


@dataclass(frozen=True)
class ProtocolSpec:
    """What a protocol script declares about its outcome."""

    parties: tuple[str, ...]
    outputs: tuple[str, ...]
    target: PureState
    result_bits: tuple[str, ...] = ()
    success_value: int = 0


@lru_cache(maxsize=256)
def _noisy_cached(channel: KrausChannel, targets: tuple, f: float) -> KrausChannel:
    steps = [(channel, targets)]
    if f < 1.0:
        steps += [(dephasing_channel(f), (q,)) for q in targets]
    return compose(steps, targets)


def noisy(channel: Union[KrausChannel, np.ndarray], targets: Sequence[str], f: float) -> KrausChannel:
    """The ideal operation followed by dephasing(f) on every qubit it touched."""
    if not isinstance(channel, KrausChannel):
        channel = unitary_channel(channel)
    return _noisy_cached(channel, tuple(targets), float(f))


def _normalize_table(channel, controls, table, arity: int) -> tuple:
    if not controls:
        if channel is None:
            raise ValueError("an unconditioned action needs a channel")
        return (channel,)
    size = 2 ** len(controls)
    if isinstance(table, Mapping):
        entries = [table.get(v) for v in range(size)]
    else:
        entries = list(table)
    if len(entries) != size:
        raise ValueError(f"conditioned table needs {size} entries")
    return tuple(entries)


# ---------------------------------------------------------------- sinks


class RecorderSink:
    """Collects protocol calls into rounds keyed by an orderable round key."""

    def __init__(self) -> None:
        self._rounds: dict[object, dict] = {}
        self._last_key: dict[str, object] = {}
        self.owners: dict[str, str] = {}

    def _round(self, key) -> dict:
        return self._rounds.setdefault(key, {"actions": [], "measured": [], "decision": None, "owner": None})

    def _stamp(self, key, qubits: Sequence[str]) -> None:
        for q in qubits:
            prev = self._last_key.get(q)
            if prev is not None and key < prev:
                raise ValueError(f"qubit {q} used in round {key} after round {prev}")
            self._last_key[q] = key

    def prepare(self, key, party: str, qubits: Sequence[str], template: DensityOperator,
                owners: Sequence[str] | None = None) -> None:
        self._stamp(key, qubits)
        for q, p in zip(qubits, owners or [party] * len(qubits)):
            self.owners[q] = p
        self._round(key)["actions"].append(Prepare(party, tuple(qubits), template))

    def apply(self, key, party: str, channel: KrausChannel | None, targets: Sequence[str],
              controls: Sequence[str] = (), table: Table | None = None) -> None:
        self._stamp(key, targets)
        entries = _normalize_table(channel, controls, table, len(targets))
        if all(e is None for e in entries):
            return
        ident = KrausChannel.unitary(np.eye(2 ** len(targets)))
        chans = tuple(ident if e is None else e for e in entries)
        self._round(key)["actions"].append(Action(party, tuple(targets), chans, tuple(controls)))

    def measure(self, key, party: str, qubit: str) -> None:
        self._stamp(key, (qubit,))
        self._round(key)["measured"].append((party, qubit))

    def decide(self, key, owner: str, fn: DecisionFn) -> None:
        rnd = self._round(key)
        if rnd["decision"] is not None:
            raise ValueError(f"round {key} already has a decision")
        rnd["decision"], rnd["owner"] = fn, owner

    def protocol(self, spec: ProtocolSpec) -> LoccProtocol:
        rounds = []
        for key in sorted(self._rounds):
            r = self._rounds[key]
            rounds.append(Round(tuple(r["actions"]), tuple(r["measured"]), r["decision"], r["owner"], key=key))
        return LoccProtocol(
            spec.parties, tuple(rounds), spec.outputs, spec.result_bits, spec.success_value,
            spec.target, dict(self.owners),
        )


class LiveSink:
    """Executes calls immediately; measurements are sampled from ``rng``."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.factor: dict[str, DensityOperator] = {}
        self.bits: dict[str, int] = {}

    def prepare(self, key, party, qubits, template, owners=None) -> None:
        state = template.relabel(dict(zip(template.qubits, qubits)))
        for q in qubits:
            self.factor[q] = state

    def _merged(self, qubits: Sequence[str]) -> DensityOperator:
        parts = list({id(self.factor[q]): self.factor[q] for q in qubits}.values())
        state = parts[0] if len(parts) == 1 else tensor_product(*parts)
        return state

    def _store(self, state: DensityOperator) -> None:
        for q in state.qubits:
            self.factor[q] = state

    def apply(self, key, party, channel, targets, controls=(), table=None) -> None:
        entries = _normalize_table(channel, controls, table, len(targets))
        ch = entries[bits_to_int([self.bits[c] for c in controls])] if controls else entries[0]
        if ch is None:
            return
        self._store(apply_channel(self._merged(targets), ch, targets))

    def measure(self, key, party, qubit) -> None:
        state = self.factor.pop(qubit)
        bit, rest = measure_discard(state, qubit, self.rng)
        self.bits[qubit] = bit
        if rest.n:
            self._store(rest)

    def decide(self, key, owner, fn: DecisionFn) -> None:
        self.bits.update(fn.evaluate(self.bits))

    def state(self, qubits: Sequence[str]) -> DensityOperator:
        merged = self._merged(qubits)
        extra = [q for q in merged.qubits if q not in qubits]
        return partial_trace(merged, extra) if extra else merged


# ---------------------------------------------------------------- runtime


class Runtime:
    """Event-driven context a protocol script runs in.

    Wraps a :class:`~qnetcfa.netsim.Network` so that every quantum operation
    first catches its qubits up on memory dephasing, and forwards the
    operation itself to the sink.
    """

    def __init__(self, sink, noise: NoiseConfig, latency: float, rng: np.random.Generator | None = None,
                 record_trace: bool = False):
        self.sink = sink
        self.noise = noise
        self.latency = latency
        self.queue = EventQueue(record_trace=record_trace)
        self.net = Network(self.queue, noise.dephasing_time_Tdp, on_dephase=self._on_dephase, rng=rng)
        self._ctx: tuple | None = None

    @property
    def now(self) -> float:
        return self.queue.now

    def link(self, a: str, b: str) -> str:
        n = self.noise
        return self.net.connect(a, b, self.latency, n.loss_probability, n.generation_fidelity_F)

    def _on_dephase(self, label: str, channel: KrausChannel) -> None:
        key, party = self._ctx
        self.sink.apply(key, party, channel, (label,))

    def touch(self, key, party: str, *qubits: str) -> None:
        self._ctx = (key, party)
        for q in qubits:
            self.net.touch(q)
        self._ctx = None

    def generate(self, key, a: str, b: str, labels: tuple[str, str], template: DensityOperator,
                 then: Callable[[], None]) -> float:
        cid = self.link(a, b)

        def done(now: float) -> None:
            self.sink.prepare(key, a, labels, template, owners=(a, b))
            then()

        return self.net.generate_epr(cid, labels, done)

    def store(self, key, party: str, qubit: str, state: DensityOperator) -> None:
        """Prepare a local single-party state now."""
        self.net.store(party, qubit)
        self.sink.prepare(key, party, (qubit,), state, owners=(party,))

    def op(self, key, party: str, channel: KrausChannel | None, targets: Sequence[str],
           controls: Sequence[str] = (), table: Table | None = None) -> None:
        self.touch(key, party, *targets)
        self.sink.apply(key, party, channel, tuple(targets), tuple(controls), table)

    def measure(self, key, party: str, qubit: str) -> None:
        self.touch(key, party, qubit)
        self.sink.measure(key, party, qubit)
        self.net.release(qubit)

    def decide(self, key, owner: str, fn: DecisionFn) -> None:
        self.sink.decide(key, owner, fn)

    def send(self, a: str, b: str, then: Callable[[], None]) -> None:
        cid = self.net.connect(a, b, self.latency)
        self.net.send_classical(cid, None, lambda _payload: then())


@dataclass(frozen=True)
class ProtocolInstance:
    """A protocol script bound to its size and physical parameters."""

    name: str
    size: int
    noise: NoiseConfig
    latency: float
    script: Callable[[Runtime], ProtocolSpec]

    def record(self) -> tuple[LoccProtocol, float]:
        sink = RecorderSink()
        rt = Runtime(sink, self.noise, self.latency)
        spec = self.script(rt)
        final = rt.queue.run_until_idle()
        return sink.protocol(spec), final


# ---------------------------------------------------------------- backends


def _evaluate(state: DensityOperator, protocol: LoccProtocol) -> tuple[float, float | None]:
    if protocol.result_bits:
        try:
            p, cond = postselect_register(state, protocol.result_bits, protocol.success_value)
        except ZeroBranchError:
            return 0.0, None
    else:
        p, cond = 1.0, state.normalized()
    extra = [q for q in cond.qubits if q not in protocol.target.qubits]
    if extra:
        cond = partial_trace(cond, extra)
    return p, fidelity_pure(cond, protocol.target)


def run_exact(instance: ProtocolInstance, strategy=AdaptationStrategy.CHAIN) -> ProtocolResult:
    start = time.perf_counter()
    with track() as stats:
        protocol, final = instance.record()
        state = run_cfa(protocol, strategy)
        p, fid = _evaluate(state, protocol)
    wall = time.perf_counter() - start
    note = "" if fid is not None else "success branch has zero probability"
    return ProtocolResult(p, fid, 1, 0.0, stats, wall, final, BackendKind.CFA.value, note)


def run_oracle(instance: ProtocolInstance, max_measured: int = DEFAULT_MEASURE_CAP) -> ProtocolResult:
    start = time.perf_counter()
    with track() as stats:
        protocol, final = instance.record()
        if protocol.measured_bit_count > max_measured:
            raise BranchCapError(
                f"{instance.name} size {instance.size} measures {protocol.measured_bit_count} bits; "
                f"the oracle enumerates at most {max_measured}"
            )
        branches = enumerate_branches(to_branch_program(protocol), None, max_measured)
        good = [
            b for b in branches
            if bits_to_int([b.record[r] for r in protocol.result_bits]) == protocol.success_value
        ] if protocol.result_bits else branches
        p = sum(b.probability for b in good)
        fid = None
        if p > 0:
            state = mix([b.state for b in good], [b.probability / p for b in good])
            extra = [q for q in state.qubits if q not in protocol.target.qubits]
            if extra:
                state = partial_trace(state, extra)
            fid = fidelity_pure(state, protocol.target)
    wall = time.perf_counter() - start
    return ProtocolResult(p, fid, 1, 0.0, stats, wall, final, BackendKind.ORACLE.value)


def _mc_trial(instance: ProtocolInstance, seed: int, index: int) -> tuple[bool, float, float]:
    rng = substream(seed, index)
    sink = LiveSink(rng)
    rt = Runtime(sink, instance.noise, instance.latency, rng=rng)
    spec = instance.script(rt)
    final = rt.queue.run_until_idle()
    if spec.result_bits:
        ok = bits_to_int([sink.bits[b] for b in spec.result_bits]) == spec.success_value
    else:
        ok = True
    fid = 0.0
    if ok:
        state = sink.state(spec.target.qubits).normalized()
        fid = fidelity_pure(state, spec.target)
    return ok, fid, final


def _mc_chunk(args) -> list[tuple[bool, float, float]]:
    instance, seed, lo, hi = args
    return [_mc_trial(instance, seed, i) for i in range(lo, hi)]


def run_monte_carlo(instance: ProtocolInstance, trials: int, seed: int, workers: int = 1) -> ProtocolResult:
    """Faithful sampled runs; trial ``i`` draws from ``substream(seed, i)``.

    Aggregation is in trial order, so the result does not depend on
    ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    start = time.perf_counter()
    if workers <= 1:
        outcomes = _mc_chunk((instance, seed, 0, trials))
    else:
        step = math.ceil(trials / (workers * 4))
        chunks = [(instance, seed, lo, min(trials, lo + step)) for lo in range(0, trials, step)]
        outcomes = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_mc_chunk, chunks):
                outcomes.extend(part)
    wall = time.perf_counter() - start
    wins = [o for o in outcomes if o[0]]
    p = len(wins) / trials
    fid = math.fsum(o[1] for o in wins) / len(wins) if wins else None
    note = "" if wins else "no successful trial; fidelity undefined (expected cost is 1/p_s trials)"
    mean_time = math.fsum(o[2] for o in outcomes) / trials
    return ProtocolResult(
        p, fid, trials, math.sqrt(p * (1 - p) / trials), ContractionStats(), wall, mean_time,
        BackendKind.MONTE_CARLO.value, note,
    )


def run_instance(instance: ProtocolInstance, backend=BackendKind.CFA, strategy=AdaptationStrategy.CHAIN,
                 trials: int = 10_000, seed: int = 0, workers: int = 1) -> ProtocolResult:
    backend = BackendKind.parse(backend)
    if backend is BackendKind.CFA:
        return run_exact(instance, strategy)
    if backend is BackendKind.ORACLE:
        return run_oracle(instance)
    return run_monte_carlo(instance, trials, seed, workers)
