"""Control Flow Adaptation.

An LOCC protocol is declared as a sequence of :class:`Round` objects. Each
round performs register-conditioned local actions, measures some qubits and
feeds the outcomes through a :class:`DecisionFn` into fresh register bits.

The exact backend never samples. Measured qubits are dephased and kept as
classical indices. The decision function becomes a reversible circuit
(:func:`synthesize_adaptation`) acting on those indices. Conditioned actions
become register-controlled channels, and every discardable qubit is traced
right after its last use. The register diagonal then carries every branch's
probability and the conditional states at once.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .quantum import (
    COL,
    DIAG,
    OUT,
    ROW,
    AttachStep,
    ChannelStep,
    ClassicalStep,
    ConditionalStep,
    DensityOperator,
    KrausChannel,
    LabelError,
    MeasureStep,
    PureState,
    Step,
    TraceStep,
    ValidationError,
    ZeroBranchError,
    ZERO_BRANCH,
    copy_tensor,
    dephase,
    measure_project,
    partial_trace,
    superop_tensor,
)
from .tensor import (
    DenseTensor,
    contract_pair,
    diagonal_tensor,
    partial_trace_tensor,
    reorder,
    slice_tensor,
    sum_labels,
)

MAX_REGISTER_BITS = 16


class CfaError(ValueError):
    pass


class StrategyError(CfaError):
    pass


class AdaptationStrategy(str, enum.Enum):
    FAN_IN = "fanin"
    CHAIN = "chain"
    TRUTH_TABLE = "truthtable"

    @classmethod
    def parse(cls, name: Union[str, AdaptationStrategy]) -> AdaptationStrategy:
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "").replace("-", "")
        for s in cls:
            if s.value == key:
                return s
        raise StrategyError(f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}")


def bits_to_int(bits: Sequence[int]) -> int:
    """Most significant bit first."""
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


def int_to_bits(value: int, width: int) -> tuple[int, ...]:
    return tuple((value >> (width - 1 - i)) & 1 for i in range(width))


# ---------------------------------------------------------------- decisions


@dataclass(frozen=True)
class DecisionFn:
    """Classical map from input bits to the next register value.

    Exactly one representation is set. ``terms`` gives, per output bit, an
    OR over XOR-terms of input labels (a single term is a parity). ``table``
    lists the output value for every input assignment, inputs[0] being the
    most significant bit. Output values are read with outputs[0] most
    significant.
    """

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    terms: tuple[tuple[tuple[str, ...], ...], ...] | None = None
    table: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if len(set(self.inputs)) != len(self.inputs) or len(set(self.outputs)) != len(self.outputs):
            raise CfaError("decision labels must be distinct")
        if set(self.inputs) & set(self.outputs):
            raise CfaError("decision outputs must be fresh bits")
        if not 1 <= len(self.outputs) <= MAX_REGISTER_BITS:
            raise CfaError(f"register width must be 1..{MAX_REGISTER_BITS}")
        if (self.terms is None) == (self.table is None):
            raise CfaError("give exactly one of terms or table")
        if self.terms is not None:
            terms = tuple(tuple(tuple(t) for t in out) for out in self.terms)
            object.__setattr__(self, "terms", terms)
            if len(terms) != len(self.outputs):
                raise CfaError("one OR-of-XOR expression is needed per output bit")
            known = set(self.inputs)
            for out in terms:
                if not out or any(not t for t in out):
                    raise CfaError("empty term in decision function")
                for t in out:
                    if not set(t) <= known or len(set(t)) != len(t):
                        raise CfaError(f"term {t} uses unknown or repeated inputs")
        else:
            table = tuple(int(v) for v in self.table)
            object.__setattr__(self, "table", table)
            if len(table) != 2 ** len(self.inputs):
                raise CfaError(f"truth table needs {2 ** len(self.inputs)} entries, got {len(table)}")
            if any(not 0 <= v < 2 ** len(self.outputs) for v in table):
                raise CfaError("truth-table value exceeds the register width")

    @classmethod
    def parity(cls, outputs: Mapping[str, Sequence[str]]) -> DecisionFn:
        """Each output bit is the XOR of its listed inputs."""
        inputs = tuple(dict.fromkeys(b for bits in outputs.values() for b in bits))
        return cls(inputs, tuple(outputs), terms=tuple((tuple(bits),) for bits in outputs.values()))

    @classmethod
    def or_of_xors(cls, output: str, terms: Sequence[Sequence[str]]) -> DecisionFn:
        inputs = tuple(dict.fromkeys(b for t in terms for b in t))
        return cls(inputs, (output,), terms=(tuple(tuple(t) for t in terms),))

    @classmethod
    def truth_table(cls, inputs: Sequence[str], outputs: Sequence[str], values) -> DecisionFn:
        if callable(values):
            values = [values(int_to_bits(v, len(inputs))) for v in range(2 ** len(inputs))]
        return cls(tuple(inputs), tuple(outputs), table=tuple(values))

    @property
    def form(self) -> str:
        if self.table is not None:
            return "table"
        return "parity" if all(len(out) == 1 for out in self.terms) else "or_xor"

    def evaluate(self, bits: Mapping[str, int]) -> dict[str, int]:
        if self.table is not None:
            v = self.table[bits_to_int([bits[i] for i in self.inputs])]
            return dict(zip(self.outputs, int_to_bits(v, len(self.outputs))))
        out = {}
        for name, expr in zip(self.outputs, self.terms):
            out[name] = int(any(sum(bits[b] for b in t) % 2 for t in expr))
        return out

    def value(self, bits: Mapping[str, int]) -> int:
        res = self.evaluate(bits)
        return bits_to_int([res[o] for o in self.outputs])

    def to_table(self) -> tuple[int, ...]:
        if self.table is not None:
            return self.table
        n = len(self.inputs)
        return tuple(
            self.value(dict(zip(self.inputs, int_to_bits(v, n)))) for v in range(2**n)
        )


# ---------------------------------------------------------------- circuits

_GATE_ARITY = {"X": 1, "CNOT": 2, "TOFFOLI": 3}


@dataclass(frozen=True)
class Gate:
    name: str
    operands: tuple[str, ...]

    def __post_init__(self) -> None:
        if _GATE_ARITY.get(self.name) != len(self.operands):
            raise CfaError(f"bad gate {self.name}{self.operands}")
        if len(set(self.operands)) != len(self.operands):
            raise CfaError("gate operands must be distinct")

    @property
    def target(self) -> str:
        return self.operands[-1]

    @property
    def controls(self) -> tuple[str, ...]:
        return self.operands[:-1]

    def permutation(self) -> np.ndarray:
        k = len(self.operands)
        perm = np.zeros((2**k, 2**k))
        for v in range(2**k):
            bits = list(int_to_bits(v, k))
            if all(bits[:-1]):
                bits[-1] ^= 1
            perm[bits_to_int(bits), v] = 1
        return perm


@dataclass(frozen=True)
class AdaptationCircuit:
    """Reversible X/CNOT/Toffoli list writing a decision into fresh bits."""

    gates: tuple[Gate, ...]
    fresh_register: tuple[str, ...]
    ancillas: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        known = set(self.inputs) | set(self.fresh_register) | set(self.ancillas)
        for g in self.gates:
            missing = set(g.operands) - known
            if missing:
                raise CfaError(f"gate {g} uses undeclared bits {sorted(missing)}")

    def dump(self) -> str:
        return "".join(f"GATE {g.name} {' '.join(g.operands)}\n" for g in self.gates)

    def count(self, name: str) -> int:
        return sum(g.name == name for g in self.gates)


def simulate_circuit(circuit: AdaptationCircuit, bits: Mapping[str, int]) -> dict[str, int]:
    """Run the circuit on a basis input; fresh and ancilla bits start at 0."""
    state = {b: 0 for b in circuit.fresh_register + circuit.ancillas}
    state.update({k: int(v) for k, v in bits.items()})
    for g in circuit.gates:
        if all(state[c] for c in g.controls):
            state[g.target] ^= 1
    return state


class _Builder:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.gates: list[Gate] = []
        self.ancillas: list[str] = []

    def ancilla(self) -> str:
        label = f"{self.prefix}{len(self.ancillas)}"
        self.ancillas.append(label)
        return label

    def add(self, name: str, *ops: str) -> None:
        self.gates.append(Gate(name, tuple(ops)))

    def or_into(self, bits: Sequence[str], target: str) -> None:
        """target ^= OR(bits) for a fresh target: X-sandwiched Toffoli ladder."""
        if len(bits) == 1:
            self.add("CNOT", bits[0], target)
            return
        for b in bits:
            self.add("X", b)
        acc = bits[0]
        for i, b in enumerate(bits[1:]):
            nxt = target if i == len(bits) - 2 else self.ancilla()
            self.add("TOFFOLI", acc, b, nxt)
            acc = nxt
        self.add("X", target)
        for b in bits:
            self.add("X", b)

    def and_ladder(self, bits: Sequence[str], pool: list[str]) -> tuple[str, list[Gate]]:
        """Compute AND(bits) into pool ancillas; returns the result bit and its gates."""
        gates = []
        acc = bits[0]
        for i, b in enumerate(bits[1:]):
            while len(pool) <= i:
                pool.append(self.ancilla())
            gates.append(Gate("TOFFOLI", (acc, b, pool[i])))
            acc = pool[i]
        return acc, gates


def synthesize_adaptation(
    fn: DecisionFn, strategy: Union[AdaptationStrategy, str], ancilla_prefix: str = "anc"
) -> AdaptationCircuit:
    """Reversible circuit writing ``fn(inputs)`` into ``fn.outputs``.

    FanIn XORs every input straight into its (fresh) target. Chain cascades
    CNOTs through the inputs in place, so each input meets the next one and
    only the last touches the register; the inputs end up scrambled, which
    is harmless because they are discarded. TruthTable uses one
    multi-controlled flip per minterm.
    """
    strategy = AdaptationStrategy.parse(strategy)
    b = _Builder(ancilla_prefix)
    if strategy is AdaptationStrategy.TRUTH_TABLE:
        _synth_table(fn, b)
    elif fn.form == "table":
        raise StrategyError(f"{strategy.value} strategy needs a parity or OR-of-XOR decision")
    elif strategy is AdaptationStrategy.FAN_IN:
        for out, expr in zip(fn.outputs, fn.terms):
            if len(expr) == 1:
                for bit in expr[0]:
                    b.add("CNOT", bit, out)
                continue
            vals = []
            for term in expr:
                if len(term) == 1:
                    vals.append(term[0])
                    continue
                a = b.ancilla()
                for bit in term:
                    b.add("CNOT", bit, a)
                vals.append(a)
            b.or_into(vals, out)
    else:
        used = [bit for expr in fn.terms for t in expr for bit in t]
        if len(set(used)) != len(used):
            raise StrategyError("chain strategy needs disjoint XOR terms (inputs are overwritten)")
        for out, expr in zip(fn.outputs, fn.terms):
            vals = []
            for term in expr:
                for x, y in zip(term, term[1:]):
                    b.add("CNOT", x, y)
                vals.append(term[-1])
            b.or_into(vals, out)
    return AdaptationCircuit(tuple(b.gates), fn.outputs, tuple(b.ancillas), fn.inputs)


def _synth_table(fn: DecisionFn, b: _Builder) -> None:
    n = len(fn.inputs)
    pool: list[str] = []
    for v, out in enumerate(fn.to_table()):
        if out == 0:
            continue
        pattern = int_to_bits(v, n)
        zeros = [x for x, bit in zip(fn.inputs, pattern) if bit == 0]
        targets = [o for o, bit in zip(fn.outputs, int_to_bits(out, len(fn.outputs))) if bit]
        for z in zeros:
            b.add("X", z)
        if n == 0:
            for t in targets:
                b.add("X", t)
        elif n == 1:
            for t in targets:
                b.add("CNOT", fn.inputs[0], t)
        elif n == 2:
            for t in targets:
                b.add("TOFFOLI", fn.inputs[0], fn.inputs[1], t)
        else:
            acc, ladder = b.and_ladder(fn.inputs[:-1], pool)
            b.gates.extend(ladder)
            for t in targets:
                b.add("TOFFOLI", acc, fn.inputs[-1], t)
            b.gates.extend(reversed(ladder))
        for z in zeros:
            b.add("X", z)


# ---------------------------------------------------------------- protocol model


def build_controlled_channel(
    register_bits: Sequence[str], actions: Mapping[int, KrausChannel]
) -> KrausChannel:
    """Kraus set {|j><j| (x) E : E in A_j}, register bits first."""
    k = len(register_bits)
    if k > MAX_REGISTER_BITS:
        raise CfaError("register too wide")
    missing = [j for j in range(2**k) if j not in actions]
    if missing:
        raise ValidationError(f"conditioned action table misses register values {missing}")
    arities = {actions[j].arity for j in range(2**k)}
    if len(arities) != 1:
        raise ValidationError("conditioned actions must share one arity")
    ops = []
    for j in range(2**k):
        proj = np.zeros((2**k, 2**k))
        proj[j, j] = 1
        ops.extend(np.kron(proj, e) for e in actions[j].operators)
    return KrausChannel(ops)


@dataclass(frozen=True)
class Prepare:
    """Install ``template`` (positionally relabelled) on ``qubits``."""

    party: str
    qubits: tuple[str, ...]
    template: DensityOperator

    def __post_init__(self) -> None:
        object.__setattr__(self, "qubits", tuple(self.qubits))
        if len(self.qubits) != self.template.n:
            raise ValidationError("template size does not match the prepared qubits")

    def state(self) -> DensityOperator:
        return self.template.relabel(dict(zip(self.template.qubits, self.qubits)))


@dataclass(frozen=True)
class Action:
    """Local channel on ``targets`` selected by the value of register ``controls``.

    ``channels[v]`` is applied when the controls read ``v`` (controls[0]
    most significant); unconditioned actions have one entry.
    """

    party: str
    targets: tuple[str, ...]
    channels: tuple[KrausChannel, ...]
    controls: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 2 ** len(self.controls):
            raise ValidationError(
                f"action on {self.targets} needs {2 ** len(self.controls)} table entries"
            )
        if any(ch.arity != len(self.targets) for ch in self.channels):
            raise ValidationError("channel arity does not match action targets")
        if set(self.targets) & set(self.controls):
            raise ValidationError("an action cannot target its own control bits")

    @classmethod
    def simple(cls, party: str, channel: KrausChannel, targets: Sequence[str]) -> Action:
        return cls(party, tuple(targets), (channel,))

    def channel_for(self, values: Mapping[str, int]) -> KrausChannel:
        return self.channels[bits_to_int([values[c] for c in self.controls])]


@dataclass(frozen=True)
class Round:
    actions: tuple[Union[Action, Prepare], ...] = ()
    measured: tuple[tuple[str, str], ...] = ()
    decision: DecisionFn | None = None
    decision_owner: str | None = None
    register_in: tuple[str, ...] = ()
    key: object = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "measured", tuple((p, q) for p, q in self.measured))
        object.__setattr__(self, "register_in", tuple(self.register_in))

    @property
    def register_out(self) -> tuple[str, ...]:
        return self.decision.outputs if self.decision is not None else ()

    @property
    def measured_qubits(self) -> tuple[str, ...]:
        return tuple(q for _, q in self.measured)

    def reads(self) -> set[str]:
        out = {c for a in self.actions if isinstance(a, Action) for c in a.controls}
        if self.decision is not None:
            out |= set(self.decision.inputs) - set(self.measured_qubits)
        return out


@dataclass(frozen=True)
class LoccProtocol:
    """Rounds plus the bookkeeping needed to read results off the final state.

    ``outputs`` are the quantum qubits that survive; ``result_bits`` are
    register bits kept for post-selection on ``success_value``.
    """

    parties: tuple[str, ...]
    rounds: tuple[Round, ...]
    outputs: tuple[str, ...] = ()
    result_bits: tuple[str, ...] = ()
    success_value: int = 0
    target: PureState | None = None
    owners: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parties", tuple(self.parties))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "result_bits", tuple(self.result_bits))
        registers: set[str] = set()
        measured: set[str] = set()
        for i, rnd in enumerate(self.rounds):
            this = set(rnd.measured_qubits)
            if this & measured:
                raise ValidationError(f"round {i} re-measures {sorted(this & measured)}")
            unknown = rnd.reads() - registers
            if unknown:
                raise ValidationError(f"round {i} reads bits {sorted(unknown)} no earlier round produced")
            if rnd.decision is not None:
                extra = set(rnd.decision.inputs) - this - registers
                if extra:
                    raise ValidationError(f"round {i} decision reads unknown bits {sorted(extra)}")
                clash = set(rnd.register_out) & (registers | measured | this)
                if clash:
                    raise ValidationError(f"register bits {sorted(clash)} written twice")
                registers |= set(rnd.register_out)
            measured |= this
        missing = set(self.result_bits) - registers
        if missing:
            raise ValidationError(f"result bits {sorted(missing)} are never written")
        # a register bit is consumed by the last round that reads it
        last_read: dict[str, int] = {}
        for i, rnd in enumerate(self.rounds):
            for bit in rnd.reads():
                last_read[bit] = i
        rounds = []
        for i, rnd in enumerate(self.rounds):
            consumed = tuple(
                sorted(b for b, j in last_read.items() if j == i and b not in self.result_bits)
            )
            rounds.append(dataclasses.replace(rnd, register_in=consumed))
        object.__setattr__(self, "rounds", tuple(rounds))

    @property
    def measured_bit_count(self) -> int:
        return sum(len(r.measured) for r in self.rounds)


# ---------------------------------------------------------------- scheduling

_PREP, _ACT, _MEAS, _GATE = "prep", "act", "measure", "gate"


@dataclass(frozen=True)
class _Op:
    kind: str
    item: object
    labels: tuple[str, ...]


def _owner_map(protocol: LoccProtocol) -> dict[str, str]:
    owners = dict(protocol.owners)
    for rnd in protocol.rounds:
        for a in rnd.actions:
            for q in (a.qubits if isinstance(a, Prepare) else a.targets):
                owners.setdefault(q, a.party)
        for p, q in rnd.measured:
            owners.setdefault(q, p)
    return owners


def schedule_round(
    rnd: Round,
    circuit: AdaptationCircuit | None,
    parties: Sequence[str],
    owners: Mapping[str, str],
) -> list[_Op]:
    """Party-major order: each party's actions, measurements, then the gates it can run.

    A gate runs in the block of the party owning its target, but never before
    its operands are measured, before earlier gates on shared bits, or before
    actions that read the bit it overwrites.
    """
    block = {p: i for i, p in enumerate(parties)}
    last = len(parties) - 1
    reg_owner = rnd.decision_owner if rnd.decision_owner is not None else parties[last]

    def where(label: str) -> int:
        return block.get(owners.get(label, reg_owner), last)

    acts: dict[int, list] = {}
    meas_block: dict[str, int] = {}
    read_block: dict[str, int] = {}
    touched: dict[str, int] = {}
    for a in rnd.actions:
        bi = block.get(a.party, last)
        acts.setdefault(bi, []).append(a)
        qubits = a.qubits if isinstance(a, Prepare) else a.targets
        for q in qubits:
            touched[q] = max(touched.get(q, 0), bi)
        if isinstance(a, Action):
            for c in a.controls:
                read_block[c] = max(read_block.get(c, 0), bi)
    for p, q in rnd.measured:
        meas_block[q] = max(block.get(p, last), touched.get(q, 0))

    gates: dict[int, list[Gate]] = {}
    if circuit is not None:
        gate_block: dict[str, int] = {}
        for g in circuit.gates:
            bi = where(g.target)
            for o in g.operands:
                bi = max(bi, meas_block.get(o, 0), gate_block.get(o, 0))
            bi = max(bi, read_block.get(g.target, 0))
            for o in g.operands:
                gate_block[o] = bi
            gates.setdefault(bi, []).append(g)

    ops: list[_Op] = []
    meas_order = [q for _, q in rnd.measured]
    for bi in range(len(parties)):
        for a in acts.get(bi, ()):
            if isinstance(a, Prepare):
                ops.append(_Op(_PREP, a, ()))
            else:
                ops.append(_Op(_ACT, a, a.targets + a.controls))
        for q in meas_order:
            if meas_block[q] == bi:
                ops.append(_Op(_MEAS, q, (q,)))
        for g in gates.get(bi, ()):
            ops.append(_Op(_GATE, g, g.operands))
    return ops


# ---------------------------------------------------------------- executor


@dataclass
class _Lazy:
    prep: Prepare


class CfaExecutor:
    """Runs scheduled ops on a factored state with eager, fused contraction.

    The state is a product of independent factors, each a DenseTensor over
    row/column labels of quantum qubits and diagonal labels of classical
    bits. Fresh pairs stay symbolic until first touched. Each op is first
    reduced on its own small tensor: classical inputs are copied in, fresh
    register inputs are fixed to 0, outputs measured next are diagonalised,
    and outputs at their last use are traced. It is then contracted into
    the involved factors, smallest first.
    """

    def __init__(self, keep: Iterable[str], fresh: Iterable[str], initial: DensityOperator | None = None):
        self.keep = set(keep)
        self.fresh = set(fresh)
        self.factors: dict[int, DenseTensor] = {}
        self.where: dict[str, int] = {}
        self.classical: set[str] = set()
        self.lazy: dict[str, _Lazy] = {}
        self.scale = 1.0
        self._ids = itertools.count()
        self._ops: list[_Op] = []
        self._pos = 0
        self._next_use: list[dict[str, int | None]] = []
        if initial is not None:
            fid = next(self._ids)
            self.factors[fid] = initial.tensor
            for q in initial.qubits:
                self.where[q] = fid
            self.classical |= set(initial.classical)

    # -- liveness
    def run(self, ops: Sequence[_Op]) -> None:
        self._ops = list(ops)
        n = len(self._ops)
        nxt: dict[str, int | None] = {}
        self._next_use = [dict() for _ in range(n)]
        for i in range(n - 1, -1, -1):
            for label in self._ops[i].labels:
                self._next_use[i][label] = nxt.get(label)
                nxt[label] = i
        self._last_use = {}
        for i, op in enumerate(self._ops):
            for label in op.labels:
                self._last_use[label] = i
        for i, op in enumerate(self._ops):
            self._pos = i
            if op.kind == _PREP:
                self._prepare(op.item)
            elif op.kind == _ACT:
                self._act(op.item)
            elif op.kind == _MEAS:
                self._measure(op.item)
            else:
                self._gate(op.item)

    def _dies(self, label: str) -> bool:
        return label not in self.keep and self._next_use[self._pos].get(label) is None

    def _next_op(self, label: str) -> _Op | None:
        j = self._next_use[self._pos].get(label)
        return None if j is None else self._ops[j]

    # -- state plumbing
    def _prepare(self, prep: Prepare) -> None:
        for q in prep.qubits:
            if q in self.where or q in self.lazy:
                raise LabelError(f"qubit {q} prepared twice")
        rec = _Lazy(prep)
        for q in prep.qubits:
            self.lazy[q] = rec

    def _materialize(self, q: str) -> None:
        rec = self.lazy[q]
        state = rec.prep.state()
        for x in rec.prep.qubits:
            del self.lazy[x]
        # partners nobody will ever touch again can be traced right away
        dead = [x for x in rec.prep.qubits if x != q and x not in self.keep and not self._used_from_here(x)]
        if dead:
            state = partial_trace(state, dead)
        fid = next(self._ids)
        self.factors[fid] = state.tensor
        for x in state.qubits:
            self.where[x] = fid

    def _used_from_here(self, label: str) -> bool:
        return self._last_use.get(label, -1) >= self._pos

    def _ensure(self, label: str) -> None:
        if label in self.lazy:
            self._materialize(label)

    def _in_labels(self, q: str) -> tuple:
        if q in self.classical:
            return ((q, DIAG),)
        return ((q, ROW), (q, COL))

    def _contract_in(self, op: DenseTensor, inputs: Sequence[str]) -> None:
        """Fold ``op`` (inputs unprimed, outputs with OUT) into the state."""
        fids = sorted({self.where[q] for q in inputs}, key=lambda f: self.factors[f].size)
        res = op
        for f in fids:
            res = contract_pair(self.factors.pop(f), res)
        rename = {l: l[:2] for l in res.labels if len(l) == 3 and l[2] == OUT}
        if rename:
            res = res.relabel(rename)
        for q in inputs:
            self.where.pop(q, None)
            self.classical.discard(q)
        self._install(res)

    def _install(self, t: DenseTensor) -> None:
        if t.order == 0:
            self.scale *= float(np.real(t.data))
            return
        fid = next(self._ids)
        self.factors[fid] = t
        for l in t.labels:
            self.where[l[0]] = fid
            if l[1] == DIAG:
                self.classical.add(l[0])
            else:
                self.classical.discard(l[0])

    def _reduce_outputs(self, t: DenseTensor, qubits: Sequence[str], quantum: bool) -> DenseTensor:
        """Diagonalise or trace op outputs according to what happens next."""
        diag, trace, summed = {}, [], []
        for q in qubits:
            nxt = self._next_op(q)
            if self._dies(q):
                if quantum:
                    trace.append(((q, ROW, OUT), (q, COL, OUT)))
                else:
                    summed.append((q, DIAG, OUT))
            elif quantum and nxt is not None and nxt.kind == _MEAS:
                # the measurement is absorbed here; it stays a no-op later
                diag[(q, DIAG, OUT)] = ((q, ROW, OUT), (q, COL, OUT))
        if trace:
            t = partial_trace_tensor(t, trace)
        if summed:
            t = sum_labels(t, summed)
        if diag:
            t = diagonal_tensor(t, diag)
        return t

    def _reduce_inputs(self, t: DenseTensor, qubits: Sequence[str]) -> tuple[DenseTensor, list[str]]:
        present = []
        for q in qubits:
            if q in self.where:
                present.append(q)
                # copy tensor converts between diagonal and row/column form
                if (q in self.classical) == ((q, ROW) in t.labels):
                    t = contract_pair(t, copy_tensor(q))
            elif q in self.fresh:
                fixed = {l: 0 for l in ((q, DIAG), (q, ROW), (q, COL)) if l in t.labels}
                t = slice_tensor(t, fixed)
            else:
                raise LabelError(f"qubit {q} is not in the state")
        return t, present

    # -- ops
    def _act(self, a: Action) -> None:
        for q in a.targets + a.controls:
            self._ensure(q)
        for c in a.controls:
            if c in self.where and c not in self.classical:
                self._dephase(c)
        t = _action_tensor(a, keep_controls=[c for c in a.controls if not self._dies(c)])
        t = self._reduce_outputs(t, a.targets, quantum=True)
        t, present = self._reduce_inputs(t, a.targets + a.controls)
        self._contract_in(t, present)

    def _gate(self, g: Gate) -> None:
        for q in g.operands:
            self._ensure(q)
            if q in self.where and q not in self.classical:
                self._dephase(q)
        t = DenseTensor._wrap(
            g.permutation().astype(np.complex128).reshape((2,) * (2 * len(g.operands))),
            tuple((q, DIAG, OUT) for q in g.operands) + tuple((q, DIAG) for q in g.operands),
        )
        t = self._reduce_outputs(t, g.operands, quantum=False)
        t, present = self._reduce_inputs(t, g.operands)
        self._contract_in(t, present)

    def _measure(self, q: str) -> None:
        self._ensure(q)
        if q not in self.where:
            raise LabelError(f"measured qubit {q} is not in the state")
        if self._dies(q):
            self._trace(q)
        elif q not in self.classical:
            self._dephase(q)

    def _dephase(self, q: str) -> None:
        fid = self.where[q]
        t = diagonal_tensor(self.factors[fid], {(q, DIAG): ((q, ROW), (q, COL))})
        self.factors[fid] = t
        self.classical.add(q)

    def _trace(self, q: str) -> None:
        fid = self.where.pop(q)
        t = self.factors.pop(fid)
        if q in self.classical:
            t = sum_labels(t, [(q, DIAG)])
            self.classical.discard(q)
        else:
            t = partial_trace_tensor(t, [((q, ROW), (q, COL))])
        self._install(t)

    def discard(self, labels: Iterable[str]) -> None:
        for q in labels:
            if q in self.lazy:
                self._pos = len(self._ops)
                self._materialize(q)
            if q in self.where:
                self._trace(q)

    def result(self, order: Sequence[str] | None = None) -> DensityOperator:
        """Product of all factors (scalar weights folded in)."""
        self._pos = len(self._ops)
        for q in list(self.lazy):
            if q in self.lazy:
                self._materialize(q)
        for b in self.keep:
            if b not in self.where and b in self.fresh:
                zero = np.zeros(2, dtype=np.complex128)
                zero[0] = 1
                self._install(DenseTensor._wrap(zero, ((b, DIAG),)))
        res = None
        for fid in sorted(self.factors):
            t = self.factors[fid]
            res = t if res is None else contract_pair(res, t)
        qubits = list(dict.fromkeys(l[0] for l in res.labels)) if res is not None else []
        if order is not None:
            qubits = [q for q in order if q in qubits] + [q for q in qubits if q not in order]
        if res is None:
            raise CfaError("protocol leaves no state behind")
        res = res.scale(self.scale)
        return DensityOperator(tuple(qubits), res, frozenset(q for q in qubits if q in self.classical))


def _action_tensor(a: Action, keep_controls: Sequence[str]) -> DenseTensor:
    k = len(a.targets)
    base_labels = (
        [(q, ROW, OUT) for q in a.targets]
        + [(q, COL, OUT) for q in a.targets]
        + [(q, ROW) for q in a.targets]
        + [(q, COL) for q in a.targets]
    )
    if not a.controls:
        return superop_tensor(a.channels[0], a.targets)
    m = len(a.controls)
    kept = [c in keep_controls for c in a.controls]
    n_out = sum(kept)
    data = np.zeros((2,) * (n_out + m) + (2,) * (4 * k), dtype=np.complex128)
    for v, ch in enumerate(a.channels):
        bits = int_to_bits(v, m)
        out_idx = tuple(b for b, kp in zip(bits, kept) if kp)
        data[out_idx + bits] = ch.superop
    labels = (
        [(c, DIAG, OUT) for c, kp in zip(a.controls, kept) if kp]
        + [(c, DIAG) for c in a.controls]
        + base_labels
    )
    return DenseTensor._wrap(data, tuple(labels))


def round_circuits(
    protocol: LoccProtocol, strategy: Union[AdaptationStrategy, str]
) -> list[AdaptationCircuit | None]:
    out = []
    for i, rnd in enumerate(protocol.rounds):
        if rnd.decision is None:
            out.append(None)
        else:
            out.append(synthesize_adaptation(rnd.decision, strategy, ancilla_prefix=f"~anc{i}."))
    return out


def schedule_protocol(
    protocol: LoccProtocol, circuits: Sequence[AdaptationCircuit | None]
) -> list[_Op]:
    owners = _owner_map(protocol)
    ops: list[_Op] = []
    for rnd, circ in zip(protocol.rounds, circuits):
        ops.extend(schedule_round(rnd, circ, protocol.parties, owners))
    return ops


def _check_writable(protocol: LoccProtocol, strategy: AdaptationStrategy) -> None:
    """Chain overwrites inputs in place; they must be bits the round discards."""
    if strategy is not AdaptationStrategy.CHAIN:
        return
    for rnd in protocol.rounds:
        if rnd.decision is None or rnd.decision.terms is None:
            continue
        disposable = set(rnd.measured_qubits) | set(rnd.register_in)
        for expr in rnd.decision.terms:
            for term in expr:
                kept = set(term[1:]) - disposable
                if kept:
                    raise StrategyError(f"chain would overwrite bits {sorted(kept)} that are read later")


def run_cfa(
    protocol: LoccProtocol,
    strategy: Union[AdaptationStrategy, str] = AdaptationStrategy.CHAIN,
    circuits: Sequence[AdaptationCircuit | None] | None = None,
) -> DensityOperator:
    """Exact final state on outputs and result bits (possibly sub-normalised)."""
    if circuits is None:
        strategy = AdaptationStrategy.parse(strategy)
        _check_writable(protocol, strategy)
        circuits = round_circuits(protocol, strategy)
    ops = schedule_protocol(protocol, circuits)
    keep = set(protocol.outputs) | set(protocol.result_bits)
    fresh = {b for c in circuits if c is not None for b in c.fresh_register + c.ancillas}
    ex = CfaExecutor(keep, fresh)
    ex.run(ops)
    return ex.result(order=protocol.outputs + protocol.result_bits)


def apply_round_cfa(
    state: DensityOperator | None, rnd: Round, circuit: AdaptationCircuit | None
) -> DensityOperator:
    """One round without sampling.

    Conditioned actions become register-controlled channels, measured
    qubits are dephased, the circuit writes the fresh register, and measured
    qubits plus the consumed incoming register are traced out.
    """
    parties = tuple(dict.fromkeys([a.party for a in rnd.actions] + [p for p, _ in rnd.measured]))
    if rnd.decision_owner is not None and rnd.decision_owner not in parties:
        parties += (rnd.decision_owner,)
    if not parties:
        parties = ("_",)
    present = () if state is None else state.qubits
    prepared = tuple(q for a in rnd.actions if isinstance(a, Prepare) for q in a.qubits)
    incoming = set(rnd.reads()) - set(rnd.register_out)
    missing = incoming - set(present)
    if missing:
        raise ValidationError(f"state lacks register bits {sorted(missing)}")
    for q in rnd.measured_qubits:
        if q not in present and q not in prepared:
            raise ValidationError(f"state lacks measured qubit {q}")
    consumed = set(rnd.register_in) | incoming
    dropped = set(rnd.measured_qubits) | consumed
    keep = [q for q in present + prepared if q not in dropped] + list(rnd.register_out)
    owners = {q: parties[-1] for q in present}
    for a in rnd.actions:
        for q in a.qubits if isinstance(a, Prepare) else a.targets:
            owners[q] = a.party
    for p, q in rnd.measured:
        owners[q] = p
    ops = schedule_round(rnd, circuit, parties, owners)
    fresh = set(circuit.fresh_register + circuit.ancillas) if circuit is not None else set()
    ex = CfaExecutor(keep, fresh, initial=state)
    ex.run(ops)
    ex.discard([q for q in list(ex.where) + list(ex.lazy) if q not in set(keep)])
    out = ex.result(order=keep)
    return out


# ---------------------------------------------------------------- register readout


def read_register_distribution(state: DensityOperator, register_bits: Sequence[str]) -> dict[int, float]:
    """value -> weight on the register diagonal (sums to the trace weight)."""
    register_bits = tuple(register_bits)
    missing = [b for b in register_bits if b not in state.qubits]
    if missing:
        raise LabelError(f"register bits {missing} not in state")
    reduced = partial_trace(state, [q for q in state.qubits if q not in register_bits])
    reduced = dephase(reduced, register_bits)
    t = reorder(reduced.tensor, [(b, DIAG) for b in register_bits])
    probs = np.real(t.data).reshape(-1)
    return {v: float(p) for v, p in enumerate(probs)}


def postselect_register(
    state: DensityOperator, register_bits: Sequence[str], value: int
) -> tuple[float, DensityOperator]:
    """Project the register onto ``value`` and trace it out.

    Returns the branch probability (relative to the trace weight) and the
    normalised conditional state.
    """
    register_bits = tuple(register_bits)
    total = state.trace_weight
    cur = state
    for b, bit in zip(register_bits, int_to_bits(value, len(register_bits))):
        _, cur = measure_project(cur, b, bit, normalize=False)
    cur = partial_trace(cur, register_bits)
    w = cur.trace_weight
    if w < ZERO_BRANCH * max(total, 1.0):
        raise ZeroBranchError(f"register value {value} has probability {w:.3g}")
    return w / total, cur.normalized()


# ---------------------------------------------------------------- oracle lowering


def to_branch_program(protocol: LoccProtocol) -> list[Step]:
    """Lower a protocol to an :func:`enumerate_branches` program.

    Measurements are sampled branch by branch and decisions evaluated
    classically: the straightforward simulation CFA is checked against.
    Preparations are attached just before their qubits are first used.
    """
    steps: list[Step] = []
    pending: dict[str, Prepare] = {}

    def attach(qubits: Iterable[str]) -> None:
        for q in qubits:
            prep = pending.get(q)
            if prep is not None:
                for x in prep.qubits:
                    pending.pop(x, None)
                steps.append(AttachStep(prep.state()))

    for rnd in protocol.rounds:
        for a in rnd.actions:
            if isinstance(a, Prepare):
                for q in a.qubits:
                    pending[q] = a
                continue
            attach(a.targets)
            if not a.controls:
                steps.append(ChannelStep(a.channels[0], a.targets))
            else:
                steps.append(ConditionalStep(_chooser(a), a.targets))
        for _, q in rnd.measured:
            attach([q])
            steps.append(MeasureStep(q))
            steps.append(TraceStep((q,)))
        if rnd.decision is not None:
            steps.append(ClassicalStep(rnd.decision.evaluate))
    attach(list(pending))
    return steps


def _chooser(a: Action):
    def choose(record: Mapping[str, int]) -> KrausChannel:
        return a.channel_for(record)

    return choose


def circuit_text(circuit: AdaptationCircuit) -> str:
    return circuit.dump()
