"""Density-operator quantum mechanics on labelled qubits.

A :class:`DensityOperator` stores its matrix as a :class:`~qnetcfa.tensor.DenseTensor`
with a row index ``(q, "r")`` and a column index ``(q, "c")`` per qubit.
Qubits that have been dephased in the computational basis may instead be kept
as a single diagonal index ``(q, "d")``; they behave exactly like a qubit
whose off-diagonal entries are zero, at half the index count.

This module also hosts :func:`enumerate_branches`, the brute-force oracle
that walks every measurement branch of a program.
"""

from __future__ import annotations

import itertools
from dataclasses import InitVar, dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .tensor import (
    DenseTensor,
    contract_pair,
    diagonal_tensor,
    partial_trace_tensor,
    reorder,
    slice_tensor,
    sum_labels,
)

ROW, COL, DIAG = "r", "c", "d"
OUT = "+"

STATE_TOL = 1e-9
ZERO_BRANCH = 1e-12
DEFAULT_MEASURE_CAP = 16


class QuantumError(ValueError):
    pass


class LabelError(QuantumError):
    pass


class ValidationError(QuantumError):
    pass


class ZeroBranchError(QuantumError):
    """Raised when asked to normalise a branch of (numerically) zero weight."""


class BranchCapError(QuantumError):
    pass


# ---------------------------------------------------------------- gates

I2 = np.eye(2, dtype=np.complex128)
X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
H = np.array([[1, 1], [1, -1]], dtype=np.complex128) / np.sqrt(2)
S = np.array([[1, 0], [0, 1j]], dtype=np.complex128)


def controlled(u: np.ndarray, n_controls: int = 1) -> np.ndarray:
    """Controlled-``u`` with the controls as the most significant qubits."""
    u = np.asarray(u, dtype=np.complex128)
    dim = u.shape[0] * 2**n_controls
    out = np.eye(dim, dtype=np.complex128)
    out[dim - u.shape[0] :, dim - u.shape[0] :] = u
    return out


CNOT = controlled(X)
CZ = controlled(Z)
TOFFOLI = controlled(X, 2)
SWAP = np.array(
    [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=np.complex128
)

GATES = {
    "I": I2,
    "X": X,
    "Y": Y,
    "Z": Z,
    "H": H,
    "S": S,
    "CNOT": CNOT,
    "CZ": CZ,
    "TOFFOLI": TOFFOLI,
    "SWAP": SWAP,
}


def is_unitary(u: np.ndarray, tol: float = STATE_TOL) -> bool:
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        return False
    return bool(np.allclose(u @ u.conj().T, np.eye(u.shape[0]), atol=tol, rtol=0))


def _n_qubits(dim: int) -> int:
    k = int(dim).bit_length() - 1
    if dim < 1 or 2**k != dim:
        raise ValidationError(f"dimension {dim} is not a power of two")
    return k


# ---------------------------------------------------------------- channels


@dataclass(frozen=True, eq=False)
class KrausChannel:
    """CPTP map given by Kraus operators on ``arity`` qubits."""

    operators: tuple
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        ops = tuple(np.array(e, dtype=np.complex128) for e in self.operators)
        if not ops:
            raise ValidationError("a channel needs at least one Kraus operator")
        shape = ops[0].shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValidationError("Kraus operators must be square")
        _n_qubits(shape[0])
        if any(e.shape != shape for e in ops):
            raise ValidationError("Kraus operators must share one shape")
        for e in ops:
            e.flags.writeable = False
        object.__setattr__(self, "operators", ops)
        if validate:
            total = sum(e.conj().T @ e for e in ops)
            if not np.allclose(total, np.eye(shape[0]), atol=STATE_TOL, rtol=0):
                raise ValidationError("Kraus operators are not complete (sum E^dag E != I)")

    @classmethod
    def unitary(cls, u: np.ndarray) -> KrausChannel:
        if not is_unitary(u):
            raise ValidationError("operator is not unitary")
        return cls((u,))

    @property
    def arity(self) -> int:
        return _n_qubits(self.operators[0].shape[0])

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]

    @cached_property
    def superop(self) -> np.ndarray:
        """Axes ordered (out rows, out cols, in rows, in cols), each per qubit."""
        k, d = self.arity, self.dim
        stack = np.stack(self.operators)
        sup = np.einsum("kab,kcd->acbd", stack, stack.conj())
        sup = np.ascontiguousarray(sup.reshape((2,) * (4 * k)))
        sup.flags.writeable = False
        del d
        return sup

    @cached_property
    def permutation(self) -> np.ndarray | None:
        """The 0/1 matrix if this is a single classical reversible operator."""
        if len(self.operators) != 1:
            return None
        u = self.operators[0]
        if not np.all((np.abs(u) < 1e-12) | (np.abs(u - 1) < 1e-12)):
            return None
        if not (np.all(np.abs(u).sum(axis=0).round() == 1) and np.all(np.abs(u).sum(axis=1).round() == 1)):
            return None
        return np.real(u).round()

    @cached_property
    def is_identity(self) -> bool:
        return bool(
            np.allclose(self.superop.reshape(self.dim**2, self.dim**2), np.eye(self.dim**2), atol=1e-15, rtol=0)
        )

    def then(self, other: KrausChannel) -> KrausChannel:
        """``other`` applied after ``self`` on the same qubits."""
        if other.dim != self.dim:
            raise ValidationError("cannot compose channels of different arity")
        ops = [b @ a for a in self.operators for b in other.operators]
        return KrausChannel(_prune(ops), validate=False)


def _prune(ops: Sequence[np.ndarray]) -> list[np.ndarray]:
    kept = [e for e in ops if np.linalg.norm(e) > 1e-14]
    return kept or [np.zeros_like(ops[0])]


_unitary_cache: dict[bytes, KrausChannel] = {}


def unitary_channel(u: np.ndarray) -> KrausChannel:
    u = np.asarray(u, dtype=np.complex128)
    key = u.tobytes() + bytes(str(u.shape), "ascii")
    ch = _unitary_cache.get(key)
    if ch is None:
        ch = _unitary_cache[key] = KrausChannel.unitary(u)
    return ch


def as_channel(op: Union[KrausChannel, np.ndarray]) -> KrausChannel:
    if isinstance(op, KrausChannel):
        return op
    return unitary_channel(op)


def embed_operator(op: np.ndarray, targets: Sequence[str], qubits: Sequence[str]) -> np.ndarray:
    """Lift an operator on ``targets`` to the full ordered register ``qubits``."""
    targets, qubits = list(targets), list(qubits)
    if not set(targets) <= set(qubits):
        raise LabelError(f"targets {targets} not within {qubits}")
    m, k = len(qubits), len(targets)
    order = targets + [q for q in qubits if q not in targets]
    full = np.kron(op, np.eye(2 ** (m - k), dtype=np.complex128)).reshape((2,) * (2 * m))
    perm = [order.index(q) for q in qubits]
    full = full.transpose(perm + [m + p for p in perm])
    return full.reshape(2**m, 2**m)


def compose(
    steps: Sequence[tuple[Union[KrausChannel, np.ndarray], Sequence[str]]],
    qubits: Sequence[str],
) -> KrausChannel:
    """One channel on ``qubits`` equal to applying ``steps`` in order."""
    dim = 2 ** len(qubits)
    current = [np.eye(dim, dtype=np.complex128)]
    for op, targets in steps:
        ch = as_channel(op)
        if ch.arity != len(targets):
            raise ValidationError("channel arity does not match its targets")
        lifted = [embed_operator(e, targets, qubits) for e in ch.operators]
        current = _prune([e @ k for e in lifted for k in current])
    return KrausChannel(current, validate=False)


# ---------------------------------------------------------------- states

_fresh = itertools.count()


def fresh_labels(n: int, prefix: str = "q") -> tuple[str, ...]:
    return tuple(f"{prefix}{next(_fresh)}" for _ in range(n))


def row(q: str) -> tuple:
    return (q, ROW)


def col(q: str) -> tuple:
    return (q, COL)


def diag(q: str) -> tuple:
    return (q, DIAG)


def state_labels(qubits: Iterable[str], classical: frozenset = frozenset()) -> list:
    out = []
    for q in qubits:
        if q in classical:
            out.append((q, DIAG))
        else:
            out.append((q, ROW))
            out.append((q, COL))
    return out


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Mixed state over ordered qubit labels.

    ``trace_weight`` is the (possibly sub-normalised) trace; operations never
    renormalise implicitly.
    """

    qubits: tuple[str, ...]
    tensor: DenseTensor
    classical: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "qubits", tuple(self.qubits))
        if len(set(self.qubits)) != len(self.qubits):
            raise LabelError("duplicate qubit labels")
        expected = state_labels(self.qubits, self.classical)
        if len(expected) != self.tensor.order or set(expected) != set(self.tensor.labels):
            raise LabelError(f"tensor labels {self.tensor.labels!r} do not match qubits {self.qubits!r}")

    @classmethod
    def _trusted(cls, qubits: tuple, tensor: DenseTensor, classical: frozenset = frozenset()) -> DensityOperator:
        # internal constructor for results of label-preserving operations
        obj = object.__new__(cls)
        object.__setattr__(obj, "qubits", qubits)
        object.__setattr__(obj, "tensor", tensor)
        object.__setattr__(obj, "classical", frozenset(classical))
        return obj

    @classmethod
    def from_matrix(cls, matrix, qubits: Sequence[str]) -> DensityOperator:
        qubits = tuple(qubits)
        n = len(qubits)
        m = np.asarray(matrix, dtype=np.complex128)
        if m.shape != (2**n, 2**n):
            raise ValidationError(f"matrix shape {m.shape} does not fit {n} qubits")
        labels = [row(q) for q in qubits] + [col(q) for q in qubits]
        return cls(qubits, DenseTensor(m.reshape((2,) * (2 * n)), labels))

    @property
    def n(self) -> int:
        return len(self.qubits)

    @cached_property
    def trace_weight(self) -> float:
        return float(np.real(np.einsum(self.tensor.data, _qubit_subscripts(self.tensor.labels)[0], [])))

    def diagonal_of(self, q: str) -> np.ndarray:
        """Weights of q = 0 and q = 1 (the reduced diagonal, unnormalised)."""
        sub, ids = _qubit_subscripts(self.tensor.labels)
        return np.real(np.einsum(self.tensor.data, sub, [ids[q]]))

    def matrix(self, order: Sequence[str] | None = None) -> np.ndarray:
        order = tuple(self.qubits if order is None else order)
        if set(order) != set(self.qubits) or len(order) != self.n:
            raise LabelError(f"{order!r} is not an ordering of {self.qubits!r}")
        full = promote(self, self.classical) if self.classical else self
        t = reorder(full.tensor, [row(q) for q in order] + [col(q) for q in order])
        return t.data.reshape(2**self.n, 2**self.n)

    def normalized(self) -> DensityOperator:
        w = self.trace_weight
        if w < ZERO_BRANCH:
            raise ZeroBranchError("cannot normalise a zero-weight state")
        return DensityOperator._trusted(self.qubits, self.tensor.scale(1.0 / w), self.classical)

    def relabel(self, mapping: Mapping[str, str]) -> DensityOperator:
        tmap = {}
        for old, new in mapping.items():
            for kind in (ROW, COL, DIAG):
                tmap[(old, kind)] = (new, kind)
        return DensityOperator(
            tuple(mapping.get(q, q) for q in self.qubits),
            self.tensor.relabel(tmap),
            frozenset(mapping.get(q, q) for q in self.classical),
        )

    def __repr__(self) -> str:
        return f"DensityOperator(qubits={self.qubits!r}, classical={sorted(self.classical)!r})"


def _qubit_subscripts(labels: Sequence[tuple]) -> tuple[list[int], dict]:
    # row, column and diagonal labels of one qubit share an einsum index
    ids: dict = {}
    return [ids.setdefault(l[0], len(ids)) for l in labels], ids


def check_physical(rho: DensityOperator, tol: float = STATE_TOL) -> None:
    """Hermiticity, positivity and trace bookkeeping; O(8^n), validation only."""
    m = rho.matrix()
    if not np.allclose(m, m.conj().T, atol=tol, rtol=0):
        raise ValidationError("state is not Hermitian")
    if np.linalg.eigvalsh((m + m.conj().T) / 2).min() < -tol:
        raise ValidationError("state is not positive semidefinite")
    if abs(np.trace(m).real - rho.trace_weight) > tol:
        raise ValidationError("trace does not match trace_weight")


@dataclass(frozen=True, eq=False)
class PureState:
    qubits: tuple[str, ...]
    amplitudes: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "qubits", tuple(self.qubits))
        amp = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amp.size != 2 ** len(self.qubits):
            raise ValidationError("amplitude count does not match qubit count")
        if abs(np.linalg.norm(amp) - 1) > 1e-12:
            raise ValidationError("pure state must have unit norm")
        amp.flags.writeable = False
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def phi_plus(cls, a: str, b: str) -> PureState:
        return cls((a, b), np.array([1, 0, 0, 1]) / np.sqrt(2))

    @classmethod
    def basis(cls, qubits: Sequence[str], bits: Sequence[int]) -> PureState:
        amp = np.zeros(2 ** len(qubits))
        amp[int("".join(str(b) for b in bits) or "0", 2)] = 1
        return cls(tuple(qubits), amp)

    def density(self) -> DensityOperator:
        return DensityOperator.from_matrix(np.outer(self.amplitudes, self.amplitudes.conj()), self.qubits)

    def in_order(self, order: Sequence[str]) -> np.ndarray:
        n = len(self.qubits)
        perm = [self.qubits.index(q) for q in order]
        return self.amplitudes.reshape((2,) * n).transpose(perm).reshape(-1)


def make_epr(labels: Sequence[str] | None = None) -> DensityOperator:
    """|phi+><phi+| on two fresh (or given) qubit labels."""
    a, b = labels if labels is not None else fresh_labels(2)
    return PureState.phi_plus(a, b).density()


def maximally_mixed(qubits: Sequence[str]) -> DensityOperator:
    d = 2 ** len(qubits)
    return DensityOperator.from_matrix(np.eye(d) / d, qubits)


def tensor_product(*states: DensityOperator) -> DensityOperator:
    out = states[0]
    for s in states[1:]:
        if set(out.qubits) & set(s.qubits):
            raise LabelError("tensor product of states sharing qubits")
        t = contract_pair(out.tensor, s.tensor)
        out = DensityOperator._trusted(out.qubits + s.qubits, t, out.classical | s.classical)
    return out


def _check_targets(rho: DensityOperator, targets: Sequence[str]) -> tuple[str, ...]:
    targets = tuple(targets)
    missing = [q for q in targets if q not in rho.qubits]
    if missing:
        raise LabelError(f"unknown qubits {missing}")
    if len(set(targets)) != len(targets):
        raise LabelError("repeated target qubit")
    return targets


def out_rename(targets: Iterable[str]) -> dict:
    ren = {}
    for q in targets:
        for kind in (ROW, COL, DIAG):
            ren[(q, kind, OUT)] = (q, kind)
    return ren


def superop_tensor(ch: KrausChannel, targets: Sequence[str]) -> DenseTensor:
    labels = (
        [(q, ROW, OUT) for q in targets]
        + [(q, COL, OUT) for q in targets]
        + [row(q) for q in targets]
        + [col(q) for q in targets]
    )
    return DenseTensor._wrap(ch.superop, tuple(labels))


def permutation_tensor(perm: np.ndarray, targets: Sequence[str]) -> DenseTensor:
    k = len(targets)
    labels = [(q, DIAG, OUT) for q in targets] + [diag(q) for q in targets]
    return DenseTensor._wrap(np.asarray(perm, dtype=np.complex128).reshape((2,) * (2 * k)), tuple(labels))


def copy_tensor(q: str) -> DenseTensor:
    """delta(row, col, diag) for one qubit."""
    d = np.zeros((2, 2, 2), dtype=np.complex128)
    d[0, 0, 0] = d[1, 1, 1] = 1
    return DenseTensor._wrap(d, (row(q), col(q), diag(q)))


def promote(rho: DensityOperator, qubits: Iterable[str]) -> DensityOperator:
    """Re-expand diagonal (classical) qubits into row/column form."""
    t = rho.tensor
    qubits = [q for q in qubits if q in rho.classical]
    for q in qubits:
        t = contract_pair(t, copy_tensor(q))
    return DensityOperator._trusted(rho.qubits, t, rho.classical - set(qubits))


def dephase(rho: DensityOperator, qubits: Iterable[str]) -> DensityOperator:
    """Computational-basis dephasing, storing the qubits as diagonal indices."""
    qubits = [q for q in _check_targets(rho, tuple(qubits)) if q not in rho.classical]
    if not qubits:
        return rho
    t = diagonal_tensor(rho.tensor, {diag(q): (row(q), col(q)) for q in qubits})
    return DensityOperator._trusted(rho.qubits, t, rho.classical | set(qubits))


def apply_channel(rho: DensityOperator, ch: KrausChannel, targets: Sequence[str]) -> DensityOperator:
    targets = _check_targets(rho, targets)
    if ch.arity != len(targets):
        raise ValidationError(f"channel arity {ch.arity} vs {len(targets)} targets")
    classical = [q for q in targets if q in rho.classical]
    if classical:
        if len(classical) == len(targets) and ch.permutation is not None:
            t = contract_pair(rho.tensor, permutation_tensor(ch.permutation, targets), rename=out_rename(targets))
            return DensityOperator._trusted(rho.qubits, t, rho.classical)
        rho = promote(rho, classical)
    t = contract_pair(rho.tensor, superop_tensor(ch, targets), rename=out_rename(targets))
    return DensityOperator._trusted(rho.qubits, t, rho.classical)


def apply_gate(rho: DensityOperator, u: np.ndarray, targets: Sequence[str]) -> DensityOperator:
    return apply_channel(rho, unitary_channel(u), targets)


def _projected(rho: DensityOperator, target: str, outcome: int) -> DensityOperator:
    t = rho.tensor
    if target in rho.classical:
        axes = [t.axis(diag(target))]
    else:
        axes = [t.axis(row(target)), t.axis(col(target))]
    index = [slice(None)] * t.order
    for ax in axes:
        index[ax] = 1 - outcome
    data = np.array(t.data)
    data[tuple(index)] = 0
    if len(axes) == 2:
        index = [slice(None)] * t.order
        index[axes[0]] = outcome
        index[axes[1]] = 1 - outcome
        data[tuple(index)] = 0
        index[axes[0]] = 1 - outcome
        index[axes[1]] = outcome
        data[tuple(index)] = 0
    return DensityOperator._trusted(rho.qubits, DenseTensor._wrap(data, t.labels), rho.classical)


def measure_project(
    rho: DensityOperator, target: str, outcome: int, normalize: bool = True
) -> tuple[float, DensityOperator]:
    """Project ``target`` onto ``outcome``; returns (probability, state).

    The probability is tr(P rho P), so the two outcomes sum to the input's
    trace weight.
    """
    _check_targets(rho, (target,))
    if outcome not in (0, 1):
        raise ValueError("outcome must be 0 or 1")
    proj = _projected(rho, target, outcome)
    p = proj.trace_weight
    if not normalize:
        return p, proj
    if p < ZERO_BRANCH:
        raise ZeroBranchError(f"outcome {outcome} on {target} has probability {p:.3g}")
    return p, DensityOperator._trusted(proj.qubits, proj.tensor.scale(1.0 / p), proj.classical)


def measure_sample(rho: DensityOperator, target: str, rng: np.random.Generator) -> tuple[int, DensityOperator]:
    _check_targets(rho, (target,))
    w = rho.diagonal_of(target)
    bit = 0 if rng.random() < w[0] / (w[0] + w[1]) else 1
    _, post = measure_project(rho, target, bit)
    return bit, post


def measure_discard(rho: DensityOperator, target: str, rng: np.random.Generator) -> tuple[int, DensityOperator]:
    """Sample a measurement of ``target`` and return the normalised rest."""
    _check_targets(rho, (target,))
    w = rho.diagonal_of(target)
    total = w[0] + w[1]
    bit = 0 if rng.random() < w[0] / total else 1
    t = rho.tensor
    if target in rho.classical:
        rest = slice_tensor(t, {diag(target): bit})
    else:
        rest = slice_tensor(t, {row(target): bit, col(target): bit})
    keep = tuple(q for q in rho.qubits if q != target)
    return bit, DensityOperator._trusted(keep, rest.scale(1.0 / w[bit]), rho.classical - {target})


def partial_trace(rho: DensityOperator, discard: Iterable[str]) -> DensityOperator:
    discard = _check_targets(rho, tuple(discard))
    if not discard:
        return rho
    t = rho.tensor
    quantum = [q for q in discard if q not in rho.classical]
    classical = [q for q in discard if q in rho.classical]
    if quantum:
        t = partial_trace_tensor(t, [(row(q), col(q)) for q in quantum])
    if classical:
        t = sum_labels(t, [diag(q) for q in classical])
    keep = tuple(q for q in rho.qubits if q not in set(discard))
    return DensityOperator._trusted(keep, t, rho.classical - set(discard))


def fidelity_pure(rho: DensityOperator, psi: PureState) -> float:
    """<psi| rho |psi> for a pure target on the same qubit set."""
    if set(rho.qubits) != set(psi.qubits):
        raise LabelError(f"state on {rho.qubits} vs target on {psi.qubits}")
    m = rho.matrix(psi.qubits)
    v = psi.amplitudes
    return float(np.real(v.conj() @ m @ v))


def mix(states: Sequence[DensityOperator], weights: Sequence[float]) -> DensityOperator:
    """Weighted sum of states on the same qubits."""
    base = states[0]
    order = base.qubits
    total = None
    for s, w in zip(states, weights):
        s = promote(s, s.classical)
        t = reorder(s.tensor, [row(q) for q in order] + [col(q) for q in order]).data * w
        total = t if total is None else total + t
    labels = tuple([row(q) for q in order] + [col(q) for q in order])
    return DensityOperator(order, DenseTensor._wrap(total, labels))


# ---------------------------------------------------------------- branch oracle


@dataclass(frozen=True)
class GateStep:
    unitary: np.ndarray
    targets: tuple


@dataclass(frozen=True)
class ChannelStep:
    channel: KrausChannel
    targets: tuple


@dataclass(frozen=True)
class MeasureStep:
    target: str
    key: str | None = None


@dataclass(frozen=True)
class TraceStep:
    qubits: tuple


@dataclass(frozen=True)
class AttachStep:
    state: DensityOperator


@dataclass(frozen=True)
class ClassicalStep:
    """Derive new classical values from the branch record."""

    compute: Callable[[Mapping[str, int]], Mapping[str, int]]


@dataclass(frozen=True)
class ConditionalStep:
    """Apply ``choose(record)`` (a channel, unitary, or None) to ``targets``."""

    choose: Callable[[Mapping[str, int]], object]
    targets: tuple


Step = Union[GateStep, ChannelStep, MeasureStep, TraceStep, AttachStep, ClassicalStep, ConditionalStep]


@dataclass(frozen=True, eq=False)
class BranchOutcome:
    outcome_bits: tuple[int, ...]
    probability: float
    state: DensityOperator
    record: Mapping[str, int] = field(default_factory=dict)


def enumerate_branches(
    program: Sequence[Step],
    initial: DensityOperator | None = None,
    max_measured: int = DEFAULT_MEASURE_CAP,
) -> list[BranchOutcome]:
    """Walk every measurement branch of ``program`` depth first.

    Each measurement splits the branch with :func:`measure_project`; branches
    below the zero-branch threshold are pruned. Probabilities are relative to
    the initial state's trace weight.
    """
    program = list(program)
    n_measured = sum(isinstance(s, MeasureStep) for s in program)
    if n_measured > max_measured:
        raise BranchCapError(
            f"program measures {n_measured} bits, above the enumeration cap of {max_measured} "
            f"({2**n_measured} branches)"
        )
    if initial is None:
        rho = None
    else:
        rho = initial.normalized()
    results: list[BranchOutcome] = []
    stack = [(0, rho, 1.0, (), {})]
    while stack:
        i, rho, prob, bits, record = stack.pop()
        while i < len(program):
            step = program[i]
            i += 1
            if isinstance(step, MeasureStep):
                key = step.key or step.target
                children = []
                for m in (0, 1):
                    try:
                        p, post = measure_project(rho, step.target, m)
                    except ZeroBranchError:
                        continue
                    children.append((i, post, prob * p, bits + (m,), {**record, key: m}))
                stack.extend(reversed(children))
                break
            rho, record = _run_step(step, rho, record)
        else:
            results.append(BranchOutcome(bits, prob, rho, record))
    return results


def _run_step(step: Step, rho, record):
    if isinstance(step, GateStep):
        return apply_gate(rho, step.unitary, step.targets), record
    if isinstance(step, ChannelStep):
        return apply_channel(rho, step.channel, step.targets), record
    if isinstance(step, TraceStep):
        return partial_trace(rho, step.qubits), record
    if isinstance(step, AttachStep):
        return (step.state if rho is None else tensor_product(rho, step.state)), record
    if isinstance(step, ClassicalStep):
        return rho, {**record, **step.compute(record)}
    if isinstance(step, ConditionalStep):
        op = step.choose(record)
        if op is None:
            return rho, record
        return apply_channel(rho, as_channel(op), step.targets), record
    raise TypeError(f"unknown program step {step!r}")


def group_branches(
    branches: Sequence[BranchOutcome], key: Callable[[BranchOutcome], object]
) -> dict[object, tuple[float, DensityOperator]]:
    """Total probability and normalised mixture of the branches sharing a key."""
    groups: dict[object, list[BranchOutcome]] = {}
    for b in branches:
        groups.setdefault(key(b), []).append(b)
    out = {}
    for k, bs in groups.items():
        p = sum(b.probability for b in bs)
        out[k] = (p, mix([b.state for b in bs], [b.probability / p for b in bs]))
    return out
