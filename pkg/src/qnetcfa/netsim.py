"""Discrete-event scheduler, nodes, channels and qubit memories.

Memory dephasing is applied lazily: each qubit slot remembers when noise was
last applied and :meth:`Network.touch` catches it up in one step. This is
exact because the time-dephasing family is a semigroup.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .noise import expected_attempts, sample_attempts, time_dephasing_channel
from .quantum import DensityOperator, KrausChannel, apply_channel

DEFAULT_EVENT_CAP = 10**7


class SimulationError(RuntimeError):
    pass


class RunawaySimulationError(SimulationError):
    pass


class ClockError(SimulationError):
    pass


class ResourceError(SimulationError):
    pass


@dataclass(order=True)
class Event:
    time: float
    seq: int
    action: Callable[[], None] = field(compare=False)
    label: str = field(default="", compare=False)
    node: str = field(default="", compare=False)


class EventQueue:
    """Min-heap of events keyed by (time, insertion sequence)."""

    def __init__(self, max_events: int = DEFAULT_EVENT_CAP, record_trace: bool = False):
        self.now = 0.0
        self.max_events = max_events
        self.executed = 0
        self.trace: list[tuple[float, str, str]] | None = [] if record_trace else None
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, delay: float, action: Callable[[], None], label: str = "", node: str = "") -> int:
        if not delay >= 0:
            raise ValueError(f"negative delay {delay}")
        return self.schedule_at(self.now + delay, action, label, node)

    def schedule_at(self, time: float, action: Callable[[], None], label: str = "", node: str = "") -> int:
        if time < self.now:
            raise ClockError(f"cannot schedule at {time} before clock {self.now}")
        seq = next(self._seq)
        heapq.heappush(self._heap, Event(time, seq, action, label, node))
        return seq

    def run_until_idle(self) -> float:
        while self._heap:
            if self.executed >= self.max_events:
                raise RunawaySimulationError(f"more than {self.max_events} events executed")
            ev = heapq.heappop(self._heap)
            self.now = ev.time
            self.executed += 1
            if self.trace is not None:
                self.trace.append((ev.time, ev.node, ev.label))
            ev.action()
        return self.now


def format_trace(trace: Iterable[tuple[float, str, str]]) -> str:
    return "".join(f"{t!r}\t{node}\t{label}\n" for t, node, label in trace)


@dataclass
class QubitSlot:
    label: str
    last_check: float = 0.0
    occupied: bool = False


@dataclass
class QNode:
    id: str
    memory: list[QubitSlot] = field(default_factory=list)
    channels: list[str] = field(default_factory=list)
    max_qubits: int = 64

    def allocate(self, label: str, now: float) -> QubitSlot:
        for slot in self.memory:
            if not slot.occupied:
                slot.label, slot.last_check, slot.occupied = label, now, True
                return slot
        if len(self.memory) >= self.max_qubits:
            raise ResourceError(f"node {self.id} has no free memory slot")
        slot = QubitSlot(label, now, True)
        self.memory.append(slot)
        return slot


@dataclass(frozen=True)
class QChannel:
    id: str
    endpoints: tuple[str, str]
    latency: float
    loss_probability: float = 0.0
    generation_fidelity_F: float = 1.0

    def __post_init__(self) -> None:
        if self.endpoints[0] == self.endpoints[1]:
            raise ValueError("channel endpoints must be distinct")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


def touch(state: DensityOperator, slot: QubitSlot, now: float, Tdp: float) -> DensityOperator:
    """Catch a stored qubit up on memory dephasing and stamp it with ``now``."""
    if not slot.occupied:
        raise SimulationError(f"slot {slot.label} is empty")
    dt = now - slot.last_check
    if dt < 0:
        raise ClockError(f"clock regression on {slot.label}: {now} < {slot.last_check}")
    slot.last_check = now
    if dt == 0:
        return state
    return apply_channel(state, time_dephasing_channel(dt, Tdp), (slot.label,))


class Network:
    """Nodes and channels driven by one :class:`EventQueue`.

    ``on_dephase(label, channel)`` receives the memory-noise channel whenever
    a touch finds elapsed time; ``rng`` switches generation to sampled
    attempts (None gives the deterministic expected count).
    """

    def __init__(
        self,
        queue: EventQueue,
        Tdp: float,
        on_dephase: Callable[[str, KrausChannel], None] | None = None,
        rng: np.random.Generator | None = None,
        max_qubits_per_node: int = 64,
    ):
        self.queue = queue
        self.Tdp = Tdp
        self.on_dephase = on_dephase
        self.rng = rng
        self.max_qubits_per_node = max_qubits_per_node
        self.nodes: dict[str, QNode] = {}
        self.channels: dict[str, QChannel] = {}
        self.slots: dict[str, tuple[QNode, QubitSlot]] = {}

    @property
    def now(self) -> float:
        return self.queue.now

    def add_node(self, node_id: str) -> QNode:
        if node_id not in self.nodes:
            self.nodes[node_id] = QNode(node_id, max_qubits=self.max_qubits_per_node)
        return self.nodes[node_id]

    def connect(self, a: str, b: str, latency: float, loss: float = 0.0, F: float = 1.0) -> str:
        cid = f"{a}-{b}"
        if cid not in self.channels:
            self.channels[cid] = QChannel(cid, (a, b), latency, loss, F)
            self.add_node(a).channels.append(cid)
            self.add_node(b).channels.append(cid)
        return cid

    def channel(self, cid: str) -> QChannel:
        try:
            return self.channels[cid]
        except KeyError:
            raise SimulationError(f"unknown channel {cid}") from None

    def generate_epr(
        self, cid: str, labels: tuple[str, str], on_complete: Callable[[float], None]
    ) -> float:
        """Reserve slots now; install the pair after the attempts have elapsed.

        Returns the completion time.
        """
        ch = self.channel(cid)
        p = ch.loss_probability
        attempts = expected_attempts(p) if self.rng is None else sample_attempts(p, self.rng)
        done = self.now + attempts * ch.latency
        slots = []
        for node_id, label in zip(ch.endpoints, labels):
            node = self.nodes[node_id]
            if label in self.slots:
                raise ResourceError(f"qubit label {label} already in use")
            slot = node.allocate(label, done)
            self.slots[label] = (node, slot)
            slots.append(slot)

        def complete() -> None:
            for slot in slots:
                slot.last_check = self.now
            on_complete(self.now)

        self.queue.schedule_at(done, complete, label=f"epr {labels[0]} {labels[1]}", node=ch.endpoints[0])
        return done

    def store(self, node_id: str, label: str) -> QubitSlot:
        """Place a locally prepared qubit into memory at the current time."""
        node = self.add_node(node_id)
        if label in self.slots:
            raise ResourceError(f"qubit label {label} already in use")
        slot = node.allocate(label, self.now)
        self.slots[label] = (node, slot)
        return slot

    def send_classical(self, cid: str, payload, on_deliver: Callable[[object], None]) -> int:
        ch = self.channel(cid)
        return self.queue.schedule(
            ch.latency, lambda: on_deliver(payload), label=f"msg {cid}", node=ch.endpoints[1]
        )

    def touch(self, label: str) -> float:
        """Apply pending memory dephasing to ``label``; returns the elapsed time."""
        try:
            _, slot = self.slots[label]
        except KeyError:
            raise SimulationError(f"qubit {label} is not stored anywhere") from None
        dt = self.now - slot.last_check
        if dt < 0:
            raise ClockError(f"clock regression on {label}")
        slot.last_check = self.now
        if dt > 0 and self.on_dephase is not None:
            self.on_dephase(label, time_dephasing_channel(dt, self.Tdp))
        return dt

    def release(self, label: str) -> None:
        node, slot = self.slots.pop(label)
        slot.occupied = False
        del node
