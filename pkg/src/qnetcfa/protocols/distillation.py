"""Recurrence entanglement distillation between Alice (A) and Bob (B).

One step consumes two pairs: each side applies CNOT from its kept qubit to
its sacrificed qubit and measures the latter. The parties swap outcomes and
keep the pair iff the outcomes agree. Nesting to depth k runs a binary tree
of such steps over 2^k pairs.

With ``rotation="dejmps"`` each side first rotates both of its qubits about
X, by +pi/2 for Alice and -pi/2 for Bob. That is the local basis change of
the Deutsch et al. recurrence scheme. Werner inputs are invariant under it,
so a single step is unchanged. Without it the first step leaves mostly
phase errors, which later parity checks cannot see, and nesting degrades
the pair.

Every tree node is its own round. Its decision writes a sticky failure
flag, OR(mA xor mB, left flag, right flag). Actions of a parent node are
conditioned on both child flags being 0, so a failed branch is carried
along untouched and never kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Callable, Sequence

from ..cfa import AdaptationStrategy, DecisionFn
from ..noise import NoiseConfig, werner_state
import numpy as np

from ..quantum import CNOT, X, DensityOperator, PureState, ValidationError, compose
from ._runtime import BackendKind, ProtocolInstance, ProtocolResult, ProtocolSpec, Runtime, noisy, run_instance

ALICE, BOB = "A", "B"
ROTATIONS = ("dejmps", "none")


def rx(theta: float) -> np.ndarray:
    return np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * X


@lru_cache(maxsize=64)
def bxor_channel(f: float, angle: float | None):
    """Optional local X rotations on both qubits, then CNOT(kept -> measured)."""
    steps = []
    if angle is not None:
        steps += [(noisy(rx(angle), ("k",), f), ("k",)), (noisy(rx(angle), ("m",), f), ("m",))]
    steps.append((noisy(CNOT, ("k", "m"), f), ("k", "m")))
    return compose(steps, ("k", "m"))


@dataclass
class _Node:
    key: int
    kept: tuple[str, str]
    flag: str
    children: tuple[_Node, _Node] | None = None
    pairs: tuple[int, int] | None = None


def _build_tree(depth: int, counter: list[int], first_pair: list[int]) -> _Node:
    """Post-order numbering; leaves of the tree are pair indices."""
    if depth == 1:
        i = first_pair[0]
        first_pair[0] += 2
        counter[0] += 1
        key = counter[0]
        return _Node(key, (f"A.{i}", f"B.{i}"), f"F{key}", None, (i, i + 1))
    left = _build_tree(depth - 1, counter, first_pair)
    right = _build_tree(depth - 1, counter, first_pair)
    counter[0] += 1
    key = counter[0]
    return _Node(key, left.kept, f"F{key}", (left, right))


def _sacrificed(node: _Node) -> tuple[str, str]:
    if node.children is not None:
        return node.children[1].kept
    j = node.pairs[1]
    return (f"A.{j}", f"B.{j}")


def distill_tree(
    rt: Runtime,
    depth: int,
    templates: Sequence[DensityOperator] | None,
    on_done: Callable[[_Node], None],
    key_offset: int = 0,
    rotation: str = "dejmps",
) -> _Node:
    """Schedule a depth-``depth`` distillation; ``on_done(root)`` fires when
    both parties know the root flag."""
    root = _build_tree(depth, [key_offset], [0])
    if rotation not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}")
    f = rt.noise.gate_fidelity_f
    if rotation == "dejmps":
        local = {ALICE: bxor_channel(f, np.pi / 2), BOB: bxor_channel(f, -np.pi / 2)}
    else:
        local = {ALICE: bxor_channel(f, None), BOB: bxor_channel(f, None)}
    werner = werner_state(rt.noise.generation_fidelity_F, ("a", "b"))

    def template(i: int) -> DensityOperator:
        return werner if templates is None else templates[i]

    def run_node(node: _Node, parent_ready: Callable[[], None]) -> None:
        controls = () if node.children is None else (node.children[0].flag, node.children[1].flag)
        kept, meas = node.kept, _sacrificed(node)
        for side, party in enumerate((ALICE, BOB)):
            op = local[party]
            table = None if not controls else (op, None, None, None)
            channel = op if not controls else None
            rt.op(node.key, party, channel, (kept[side], meas[side]), controls=controls, table=table)
            rt.measure(node.key, party, meas[side])
        terms = [(meas[0], meas[1])]
        if node.children is not None:
            terms += [(node.children[0].flag,), (node.children[1].flag,)]
        fn = DecisionFn.or_of_xors(node.flag, terms)
        arrived = [0]

        def delivered() -> None:
            arrived[0] += 1
            if arrived[0] == 2:
                rt.decide(node.key, BOB, fn)
                parent_ready()

        rt.send(ALICE, BOB, delivered)
        rt.send(BOB, ALICE, delivered)

    def start(node: _Node, parent_ready: Callable[[], None]) -> None:
        if node.children is None:
            up = [0]

            def pair_up() -> None:
                up[0] += 1
                if up[0] == 2:
                    run_node(node, parent_ready)

            for j in node.pairs:
                rt.generate(node.key, ALICE, BOB, (f"A.{j}", f"B.{j}"), template(j), pair_up)
            return
        done = [0]

        def child_done() -> None:
            done[0] += 1
            if done[0] == 2:
                run_node(node, parent_ready)

        for child in node.children:
            start(child, child_done)

    start(root, lambda: on_done(root))
    return root


def _script(depth: int, templates, rotation: str, rt: Runtime) -> ProtocolSpec:
    def done(root: _Node) -> None:
        rt.touch(root.key, ALICE, root.kept[0])
        rt.touch(root.key, BOB, root.kept[1])

    root = distill_tree(rt, depth, templates, done, rotation=rotation)
    return ProtocolSpec((ALICE, BOB), root.kept, PureState.phi_plus(*root.kept), (root.flag,), 0)


def nested_distillation_instance(
    k: int, noise: NoiseConfig, latency: float = 1e-3, states: Sequence[DensityOperator] | None = None,
    rotation: str = "dejmps",
) -> ProtocolInstance:
    if k < 1:
        raise ValueError("nesting depth must be at least 1")
    if states is not None:
        states = tuple(states)
        if len(states) != 2**k or any(s.n != 2 for s in states):
            raise ValidationError(f"depth {k} needs {2**k} two-qubit input states")
    if rotation not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}")
    return ProtocolInstance("distill_nested", k, noise, latency, partial(_script, k, states, rotation))


def single_distillation_instance(
    noise: NoiseConfig, latency: float = 1e-3, states: Sequence[DensityOperator] | None = None,
    rotation: str = "dejmps",
) -> ProtocolInstance:
    inst = nested_distillation_instance(1, noise, latency, states, rotation)
    return ProtocolInstance("distill_single", 1, inst.noise, inst.latency, inst.script)


def single_distillation(noise: NoiseConfig, backend=BackendKind.CFA, seed: int = 0, latency: float = 1e-3,
                        states: Sequence[DensityOperator] | None = None, trials: int = 10_000,
                        strategy=AdaptationStrategy.CHAIN, workers: int = 1,
                        rotation: str = "dejmps") -> ProtocolResult:
    inst = single_distillation_instance(noise, latency, states, rotation)
    return run_instance(inst, backend, strategy, trials, seed, workers)


def nested_distillation(k: int, noise: NoiseConfig, backend=BackendKind.CFA, strategy=AdaptationStrategy.CHAIN,
                        seed: int = 0, latency: float = 1e-3, trials: int = 10_000,
                        workers: int = 1, rotation: str = "dejmps") -> ProtocolResult:
    inst = nested_distillation_instance(k, noise, latency, rotation=rotation)
    return run_instance(inst, backend, strategy, trials, seed, workers)
