"""Dense labelled tensors, pairwise contraction and live-size accounting.

Tensors carry one label per index. Contracting two tensors sums over the
labels they share, so the physical axis order never matters for semantics.
Every tensor allocated while a :func:`track` scope is active is counted
towards that scope's peak live amplitude total until it is garbage
collected.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Iterator, Mapping, Sequence

import numpy as np

Label = Hashable

__all__ = [
    "ContractionStats",
    "DenseTensor",
    "DimensionError",
    "TensorError",
    "UnknownLabelError",
    "contract_pair",
    "diagonal_tensor",
    "partial_trace_tensor",
    "reorder",
    "slice_tensor",
    "stats_scope",
    "sum_labels",
    "track",
]


class TensorError(ValueError):
    pass


class DimensionError(TensorError):
    pass


class UnknownLabelError(TensorError):
    pass


@dataclass
class ContractionStats:
    peak_live_amplitudes: int = 0
    peak_tensor_order: int = 0
    contractions_performed: int = 0
    live_amplitudes: int = field(default=0, repr=False, compare=False)

    def _allocate(self, size: int, order: int) -> None:
        self.live_amplitudes += size
        if self.live_amplitudes > self.peak_live_amplitudes:
            self.peak_live_amplitudes = self.live_amplitudes
        if order > self.peak_tensor_order:
            self.peak_tensor_order = order

    def merge(self, other: ContractionStats) -> None:
        """Fold another run's peaks into this one (peaks combine by max)."""
        self.peak_live_amplitudes = max(self.peak_live_amplitudes, other.peak_live_amplitudes)
        self.peak_tensor_order = max(self.peak_tensor_order, other.peak_tensor_order)
        self.contractions_performed += other.contractions_performed


_local = threading.local()


def _active_scopes() -> tuple[ContractionStats, ...]:
    return getattr(_local, "scopes", ())


@contextmanager
def track() -> Iterator[ContractionStats]:
    """Collect :class:`ContractionStats` for tensors created inside the block."""
    stats = ContractionStats()
    outer = _active_scopes()
    _local.scopes = outer + (stats,)
    try:
        yield stats
    finally:
        _local.scopes = outer


def stats_scope(run: Callable[[], object]) -> ContractionStats:
    with track() as stats:
        run()
    return stats


def _count_contraction() -> None:
    for scope in _active_scopes():
        scope.contractions_performed += 1


class DenseTensor:
    """Immutable complex tensor with one label per index.

    ``data`` is an ndarray whose shape gives the index extents; flattening it
    in C order yields the row-major amplitude list.
    """

    __slots__ = ("data", "labels", "_scopes", "__weakref__")

    def __init__(self, data, labels: Iterable[Label]):
        self._scopes = ()
        arr = np.array(data, dtype=np.complex128, copy=True)
        self._init(arr, tuple(labels))

    @classmethod
    def _wrap(cls, arr: np.ndarray, labels: tuple) -> DenseTensor:
        # trusted constructor for freshly computed arrays, no copy
        obj = cls.__new__(cls)
        obj._scopes = ()
        obj._init(arr, labels)
        return obj

    def _init(self, arr: np.ndarray, labels: tuple) -> None:
        if arr.ndim != len(labels):
            raise DimensionError(f"{arr.ndim} indices but {len(labels)} labels")
        if len(set(labels)) != len(labels):
            raise TensorError(f"duplicate labels in {labels!r}")
        if any(e < 1 for e in arr.shape):
            raise DimensionError("extents must be positive")
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr
        self.labels = labels
        scopes = _active_scopes()
        if scopes:
            self._scopes = scopes
            for scope in scopes:
                scope._allocate(arr.size, arr.ndim)

    def __del__(self):
        for scope in self._scopes:
            scope.live_amplitudes -= self.data.size

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def order(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def amplitudes(self) -> np.ndarray:
        return self.data.ravel(order="C")

    def extent(self, label: Label) -> int:
        return self.data.shape[self.axis(label)]

    def axis(self, label: Label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabelError(f"label {label!r} not in tensor") from None

    def relabel(self, mapping: Mapping[Label, Label]) -> DenseTensor:
        return DenseTensor._wrap(self.data, tuple(mapping.get(l, l) for l in self.labels))

    def conj(self) -> DenseTensor:
        return DenseTensor._wrap(np.conj(self.data), self.labels)

    def scale(self, factor: complex) -> DenseTensor:
        return DenseTensor._wrap(self.data * factor, self.labels)

    def __add__(self, other: DenseTensor) -> DenseTensor:
        other = reorder(other, self.labels)
        return DenseTensor._wrap(self.data + other.data, self.labels)

    def __repr__(self) -> str:
        return f"DenseTensor(labels={self.labels!r}, extents={self.extents!r})"


def _renamed(labels: Sequence[Label], rename: Mapping[Label, Label] | None) -> tuple:
    if not rename:
        return tuple(labels)
    return tuple(rename.get(l, l) for l in labels)


def contract_pair(
    a: DenseTensor,
    b: DenseTensor,
    keep: Iterable[Label] = (),
    rename: Mapping[Label, Label] | None = None,
) -> DenseTensor:
    """Sum over the labels shared by ``a`` and ``b``.

    Labels listed in ``keep`` that both tensors carry are matched but not
    summed (a batch index). The result carries ``a``'s free labels followed by
    ``b``'s free labels, each optionally renamed through ``rename``.
    """
    b_axes = {l: i for i, l in enumerate(b.labels)}
    shared = [l for l in a.labels if l in b_axes]
    for l in shared:
        if a.extent(l) != b.data.shape[b_axes[l]]:
            raise DimensionError(
                f"label {l!r} has extent {a.extent(l)} vs {b.data.shape[b_axes[l]]}"
            )
    keep = set(keep).intersection(shared)
    _count_contraction()
    if not keep:
        ia = [a.labels.index(l) for l in shared]
        ib = [b_axes[l] for l in shared]
        data = np.tensordot(a.data, b.data, axes=(ia, ib))
        out = [l for l in a.labels if l not in b_axes] + [l for l in b.labels if l not in shared]
        return DenseTensor._wrap(data, _renamed(out, rename))
    ids: dict[Label, int] = {}
    for l in a.labels + b.labels:
        ids.setdefault(l, len(ids))
    summed = set(shared) - keep
    out = [l for l in a.labels if l not in summed] + [
        l for l in b.labels if l not in b_axes.keys() & set(a.labels)
    ]
    data = np.einsum(
        a.data,
        [ids[l] for l in a.labels],
        b.data,
        [ids[l] for l in b.labels],
        [ids[l] for l in out],
        optimize=True,
    )
    return DenseTensor._wrap(np.asarray(data), _renamed(out, rename))


def _check_labels(t: DenseTensor, labels: Iterable[Label]) -> None:
    present = set(t.labels)
    for l in labels:
        if l not in present:
            raise UnknownLabelError(f"label {l!r} not in tensor {t.labels!r}")


def partial_trace_tensor(t: DenseTensor, pairs: Sequence[tuple[Label, Label]]) -> DenseTensor:
    """Identify each label pair and sum over it."""
    flat = [l for p in pairs for l in p]
    _check_labels(t, flat)
    if len(set(flat)) != len(flat):
        raise TensorError("a label appears in more than one pair")
    ids = {l: i for i, l in enumerate(t.labels)}
    for x, y in pairs:
        if t.extent(x) != t.extent(y):
            raise DimensionError(f"cannot trace {x!r} against {y!r}: extents differ")
        ids[y] = ids[x]
    out = [l for l in t.labels if l not in set(flat)]
    _count_contraction()
    data = np.einsum(t.data, [ids[l] for l in t.labels], [ids[l] for l in out])
    return DenseTensor._wrap(np.array(data, dtype=np.complex128), tuple(out))


def sum_labels(t: DenseTensor, labels: Iterable[Label]) -> DenseTensor:
    """Sum out single indices (a contraction against the all-ones vector)."""
    labels = list(labels)
    _check_labels(t, labels)
    axes = tuple(t.axis(l) for l in labels)
    _count_contraction()
    data = t.data.sum(axis=axes)
    out = tuple(l for l in t.labels if l not in set(labels))
    return DenseTensor._wrap(np.array(data, dtype=np.complex128), out)


def diagonal_tensor(t: DenseTensor, groups: Mapping[Label, Sequence[Label]]) -> DenseTensor:
    """Keep only entries where every label in a group agrees.

    Each group collapses into one index named by its key, i.e. a contraction
    with a copy tensor.
    """
    flat = [l for g in groups.values() for l in g]
    _check_labels(t, flat)
    ids = {l: i for i, l in enumerate(t.labels)}
    out_ids: dict[Label, int] = {}
    for new, group in groups.items():
        first = ids[group[0]]
        for l in group[1:]:
            if t.extent(l) != t.extent(group[0]):
                raise DimensionError("diagonal over unequal extents")
            ids[l] = first
        out_ids[new] = first
    grouped = set(flat)
    out = [l for l in t.labels if l not in grouped]
    out_sub = [ids[l] for l in out] + list(out_ids.values())
    _count_contraction()
    data = np.einsum(t.data, [ids[l] for l in t.labels], out_sub)
    return DenseTensor._wrap(np.array(data, dtype=np.complex128), tuple(out) + tuple(out_ids))


def slice_tensor(t: DenseTensor, fixed: Mapping[Label, int]) -> DenseTensor:
    _check_labels(t, fixed)
    index = tuple(fixed.get(l, slice(None)) for l in t.labels)
    out = tuple(l for l in t.labels if l not in fixed)
    return DenseTensor._wrap(np.array(t.data[index]), out)


def reorder(t: DenseTensor, new_label_order: Sequence[Label]) -> DenseTensor:
    new_label_order = tuple(new_label_order)
    if len(new_label_order) != len(t.labels) or set(new_label_order) != set(t.labels):
        raise TensorError(f"{new_label_order!r} is not a permutation of {t.labels!r}")
    if new_label_order == t.labels:
        return t
    perm = [t.labels.index(l) for l in new_label_order]
    return DenseTensor._wrap(np.ascontiguousarray(t.data.transpose(perm)), new_label_order)
