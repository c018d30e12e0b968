import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnetcfa.tensor import (
    ContractionStats,
    DenseTensor,
    DimensionError,
    TensorError,
    UnknownLabelError,
    contract_pair,
    diagonal_tensor,
    partial_trace_tensor,
    reorder,
    slice_tensor,
    stats_scope,
    sum_labels,
    track,
)


def rand(shape, seed=0):
    g = np.random.default_rng(seed)
    return g.normal(size=shape) + 1j * g.normal(size=shape)


def test_construction_copies_and_freezes():
    arr = rand((2, 3))
    t = DenseTensor(arr, ("a", "b"))
    arr[0, 0] = 99
    assert t.data[0, 0] != 99
    assert t.extents == (2, 3) and t.order == 2 and t.size == 6
    with pytest.raises(ValueError):
        t.data[0, 0] = 1


def test_amplitudes_are_row_major():
    t = DenseTensor(np.arange(6).reshape(2, 3), ("a", "b"))
    assert list(t.amplitudes().real) == [0, 1, 2, 3, 4, 5]


def test_construction_errors():
    with pytest.raises(DimensionError):
        DenseTensor(np.zeros((2, 2)), ("a",))
    with pytest.raises(TensorError):
        DenseTensor(np.zeros((2, 2)), ("a", "a"))
    with pytest.raises(UnknownLabelError):
        DenseTensor(np.zeros(2), ("a",)).axis("b")


def test_contract_pair_matches_einsum():
    a = DenseTensor(rand((2, 3, 4), 1), ("i", "j", "k"))
    b = DenseTensor(rand((4, 3, 5), 2), ("k", "j", "l"))
    c = contract_pair(a, b)
    assert c.labels == ("i", "l")
    np.testing.assert_allclose(c.data, np.einsum("ijk,kjl->il", a.data, b.data))


def test_contract_pair_keep_is_batch_index():
    a = DenseTensor(rand((2, 3), 1), ("b", "j"))
    b = DenseTensor(rand((2, 3), 2), ("b", "j"))
    c = contract_pair(a, b, keep=["b"])
    np.testing.assert_allclose(c.data, np.einsum("bj,bj->b", a.data, b.data))


def test_contract_pair_rename_and_outer_product():
    a = DenseTensor(rand((2,), 1), ("x",))
    b = DenseTensor(rand((3,), 2), ("y",))
    c = contract_pair(a, b, rename={"y": "z"})
    assert c.labels == ("x", "z")
    np.testing.assert_allclose(c.data, np.outer(a.data, b.data))


def test_contract_pair_extent_mismatch():
    with pytest.raises(DimensionError):
        contract_pair(DenseTensor(np.zeros(2), ("a",)), DenseTensor(np.zeros(3), ("a",)))


def test_partial_trace_and_sum():
    t = DenseTensor(rand((2, 2, 3), 3), ("r", "c", "x"))
    np.testing.assert_allclose(partial_trace_tensor(t, [("r", "c")]).data, np.einsum("iix->x", t.data))
    np.testing.assert_allclose(sum_labels(t, ["x"]).data, t.data.sum(axis=2))
    with pytest.raises(UnknownLabelError):
        partial_trace_tensor(t, [("r", "nope")])
    with pytest.raises(DimensionError):
        partial_trace_tensor(t, [("r", "x")])


def test_diagonal_slice_reorder():
    t = DenseTensor(rand((2, 2, 3), 4), ("r", "c", "x"))
    d = diagonal_tensor(t, {"d": ("r", "c")})
    np.testing.assert_allclose(reorder(d, ("d", "x")).data, np.einsum("iix->ix", t.data))
    s = slice_tensor(t, {"r": 1})
    np.testing.assert_allclose(s.data, t.data[1])
    r = reorder(t, ("x", "c", "r"))
    np.testing.assert_allclose(r.data, t.data.transpose(2, 1, 0))
    with pytest.raises(TensorError):
        reorder(t, ("x", "c"))


def test_addition_aligns_labels():
    a = DenseTensor(rand((2, 3), 5), ("a", "b"))
    b = reorder(a, ("b", "a"))
    np.testing.assert_allclose((a + b).data, 2 * a.data)


def test_stats_track_peak_and_release():
    with track() as stats:
        a = DenseTensor(np.zeros((2,) * 4), tuple("abcd"))
        b = DenseTensor(np.zeros((2,) * 3), tuple("xyz"))
        del a, b
    assert stats.peak_live_amplitudes == 24
    assert stats.peak_tensor_order == 4
    assert stats.live_amplitudes == 0


def test_stats_scope_and_merge():
    s = stats_scope(lambda: contract_pair(DenseTensor(np.ones(2), ("a",)), DenseTensor(np.ones(2), ("a",))))
    assert s.contractions_performed == 1
    total = ContractionStats()
    total.merge(s)
    total.merge(ContractionStats(100, 1, 2))
    assert total.peak_live_amplitudes == 100 and total.contractions_performed == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_contraction_is_associative(i, j, k, seed):
    a = DenseTensor(rand((i, j), seed), ("i", "j"))
    b = DenseTensor(rand((j, k), seed + 1), ("j", "k"))
    c = DenseTensor(rand((k, 2), seed + 2), ("k", "l"))
    left = contract_pair(contract_pair(a, b), c)
    right = contract_pair(a, contract_pair(b, c))
    np.testing.assert_allclose(left.data, right.data, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_contraction_commutes_up_to_order(seed):
    a = DenseTensor(rand((2, 3), seed), ("i", "j"))
    b = DenseTensor(rand((3, 2), seed + 1), ("j", "k"))
    ab, ba = contract_pair(a, b), contract_pair(b, a)
    np.testing.assert_allclose(reorder(ba, ab.labels).data, ab.data, atol=1e-12)
