import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnetcfa.noise import (
    NoiseConfig,
    dephasing_channel,
    expected_attempts,
    sample_attempts,
    sample_loss,
    time_dephasing_channel,
    time_dephasing_lambda,
    werner_matrix,
    werner_state,
)
from qnetcfa.quantum import PureState, apply_channel, fidelity_pure
from qnetcfa.rng import RNG_ALGORITHM, substream


def plus():
    return PureState(("q",), np.array([1, 1]) / math.sqrt(2)).density()


def test_noise_config_defaults_and_validation():
    n = NoiseConfig()
    assert (n.loss_probability, n.gate_fidelity_f, n.generation_fidelity_F, n.dephasing_time_Tdp) == (0, 1, 1, 0.01)
    for kwargs in ({"loss_probability": 1.0}, {"gate_fidelity_f": 1.1}, {"generation_fidelity_F": 0.0},
                   {"dephasing_time_Tdp": 0.0}, {"dephasing_time_Tdp": math.inf}):
        with pytest.raises(ValueError):
            NoiseConfig(**kwargs)


def test_dephasing_channel_action():
    out = apply_channel(plus(), dephasing_channel(0.75), ("q",))
    # off-diagonal shrinks by 2f - 1
    assert out.matrix()[0, 1] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        dephasing_channel(1.5)


def test_lambda_identities():
    assert time_dephasing_lambda(0.0, 0.01) == 0.0
    assert time_dephasing_lambda(0.01 * math.log(2), 0.01) == pytest.approx(0.25, abs=1e-12)
    assert time_dephasing_lambda(1e6, 0.01) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        time_dephasing_lambda(-1.0, 0.01)
    with pytest.raises(ValueError):
        time_dephasing_lambda(1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 0.05), st.floats(0, 0.05), st.floats(1e-3, 1.0))
def test_time_dephasing_semigroup(t1, t2, tdp):
    a = apply_channel(apply_channel(plus(), time_dephasing_channel(t1, tdp), ("q",)),
                      time_dephasing_channel(t2, tdp), ("q",))
    b = apply_channel(plus(), time_dephasing_channel(t1 + t2, tdp), ("q",))
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0))
def test_werner_fidelity_is_F(F):
    rho = werner_state(F, ("a", "b"))
    assert fidelity_pure(rho, PureState.phi_plus("a", "b")) == pytest.approx(F, abs=1e-12)
    m = werner_matrix(F)
    assert np.trace(m).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(m).min() >= -1e-12


def test_loss_sampling():
    rng = substream(5, 0)
    draws = [sample_attempts(0.75, rng) for _ in range(20000)]
    assert np.mean(draws) == pytest.approx(4.0, rel=0.05)
    assert expected_attempts(0.75) == 4 and expected_attempts(0.0) == 1
    assert sample_attempts(0.0, rng) == 1
    assert not sample_loss(0.0, rng)
    with pytest.raises(ValueError):
        expected_attempts(1.0)


def test_substreams_are_reproducible_and_distinct():
    assert substream(7, 3).random() == substream(7, 3).random()
    assert substream(7, 3).random() != substream(7, 4).random()
    assert "Philox" in RNG_ALGORITHM
    with pytest.raises(ValueError):
        substream(-1)
