import math

import numpy as np
import pytest

from qnetcfa.cfa import AdaptationStrategy
from qnetcfa.noise import NoiseConfig
from qnetcfa.protocols import (
    BackendKind,
    chained_swapping,
    nested_distillation,
    nested_distillation_instance,
    run_exact,
    run_monte_carlo,
    run_oracle,
    single_distillation,
    swap_chain_circuit,
    swap_chain_instance,
    swap_chain_protocol,
    teleportation,
    teleportation_instance,
)
from qnetcfa.protocols.distillation import bxor_channel
from qnetcfa.quantum import BranchCapError, PureState, ValidationError, make_epr
from qnetcfa.noise import werner_state

IDEAL_MEMORY = 1e9


def bbpssw(F):
    e = (1 - F) / 3
    p = F**2 + 2 * F * e + 5 * e**2
    return p, (F**2 + e**2) / p


def test_backend_parse():
    assert BackendKind.parse("Monte-Carlo") is BackendKind.MONTE_CARLO
    assert BackendKind.parse("exact") is BackendKind.CFA
    with pytest.raises(ValueError):
        BackendKind.parse("quantum")


@pytest.mark.parametrize("F", [0.6, 0.8, 0.95])
def test_single_distillation_matches_bbpssw(F):
    noise = NoiseConfig(generation_fidelity_F=F, dephasing_time_Tdp=IDEAL_MEMORY)
    res = single_distillation(noise)
    p, f1 = bbpssw(F)
    assert res.success_probability == pytest.approx(p, abs=1e-9)
    assert res.output_fidelity == pytest.approx(f1, abs=1e-9)


def test_literal_circuit_single_step_is_unchanged():
    noise = NoiseConfig(generation_fidelity_F=0.8, dephasing_time_Tdp=IDEAL_MEMORY)
    a = single_distillation(noise, rotation="none")
    b = single_distillation(noise, rotation="dejmps")
    assert a.output_fidelity == pytest.approx(b.output_fidelity, abs=1e-12)


def test_perfect_pairs_distill_perfectly():
    res = nested_distillation(2, NoiseConfig.noiseless())
    assert res.success_probability == pytest.approx(1.0)
    assert res.output_fidelity == pytest.approx(1.0)


def test_distillation_with_custom_states():
    states = [make_epr(("a", "b")), werner_state(0.7, ("a", "b"))]
    res = single_distillation(NoiseConfig.noiseless(), states=states)
    assert 0 < res.success_probability <= 1
    with pytest.raises(ValidationError):
        nested_distillation_instance(2, NoiseConfig(), states=states)
    with pytest.raises(ValueError):
        nested_distillation_instance(0, NoiseConfig())
    with pytest.raises(ValueError):
        nested_distillation_instance(1, NoiseConfig(), rotation="twirl")


def test_bxor_channel_is_cached_and_unitary_when_noiseless():
    ch = bxor_channel(1.0, math.pi / 2)
    assert ch is bxor_channel(1.0, math.pi / 2)
    assert len(ch.operators) == 1


def test_teleport_werner_fidelity():
    F = 0.8
    psi = PureState(("s",), np.array([0.6, 0.8j]))
    res = teleportation(psi, NoiseConfig(generation_fidelity_F=F, dephasing_time_Tdp=IDEAL_MEMORY))
    assert res.success_probability == pytest.approx(1.0)
    assert res.output_fidelity == pytest.approx((1 + 2 * F) / 3, abs=1e-6)
    with pytest.raises(ValidationError):
        teleportation_instance(PureState.phi_plus("a", "b"), NoiseConfig())


def test_teleport_over_distilled_pair():
    F = 0.8
    noise = NoiseConfig(generation_fidelity_F=F, dephasing_time_Tdp=IDEAL_MEMORY)
    p, f1 = bbpssw(F)
    r = 1 / math.sqrt(2)
    # the distilled pair is not isotropic; averaging over the six axis states is
    cardinal = [(1, 0), (0, 1), (r, r), (r, -r), (r, 1j * r), (r, -1j * r)]
    fids = []
    for amps in cardinal:
        res = teleportation(PureState(("s",), np.array(amps)), noise, distill_depth=1)
        assert res.success_probability == pytest.approx(p, abs=1e-6)
        fids.append(res.output_fidelity)
    assert np.mean(fids) == pytest.approx((1 + 2 * f1) / 3, abs=1e-6)


def test_noiseless_swap_chain_is_perfect():
    for strategy in AdaptationStrategy:
        res = chained_swapping(5, NoiseConfig.noiseless(), strategy=strategy)
        assert res.output_fidelity == pytest.approx(1.0)


def test_swap_chain_werner_composition():
    # Werner pairs compose: 4F'-1 over 3 = product of (4F-1)/3 per link
    F, n = 0.9, 5
    res = chained_swapping(n, NoiseConfig(generation_fidelity_F=F, dephasing_time_Tdp=IDEAL_MEMORY))
    w = ((4 * F - 1) / 3) ** (n - 1)
    assert res.output_fidelity == pytest.approx((3 * w + 1) / 4, abs=1e-6)


def test_swap_chain_timing_and_validation():
    _, t = swap_chain_instance(6, NoiseConfig(), latency=0.002).record()
    assert t == pytest.approx(0.004)
    with pytest.raises(ValueError):
        swap_chain_instance(2, NoiseConfig())


def test_swap_chain_protocol_shape():
    proto = swap_chain_protocol(5)
    assert proto.outputs == ("A1.R", "A5.L")
    assert proto.measured_bit_count == 6
    text = swap_chain_circuit(5, "chain")
    assert text.count("CNOT") == 6


def test_oracle_agrees_and_caps():
    noise = NoiseConfig(generation_fidelity_F=0.85, gate_fidelity_f=0.97, dephasing_time_Tdp=0.05)
    inst = swap_chain_instance(4, noise)
    a, b = run_exact(inst), run_oracle(inst)
    assert a.output_fidelity == pytest.approx(b.output_fidelity, abs=1e-9)
    with pytest.raises(BranchCapError):
        run_oracle(swap_chain_instance(12, noise))


def test_monte_carlo_is_seeded_and_worker_independent():
    inst = nested_distillation_instance(1, NoiseConfig(generation_fidelity_F=0.8))
    a = run_monte_carlo(inst, 300, seed=11)
    b = run_monte_carlo(inst, 300, seed=11, workers=2)
    assert (a.success_probability, a.output_fidelity) == (b.success_probability, b.output_fidelity)
    c = run_monte_carlo(inst, 300, seed=12)
    assert c.success_probability != a.success_probability or c.output_fidelity != a.output_fidelity
    assert a.stderr_estimate == pytest.approx(math.sqrt(a.success_probability * (1 - a.success_probability) / 300))
    with pytest.raises(ValueError):
        run_monte_carlo(inst, 0, seed=1)


def test_monte_carlo_agrees_with_exact_on_swapping():
    noise = NoiseConfig(generation_fidelity_F=0.9, gate_fidelity_f=0.98, loss_probability=0.3)
    inst = swap_chain_instance(4, noise)
    mc = run_monte_carlo(inst, 2000, seed=3)
    exact = run_exact(inst)
    assert mc.success_probability == 1.0
    # loss makes generation times random in MC; exact uses the expected count
    assert mc.output_fidelity == pytest.approx(exact.output_fidelity, abs=0.05)


def test_monte_carlo_reports_no_successes():
    inst = nested_distillation_instance(3, NoiseConfig(generation_fidelity_F=0.3, dephasing_time_Tdp=1e-4))
    res = run_monte_carlo(inst, 5, seed=0)
    if res.output_fidelity is None:
        assert "no successful trial" in res.note


# ---------------------------------------------------------------- frozen oracle fixtures and MC cross-checks

import json
from pathlib import Path

FROZEN = json.loads((Path(__file__).parent / "fixtures" / "oracle_values.json").read_text())


def _noise(p):
    return NoiseConfig(p["loss_p"], p["f_gate"], p["F_gen"], p["Tdp_s"])


def test_swap_chain_matches_frozen_oracle():
    entry = FROZEN["swap_chain_F08"]
    res = chained_swapping(3, _noise(entry["params"]), latency=entry["params"]["latency_s"])
    assert res.output_fidelity == pytest.approx(entry["points"][0]["fidelity"], abs=1e-9)


def test_teleport_plus_matches_frozen_oracle():
    entry = FROZEN["teleport_plus"]
    plus = PureState(("s",), np.array([1.0, 1.0]) / math.sqrt(2))
    res = teleportation(plus, _noise(entry["params"]), latency=entry["params"]["latency_s"])
    assert res.output_fidelity == pytest.approx(entry["points"][0]["fidelity"], abs=1e-9)


def test_ideal_teleport_is_input_independent():
    g = np.random.default_rng(8)
    for _ in range(100):
        v = g.normal(size=2) + 1j * g.normal(size=2)
        psi = PureState(("s",), v / np.linalg.norm(v))
        assert teleportation(psi, NoiseConfig.noiseless()).output_fidelity == pytest.approx(1.0, abs=1e-9)


def test_maximally_mixed_inputs_stay_mixed():
    res = single_distillation(NoiseConfig(generation_fidelity_F=0.25, dephasing_time_Tdp=IDEAL_MEMORY))
    assert res.output_fidelity == pytest.approx(0.25, abs=1e-12)


def test_depth_one_equals_single_distillation():
    noise = NoiseConfig(generation_fidelity_F=0.85, gate_fidelity_f=0.97)
    a, b = single_distillation(noise), nested_distillation(1, noise)
    assert (a.success_probability, a.output_fidelity, a.final_sim_time) == (
        b.success_probability, b.output_fidelity, b.final_sim_time)


@pytest.mark.parametrize("F", [0.55, 0.7, 0.9])
def test_nesting_is_monotone_with_noiseless_gates(F):
    noise = NoiseConfig(generation_fidelity_F=F, dephasing_time_Tdp=IDEAL_MEMORY)
    fids = [nested_distillation(k, noise).output_fidelity for k in (1, 2, 3)]
    assert F < fids[0] < fids[1] < fids[2]


def test_literal_circuit_degrades_under_nesting():
    # recorded behaviour of the circuit without the basis change
    noise = NoiseConfig(generation_fidelity_F=0.8, dephasing_time_Tdp=IDEAL_MEMORY)
    f1 = nested_distillation(1, noise, rotation="none").output_fidelity
    f2 = nested_distillation(2, noise, rotation="none").output_fidelity
    assert f2 < f1


def test_swap_chain_monte_carlo_within_precision():
    entry = FROZEN["swap_chain_F08"]
    noise = _noise(entry["params"])
    exact = chained_swapping(5, noise)
    mc = chained_swapping(5, noise, backend="mc", trials=10_000, seed=4)
    assert mc.success_probability == 1.0
    assert mc.output_fidelity == pytest.approx(exact.output_fidelity, abs=0.01)


def test_nested_monte_carlo_200_trials_within_3_sigma():
    noise = NoiseConfig(generation_fidelity_F=0.8, dephasing_time_Tdp=IDEAL_MEMORY)
    exact = nested_distillation(2, noise)
    mc = nested_distillation(2, noise, backend="mc", trials=200, seed=6)
    sigma = math.sqrt(exact.success_probability * (1 - exact.success_probability) / 200)
    assert abs(mc.success_probability - exact.success_probability) <= 3 * sigma
