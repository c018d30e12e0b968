"""Regenerate the frozen regression fixtures under tests/fixtures.

Every number here comes from the branch-enumeration oracle, which is
independent of the CFA executor. Run from the repository root:

    python3 scripts/generate_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from qnetcfa.cli import CSV_FIELDS, dump_circuit, make_instance
from qnetcfa.noise import NoiseConfig
from qnetcfa.protocols import run_oracle, teleportation_instance
from qnetcfa.quantum import PureState

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# distillation: F = 0.8, noiseless gates, long-lived memories
DISTILL = {"F_gen": 0.8, "f_gate": 1.0, "Tdp_s": 1.0, "loss_p": 0.0, "latency_s": 1e-3}
DISTILL_IDEAL = {"F_gen": 0.8, "f_gate": 1.0, "Tdp_s": 1e9, "loss_p": 0.0, "latency_s": 1e-3}
# swap chain: only generation noise plus default memories
SWAP = {"F_gen": 0.9, "f_gate": 1.0, "Tdp_s": 0.01, "loss_p": 0.0, "latency_s": 1e-3}
# only generation noise, memories effectively perfect
IDEAL_F08 = {"F_gen": 0.8, "f_gate": 1.0, "Tdp_s": 1e9, "loss_p": 0.0, "latency_s": 1e-3}
TELEPORT = {"F_gen": 0.8, "f_gate": 1.0, "Tdp_s": 1e9, "loss_p": 0.0, "latency_s": 1e-3}


def _noise(p: dict) -> NoiseConfig:
    return NoiseConfig(p["loss_p"], p["f_gate"], p["F_gen"], p["Tdp_s"])


def _oracle(protocol: str, size: int, params: dict) -> dict:
    res = run_oracle(make_instance(protocol, size, _noise(params), params["latency_s"]))
    return {"size": size, "success_prob": res.success_probability, "fidelity": res.output_fidelity}


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    plus = PureState(("s",), np.array([1.0, 1.0]) / np.sqrt(2))
    tele_plus = run_oracle(teleportation_instance(plus, _noise(IDEAL_F08), IDEAL_F08["latency_s"]))
    data = {
        "generator": "scripts/generate_fixtures.py (branch enumeration oracle)",
        "distill_nested": {"params": DISTILL, "points": [_oracle("distill_nested", k, DISTILL) for k in (1, 2, 3)]},
        "distill_nested_ideal_memory": {
            "params": DISTILL_IDEAL, "points": [_oracle("distill_nested", k, DISTILL_IDEAL) for k in (1, 2)],
        },
        "swap_chain": {"params": SWAP, "points": [_oracle("swap_chain", n, SWAP) for n in (3, 4, 5, 6)]},
        "teleport": {"params": TELEPORT, "points": [_oracle("teleport", d, TELEPORT) for d in (0, 1)]},
        "swap_chain_F08": {"params": IDEAL_F08, "points": [_oracle("swap_chain", 3, IDEAL_F08)]},
        "teleport_plus": {
            "params": IDEAL_F08,
            "points": [{"size": 0, "success_prob": tele_plus.success_probability, "fidelity": tele_plus.output_fidelity}],
        },
    }
    (OUT / "oracle_values.json").write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    (OUT / "swap_chain_5_chain.txt").write_text(dump_circuit("swap_chain", 5, "chain"), encoding="utf-8")
    (OUT / "csv_header.txt").write_text(",".join(CSV_FIELDS) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
