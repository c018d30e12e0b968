"""Noise models: operation dephasing, Werner generation, memory dephasing, loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .quantum import I2, Z, DensityOperator, KrausChannel, fresh_labels


@dataclass(frozen=True)
class NoiseConfig:
    """Physical noise parameters shared by every link and node.

    Attributes
    ----------
    loss_probability : per-attempt photon loss during EPR generation.
    gate_fidelity_f : dephasing parameter applied after every operation.
    generation_fidelity_F : Werner parameter of freshly generated pairs.
    dephasing_time_Tdp : memory dephasing (T2) time in seconds.
    """

    loss_probability: float = 0.0
    gate_fidelity_f: float = 1.0
    generation_fidelity_F: float = 1.0
    dephasing_time_Tdp: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must lie in [0, 1)")
        if not 0.0 <= self.gate_fidelity_f <= 1.0:
            raise ValueError("gate_fidelity_f must lie in [0, 1]")
        if not 0.0 < self.generation_fidelity_F <= 1.0:
            raise ValueError("generation_fidelity_F must lie in (0, 1]")
        if not (math.isfinite(self.dephasing_time_Tdp) and self.dephasing_time_Tdp > 0):
            raise ValueError("dephasing_time_Tdp must be finite and positive")

    @classmethod
    def noiseless(cls) -> NoiseConfig:
        return cls(dephasing_time_Tdp=1e9)


def _check_unit(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name}={x} outside [0, 1]")


@lru_cache(maxsize=1024)
def dephasing_channel(f: float) -> KrausChannel:
    """rho -> f rho + (1-f) Z rho Z."""
    _check_unit("f", f)
    return KrausChannel((math.sqrt(f) * I2, math.sqrt(1.0 - f) * Z))


def werner_matrix(F: float) -> np.ndarray:
    _check_unit("F", F)
    phi = np.array([1, 0, 0, 1], dtype=np.complex128) / math.sqrt(2)
    proj = np.outer(phi, phi)
    return F * proj + (1.0 - F) / 3.0 * (np.eye(4) - proj)


def werner_state(F: float, labels: Sequence[str] | None = None) -> DensityOperator:
    labels = tuple(labels) if labels is not None else fresh_labels(2)
    return _werner_cached(float(F), labels)


@lru_cache(maxsize=64)
def _werner_cached(F: float, labels: tuple) -> DensityOperator:
    return DensityOperator.from_matrix(werner_matrix(F), labels)


def time_dephasing_lambda(t: float, Tdp: float) -> float:
    """lambda(t) = (1 - exp(-t/Tdp)) / 2."""
    if t < 0:
        raise ValueError("elapsed time must be non-negative")
    if not Tdp > 0:
        raise ValueError("Tdp must be positive")
    return -math.expm1(-t / Tdp) / 2.0


def time_dephasing_channel(t: float, Tdp: float) -> KrausChannel:
    return dephasing_channel(1.0 - time_dephasing_lambda(t, Tdp))


def sample_loss(p: float, rng: np.random.Generator) -> bool:
    _check_unit("p", p)
    return bool(rng.random() < p)


def expected_attempts(p: float) -> int:
    """Deterministic attempt count used by the exact backends."""
    if not 0.0 <= p < 1.0:
        raise ValueError("loss probability must lie in [0, 1)")
    return max(1, math.ceil(1.0 / (1.0 - p) - 1e-12))


def sample_attempts(p: float, rng: np.random.Generator) -> int:
    if not 0.0 <= p < 1.0:
        raise ValueError("loss probability must lie in [0, 1)")
    if p == 0.0:
        return 1
    return int(rng.geometric(1.0 - p))
