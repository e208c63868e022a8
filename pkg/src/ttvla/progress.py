"""Task-progress estimates and the progress-difference reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .envsim import EnvState, manhattan
from .numkit import ConfigError, Rng

# progress available before grasp, extra progress from transport; the rest
# is only paid on success
APPROACH_WEIGHT = 0.5
TRANSPORT_WEIGHT = 0.4


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = "oracle"
    noise_sd: float = 0.0
    quantization: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy"):
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.kind == "oracle" and self.noise_sd != 0:
            raise ConfigError("oracle estimator must have noise_sd == 0")
        if self.quantization is not None and self.quantization <= 0:
            raise ConfigError("quantization step must be positive")

    @classmethod
    def parse(cls, text: str) -> "EstimatorSpec":
        """``oracle`` or ``noisy:SD``."""
        if text == "oracle":
            return cls()
        if text.startswith("noisy"):
            _, _, sd = text.partition(":")
            return cls(kind="noisy", noise_sd=float(sd) if sd else 0.05)
        raise ConfigError(f"unknown estimator spec {text!r}")

    def __str__(self) -> str:
        return "oracle" if self.kind == "oracle" else f"noisy:{self.noise_sd:g}"


def oracle_progress(
    state: EnvState,
    approach_weight: float = APPROACH_WEIGHT,
    transport_weight: float = TRANSPORT_WEIGHT,
) -> float:
    if state.success:
        return 1.0
    d_max = state.width + state.height - 2
    if state.holding:
        return approach_weight + transport_weight * (1.0 - manhattan(state.obj, state.recep) / d_max)
    return approach_weight * (1.0 - manhattan(state.gripper, state.obj) / d_max)


def estimate(spec: EstimatorSpec, state: EnvState, rng: Optional[Rng] = None) -> float:
    p = oracle_progress(state)
    if spec.noise_sd > 0:
        if rng is None:
            raise ConfigError("noisy estimator needs an rng")
        p += rng.normal(0.0, spec.noise_sd)
    if spec.quantization:
        p = round(round(p / spec.quantization) * spec.quantization, 12)
    return float(min(max(p, 0.0), 1.0))


def dense_reward(p_curr: float, p_prev: float) -> float:
    return p_curr - p_prev


def remaining_value(p_prev: float) -> float:
    return 1.0 - p_prev


def rewards_from_trace(trace) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    return trace[1:] - trace[:-1]
