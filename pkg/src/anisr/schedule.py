"""Diffusion noise schedules.

Arrays are indexed by timestep t = 0..T with the convention alpha_bar[0] = 1
(t = 0 is the clean image); beta[0] is a placeholder zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray       # (T+1,), beta[0] unused
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # cumulative product, alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs at least one step")
        body = self.beta[1:]
        if np.any(body <= 0) or np.any(body >= 1):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if self.alpha_bar[0] != 1.0 or np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must start at 1 and strictly decrease")


def make_schedule(kind: str, T: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02, cosine_s: float = 0.008) -> NoiseSchedule:
    """Build a linear or squared-cosine schedule of T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + cosine_s) / (1.0 + cosine_s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-12, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)
