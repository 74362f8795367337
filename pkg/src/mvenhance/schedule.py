"""Diffusion noise schedule with variance-preserving coefficients.

``alpha[t]`` is the cumulative signal coefficient and ``sigma[t]`` the noise
coefficient of the forward process x_t = alpha_t * x + sigma_t * eps, with
alpha_0 = 1 and sigma_0 = 0 so level 0 is the identity. Noise levels map
one-to-one onto schedule indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidNoiseLevel


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError(f"schedule needs at least 2 steps, got {self.steps}")
        betas = np.concatenate(
            [[0.0], np.linspace(self.beta_min, self.beta_max, self.steps - 1)]
        )
        signal = np.cumprod(1.0 - betas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", np.sqrt(signal))
        object.__setattr__(self, "sigmas", np.sqrt(1.0 - signal))

    def coefficients(self, t: int):
        """(alpha_t, sigma_t) with bounds checking."""
        t = self.validate_level(t)
        return float(self.alphas[t]), float(self.sigmas[t])

    def validate_level(self, delta) -> int:
        if int(delta) != delta:
            raise InvalidNoiseLevel(f"noise level must be an integer, got {delta!r}")
        delta = int(delta)
        if not 0 <= delta < self.steps:
            raise InvalidNoiseLevel(
                f"noise level {delta} outside schedule range [0, {self.steps - 1}]"
            )
        return delta


def noise_level_to_timestep(delta: int, schedule: NoiseSchedule | None = None) -> int:
    """Identity mapping from the user-facing noise level to a schedule index."""
    schedule = schedule or NoiseSchedule()
    return schedule.validate_level(delta)
