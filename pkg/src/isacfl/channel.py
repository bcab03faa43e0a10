"""Complex channel primitives: array steering, radar target responses, Rician draws.

All randomness flows through explicit :class:`RngStream` values so that every
draw is reproducible bit-for-bit regardless of thread count or call order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# Treat the scattered component as exactly zero above this K-factor.
PURE_LOS_K = 1e12


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Value-typed random stream: (seed, stream) fully determines all draws."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & _MASK64, self.stream & _MASK64])))

    def child(self, index: int) -> "RngStream":
        """Derive a statistically independent substream (pure integer mixing)."""
        return RngStream(self.seed, _splitmix64((self.stream * 0x9E3779B97F4A7C15 + index + 1) & _MASK64))


@dataclass(frozen=True)
class SteeringConfig:
    """Uniform linear array geometry."""

    n_elements: int
    element_spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if self.n_elements < 1:
            raise ValueError(f"n_elements must be >= 1, got {self.n_elements}")
        if not self.element_spacing_wavelengths > 0:
            raise ValueError(f"element spacing must be > 0, got {self.element_spacing_wavelengths}")


def steering_vector(theta: float, cfg: SteeringConfig) -> np.ndarray:
    """ULA steering vector toward angle ``theta`` (radians, broadside = 0).

    Entry i is exp(j 2*pi * spacing * i * sin(theta)); entry 0 is always 1.
    """
    if not -np.pi / 2 <= theta <= np.pi / 2:
        raise ValueError(f"theta must lie in [-pi/2, pi/2], got {theta}")
    idx = np.arange(cfg.n_elements)
    phase = 2.0 * np.pi * cfg.element_spacing_wavelengths * idx * np.sin(theta)
    return np.exp(1j * phase)


def target_response(beta: complex, theta: float, rx_cfg: SteeringConfig, tx_cfg: SteeringConfig) -> np.ndarray:
    """Rank-1 radar target channel: beta * a(theta) b(theta)^H, shape (N_R, N_T)."""
    a = steering_vector(theta, rx_cfg)
    b = steering_vector(theta, tx_cfg)
    return beta * np.outer(a, b.conj())


def sample_rician(rng: RngStream, rows: int, cols: int, k_factor: float, mean_power: float = 1.0) -> np.ndarray:
    """Draw one Rician-fading matrix with per-entry mean power ``mean_power``.

    The line-of-sight term is a single random phase shared by all entries of
    the matrix; the scattered term is circularly-symmetric complex Gaussian
    with unit variance. Draw order (phase first, then scatter) is part of the
    determinism contract.
    """
    if k_factor < 0:
        raise ValueError(f"k_factor must be >= 0, got {k_factor}")
    if not mean_power > 0:
        raise ValueError(f"mean_power must be > 0, got {mean_power}")
    gen = rng.generator()
    phi = gen.uniform(0.0, 2.0 * np.pi)
    los = np.exp(1j * phi) * np.ones((rows, cols))
    if k_factor >= PURE_LOS_K:
        return np.sqrt(mean_power) * los
    scatter = gen.standard_normal((rows, cols)) + 1j * gen.standard_normal((rows, cols))
    scatter *= np.sqrt(0.5)
    h = np.sqrt(k_factor / (k_factor + 1.0)) * los + np.sqrt(1.0 / (k_factor + 1.0)) * scatter
    return np.sqrt(mean_power) * h


def sample_rcs(rng: RngStream, alpha_s: float) -> complex:
    """Complex Gaussian radar cross section draw with E|beta|^2 = alpha_s."""
    if not alpha_s > 0:
        raise ValueError(f"alpha_s must be > 0, got {alpha_s}")
    gen = rng.generator()
    re, im = gen.standard_normal(2)
    return complex(np.sqrt(alpha_s / 2.0) * (re + 1j * im))
