"""Gaussian mechanism on client updates: clipping, noise, and SNR diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("must be > 0", "privacy.epsilon")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("must lie in (0, 1)", "privacy.delta")


@dataclass(frozen=True)
class DPConfig:
    clip: float = 1.0
    sigma: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError("must be > 0", "privacy.clip")
        if self.sigma < 0:
            raise ConfigError("must be >= 0", "privacy.sigma")

    @classmethod
    def from_budget(cls, budget: PrivacyBudget, clip: float = 1.0) -> "DPConfig":
        return cls(clip=clip, sigma=noise_scale(budget), enabled=True)


def noise_scale(budget: PrivacyBudget) -> float:
    """sigma = sqrt(2 ln(1.25 / delta)) / epsilon."""
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) / budget.epsilon


def clip(v, C: float) -> np.ndarray:
    if not C > 0:
        raise ConfigError("clip threshold must be > 0")
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= C:
        return v.copy()
    return v * (C / norm)


def privatize(v, cfg: DPConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip to norm ``cfg.clip`` then add N(0, (sigma * clip)^2) per coordinate."""
    clipped = clip(v, cfg.clip)
    if not cfg.enabled or cfg.sigma == 0.0:
        return clipped
    return clipped + rng.normal(0.0, cfg.sigma * cfg.clip, clipped.shape)


def gradient_snr(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape:
        raise ConfigError(f"shape mismatch {clean.shape} vs {noisy.shape}")
    noise = float(np.linalg.norm(noisy - clean))
    if noise == 0.0:
        return math.inf
    return float(np.linalg.norm(clean)) / noise


def composed_budget(budget: PrivacyBudget, releases: int) -> PrivacyBudget:
    """Basic sequential composition over ``releases`` noisy releases by one client."""
    releases = max(1, int(releases))
    return PrivacyBudget(budget.epsilon * releases, min(budget.delta * releases, 1 - 1e-12))
