"""Seeded randomness primitives shared by every other module.

All stochastic components draw from a :class:`Rng`, which wraps a PCG64
generator seeded through numpy's ``SeedSequence``. Substreams are derived
from stable string names, so parallel consumers (per-experiment data
generation, mask sampling, the log-det estimator, shuffling) stay
deterministic no matter how work is scheduled.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Rng",
    "NoiseKind",
    "NoiseFamily",
    "sample_noise",
    "sample_logistic",
    "logistic_quantile",
    "sample_poisson",
]

_EULER_GAMMA = 0.5772156649015329


class Rng:
    """Deterministic random stream with named, non-interacting substreams."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        self._seq = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def substream(self, name: str) -> "Rng":
        """Derive an independent stream keyed by ``name``.

        Substreams of equal names are identical; draws from one never
        affect another. ``name`` may contain ``/`` to namespace further.
        """
        key = zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, self._spawn_key + (key,))

    # thin pass-throughs to the underlying generator -------------------
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_sign(self, size=None):
        """Random ±1 with equal probability."""
        return self._gen.integers(0, 2, size) * 2 - 1

    def poisson(self, lam, size=None):
        return self._gen.poisson(lam, size)

    def exponential(self, scale, size=None):
        return self._gen.exponential(scale, size)

    def gumbel(self, loc, scale, size=None):
        return self._gen.gumbel(loc, scale, size)


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"
    GUMBEL = "gumbel"


@dataclass(frozen=True)
class NoiseFamily:
    """Exogenous noise family.

    Parameter meaning by kind: Gaussian -> (mean, variance),
    Exponential -> (rate, unused), Gumbel -> (location, scale).
    """

    kind: NoiseKind
    param1: float = 0.0
    param2: float = 1.0

    def __post_init__(self):
        k = NoiseKind(self.kind)
        object.__setattr__(self, "kind", k)
        if k is NoiseKind.GAUSSIAN and not self.param2 > 0:
            raise ValueError(f"Gaussian variance must be positive, got {self.param2}")
        if k is NoiseKind.EXPONENTIAL and not self.param1 > 0:
            raise ValueError(f"Exponential rate must be positive, got {self.param1}")
        if k is NoiseKind.GUMBEL and not self.param2 > 0:
            raise ValueError(f"Gumbel scale must be positive, got {self.param2}")

    @property
    def mean(self) -> float:
        if self.kind is NoiseKind.GAUSSIAN:
            return self.param1
        if self.kind is NoiseKind.EXPONENTIAL:
            return 1.0 / self.param1
        return self.param1 + self.param2 * _EULER_GAMMA

    @property
    def variance(self) -> float:
        if self.kind is NoiseKind.GAUSSIAN:
            return self.param2
        if self.kind is NoiseKind.EXPONENTIAL:
            return 1.0 / self.param1**2
        return (np.pi**2 / 6.0) * self.param2**2


def sample_noise(family: NoiseFamily, shape, rng: Rng) -> np.ndarray:
    """Draw i.i.d. noise with the family's parameters."""
    if family.kind is NoiseKind.GAUSSIAN:
        return rng.normal(family.param1, np.sqrt(family.param2), shape)
    if family.kind is NoiseKind.EXPONENTIAL:
        return rng.exponential(1.0 / family.param1, shape)
    return rng.gumbel(family.param1, family.param2, shape)


def logistic_quantile(u):
    """Quantile of the standard logistic: log u - log(1-u)."""
    u = np.asarray(u, dtype=np.float64)
    return np.log(u) - np.log1p(-u)


def sample_logistic(rng: Rng, shape=None) -> np.ndarray:
    """Standard logistic draws (difference of two Gumbels).

    Used as the reparameterization noise for binary Gumbel-sigmoid masks.
    """
    u = rng.random(shape)
    # random() yields [0, 1); keep the quantile finite at the boundary.
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    return logistic_quantile(u)


def sample_poisson(mean: float, rng: Rng, size=None):
    """Poisson draws; callers guard the series cutoff with max(n, 1)."""
    if not mean > 0:
        raise ValueError(f"Poisson mean must be positive, got {mean}")
    return rng.poisson(mean, size)
