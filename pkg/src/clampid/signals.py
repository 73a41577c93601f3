"""Excitation and noise sequences for the identification experiments.

Gaussian samples come from numpy's Philox counter-based generator keyed by
``(seed, stream)``, so every sequence is reproducible on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

#: Stream identifiers, keeping reference and noise draws independent.
REFERENCE_STREAM = 0
NOISE_STREAM = 1


def philox(seed: int, stream: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``."""
    ss = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def gaussian(seed: int, stream: int, n: int) -> np.ndarray:
    return philox(seed, stream).standard_normal(n)


def zoh_second_order_lag(pole: float, ts: float, gain: float = 1.0):
    """Exact zero-order-hold discretization of ``gain * pole^2 / (s + pole)^2``.

    Returns ``(b, a)`` for :func:`scipy.signal.lfilter`: ``b = (0, b1, b2)``,
    ``a = (1, a1, a2)``.  Both discrete poles sit at ``exp(-pole*ts)``.
    """
    if not (pole > 0 and ts > 0):
        raise ValueError("pole and ts must be positive")
    p = math.exp(-pole * ts)
    q = pole * ts
    b1 = 1.0 - p - q * p
    b2 = p * (p - 1.0 + q)
    return np.array([0.0, gain * b1, gain * b2]), np.array([1.0, -2.0 * p, p * p])


def continuous_step_response(pole: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 1.0 - (1.0 + pole * t) * np.exp(-pole * t)


@dataclass(frozen=True)
class FilteredNoiseSpec:
    """Reference ``offset + clip(H(q) * sigma * N(0,1), +-truncation)``.

    ``pole`` is in 1/ms (simulation time unit).
    """

    offset: float = -45.0
    sigma: float = 100.0
    truncation: float = 100.0
    pole: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class WhiteNoiseSpec:
    sigma: float = 2.5
    truncation: float = 20.0
    seed: int = 0


class ReferenceStream:
    """Draws consecutive chunks of the reference; chunking does not change values."""

    def __init__(self, spec: FilteredNoiseSpec, ts: float):
        self.spec = spec
        self._rng = philox(spec.seed, REFERENCE_STREAM)
        self._b, self._a = zoh_second_order_lag(spec.pole, ts)
        self._zi = np.zeros(2)

    def take(self, n: int) -> np.ndarray:
        spec = self.spec
        if spec.sigma == 0:
            return np.full(n, float(spec.offset))
        raw = spec.sigma * self._rng.standard_normal(n)
        shaped, self._zi = lfilter(self._b, self._a, raw, zi=self._zi)
        return spec.offset + np.clip(shaped, -spec.truncation, spec.truncation)


class NoiseStream:
    def __init__(self, spec: WhiteNoiseSpec):
        self.spec = spec
        self._rng = philox(spec.seed, NOISE_STREAM)

    def take(self, n: int) -> np.ndarray:
        spec = self.spec
        if spec.sigma == 0:
            return np.zeros(n)
        raw = spec.sigma * self._rng.standard_normal(n)
        return np.clip(raw, -spec.truncation, spec.truncation)


def generate_reference(spec: FilteredNoiseSpec, n: int, ts: float) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    return ReferenceStream(spec, ts).take(n)


def generate_noise(spec: WhiteNoiseSpec, n: int) -> np.ndarray:
    return NoiseStream(spec).take(n)


def snr_db(y, e, c: float = 1.0) -> float:
    """Ratio of the noise-free output power to the noise power, in dB.

    ``y`` is the measured inverse-dynamics output, which contains ``-e/c``;
    the noise-free part is ``y + e/c``.  Returns ``inf`` when ``e`` is zero.
    """
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    if y.shape != e.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {e.shape}")
    noise = e / c
    p_noise = np.var(noise)
    if p_noise == 0:
        return math.inf
    return float(10.0 * np.log10(np.var(y + noise) / p_noise))


def autocorrelation(x, lag: int) -> float:
    x = np.asarray(x, dtype=float) - np.mean(x)
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))


class RunningVariance:
    """Chunk-wise mean/variance accumulator (pairwise merge)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return
        n_b, mean_b = x.size, float(np.mean(x))
        m2_b = float(np.sum((x - mean_b) ** 2))
        n = self.n + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.n * n_b / n
        self.n = n

    @property
    def variance(self) -> float:
        return self.m2 / self.n if self.n else 0.0


class SnrAccumulator:
    """Streaming version of :func:`snr_db`."""

    def __init__(self, c: float = 1.0):
        self.c = c
        self._signal = RunningVariance()
        self._noise = RunningVariance()

    def update(self, y, e) -> None:
        y = np.asarray(y, dtype=float)
        noise = np.asarray(e, dtype=float) / self.c
        if y.shape != noise.shape:
            raise ValueError(f"length mismatch: {y.shape} vs {noise.shape}")
        self._signal.update(y + noise)
        self._noise.update(noise)

    @property
    def value(self) -> float:
        if self._noise.variance == 0:
            return math.inf
        return float(10.0 * np.log10(self._signal.variance / self._noise.variance))
