"""Gating-variable kinetics and the bundled channel libraries.

Every voltage function in this module is a numba-compiled scalar function
``float64(float64)``.  They are plain callables from Python and can also be
passed into the compiled simulation kernels, so the simulator and the
predictor evaluate exactly the same arithmetic.

Voltages are in mV, times in ms, rates in 1/ms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional

import numpy as np
from numba import njit, types
from numba.core.errors import NumbaExperimentalFeatureWarning

warnings.filterwarnings("ignore", category=NumbaExperimentalFeatureWarning)

SCALAR_SIG = types.float64(types.float64)

#: Voltage range used for all grid-based checks (mV).
V_RANGE = (-120.0, 120.0)

# Removable singularities of x/(exp(x/s) - 1) are replaced by their limit
# within this distance of the singular voltage.
GUARD_BAND = 1e-7

VoltageFn = Callable[[float], float]


class KineticsDomainError(ValueError):
    """Raised when rate functions give a non-positive or non-finite sum."""


def voltage_grid(v_range=V_RANGE, step: float = 1.0) -> np.ndarray:
    lo, hi = v_range
    n = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


@njit
def _map(fn, v):
    out = np.empty(v.size)
    for i in range(v.size):
        out[i] = fn(v[i])
    return out


def evaluate(fn: VoltageFn, v) -> np.ndarray:
    """Evaluate a compiled voltage function on an array of voltages."""
    arr = np.ascontiguousarray(np.asarray(v, dtype=np.float64).ravel())
    return _map(fn, arr).reshape(np.shape(v))


# --- elementary shapes ------------------------------------------------------


def linoid(scale: float, v_half: float, slope: float) -> VoltageFn:
    """``scale * x / (exp(x/slope) - 1)`` with ``x = v_half - v``."""
    limit = scale * slope

    @njit(SCALAR_SIG)
    def rate(v):
        x = v_half - v
        if abs(x) < GUARD_BAND:
            return limit
        return scale * x / (math.exp(x / slope) - 1.0)

    return rate


def exponential(scale: float, v_half: float, slope: float) -> VoltageFn:
    """``scale * exp((v_half - v)/slope)``."""

    @njit(SCALAR_SIG)
    def rate(v):
        return scale * math.exp((v_half - v) / slope)

    return rate


def sigmoid(scale: float, v_half: float, slope: float) -> VoltageFn:
    """``scale / (exp((v_half - v)/slope) + 1)``."""

    @njit(SCALAR_SIG)
    def rate(v):
        return scale / (math.exp((v_half - v) / slope) + 1.0)

    return rate


def constant(value: float) -> VoltageFn:
    @njit(SCALAR_SIG)
    def fn(v):
        return value

    return fn


# --- kinetic types ----------------------------------------------------------


@dataclass(frozen=True)
class RateFunctions:
    """Opening rate ``alpha(v)`` and closing rate ``beta(v)`` of one gate."""

    alpha: VoltageFn
    beta: VoltageFn


@dataclass(frozen=True)
class GateKinetics:
    """First-order lag ``dx/dt = (x_inf(v) - x) / tau(v)`` raised to ``exponent``."""

    tau: VoltageFn
    x_inf: VoltageFn
    exponent: int

    def __post_init__(self):
        if self.exponent < 0:
            raise ValueError("gate exponent must be non-negative")

    def tau_range(self, v_range=V_RANGE) -> tuple:
        t = evaluate(self.tau, voltage_grid(v_range))
        return float(t.min()), float(t.max())


@dataclass(frozen=True)
class ChannelKinetics:
    """Activation gate plus optional inactivation gate.

    ``inactivation=None`` means the inactivation factor is identically one.
    """

    activation: GateKinetics
    inactivation: Optional[GateKinetics] = None

    @property
    def gates(self) -> List[GateKinetics]:
        """Gates with a positive exponent, activation first."""
        out = []
        for gate in (self.activation, self.inactivation):
            if gate is not None and gate.exponent > 0:
                out.append(gate)
        return out

    @property
    def exponents(self) -> tuple:
        beta = 0 if self.inactivation is None else self.inactivation.exponent
        return (self.activation.exponent, beta)


def from_rates(rates: RateFunctions, exponent: int = 1, check_grid=None) -> GateKinetics:
    """Build ``tau = 1/(alpha+beta)`` and ``x_inf = alpha/(alpha+beta)``.

    ``check_grid`` lists voltages at which ``alpha + beta`` must be finite and
    positive; the working grid is used when omitted.
    """
    alpha, beta = rates.alpha, rates.beta
    grid = voltage_grid() if check_grid is None else np.asarray(check_grid, dtype=float)
    total = evaluate(alpha, grid) + evaluate(beta, grid)
    bad = ~np.isfinite(total) | (total <= 0.0)
    if bad.any():
        raise KineticsDomainError(
            f"alpha + beta is not finite and positive at v = {grid[bad][0]!r} mV"
        )

    @njit(SCALAR_SIG)
    def tau(v):
        return 1.0 / (alpha(v) + beta(v))

    @njit(SCALAR_SIG)
    def x_inf(v):
        a = alpha(v)
        return a / (a + beta(v))

    return GateKinetics(tau=tau, x_inf=x_inf, exponent=exponent)


# --- Hodgkin-Huxley ---------------------------------------------------------


def _hh_na() -> ChannelKinetics:
    m = RateFunctions(linoid(0.1, -40.0, 10.0), exponential(4.0, -65.0, 18.0))
    h = RateFunctions(exponential(0.07, -65.0, 20.0), sigmoid(1.0, -35.0, 10.0))
    return ChannelKinetics(from_rates(m, 3), from_rates(h, 1))


def _hh_k() -> ChannelKinetics:
    n = RateFunctions(linoid(0.01, -55.0, 10.0), exponential(0.125, -65.0, 80.0))
    return ChannelKinetics(from_rates(n, 4))


# --- Connor-Stevens ---------------------------------------------------------


def _cs_na() -> ChannelKinetics:
    m = RateFunctions(linoid(0.38, -29.7, 10.0), exponential(15.2, -54.7, 18.0))
    h = RateFunctions(exponential(0.266, -48.0, 20.0), sigmoid(3.8, -18.0, 10.0))
    return ChannelKinetics(from_rates(m, 3), from_rates(h, 1))


def _cs_k() -> ChannelKinetics:
    n = RateFunctions(linoid(0.019, -45.7, 10.0), exponential(0.2375, -55.7, 80.0))
    return ChannelKinetics(from_rates(n, 4))


@njit(SCALAR_SIG)
def _cs_a_tau_m(v):
    return 0.3632 + 1.158 / (1.0 + math.exp((v + 55.96) / 20.12))


@njit(SCALAR_SIG)
def _cs_a_m_inf(v):
    x = 0.0761 * math.exp((v + 94.22) / 31.84) / (1.0 + math.exp((v + 1.17) / 28.93))
    # the published expression peaks at ~1.014 near +65 mV
    return min(x ** (1.0 / 3.0), 1.0)


@njit(SCALAR_SIG)
def _cs_a_tau_h(v):
    return 1.24 + 2.678 / (1.0 + math.exp((v + 50.0) / 16.027))


@njit(SCALAR_SIG)
def _cs_a_h_inf(v):
    return 1.0 / (1.0 + math.exp((v + 53.3) / 14.54)) ** 4


@njit(SCALAR_SIG)
def _cs_ca_m_inf(v):
    return 1.0 / (1.0 + math.exp(-0.15 * (v + 50.0)))


def _cs_a() -> ChannelKinetics:
    return ChannelKinetics(
        GateKinetics(_cs_a_tau_m, _cs_a_m_inf, 3),
        GateKinetics(_cs_a_tau_h, _cs_a_h_inf, 1),
    )


def _cs_ca() -> ChannelKinetics:
    return ChannelKinetics(GateKinetics(constant(2.35), _cs_ca_m_inf, 2))


_BUILDERS: Dict[str, Callable[[], ChannelKinetics]] = {
    "hh.na": _hh_na,
    "hh.k": _hh_k,
    "cs.na": _cs_na,
    "cs.k": _cs_k,
    "cs.a": _cs_a,
    "cs.ca": _cs_ca,
}


@lru_cache(maxsize=None)
def channel(key: str) -> ChannelKinetics:
    """Look up a library channel by its stable name (e.g. ``"hh.na"``)."""
    try:
        builder = _BUILDERS[key]
    except KeyError:
        raise KeyError(f"unknown channel kinetics {key!r}; known: {sorted(_BUILDERS)}") from None
    return builder()


def library_keys() -> List[str]:
    return list(_BUILDERS)


def hh_library() -> List[ChannelKinetics]:
    """Sodium (m^3 h) and potassium (n^4) channels of Hodgkin-Huxley."""
    return [channel("hh.na"), channel("hh.k")]


def cs_library() -> List[ChannelKinetics]:
    """Na, delayed-rectifier K, A-type K and Ca channels of Connor-Stevens."""
    return [channel(k) for k in ("cs.na", "cs.k", "cs.a", "cs.ca")]


def tau_bounds(channels, v_range=V_RANGE) -> tuple:
    """Smallest and largest time constant over all gates on the voltage grid."""
    lo, hi = math.inf, -math.inf
    for ch in channels:
        for gate in ch.gates:
            a, b = gate.tau_range(v_range)
            lo, hi = min(lo, a), max(hi, b)
    return lo, hi
