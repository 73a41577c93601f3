"""Conductance-based membrane models and their forward-Euler closed loop.

The data-generating system is the discrete-time voltage-clamp loop

    c (v[k+1] - v[k]) / ts = -g(v[k], w[k]) + gamma (r[k] - v[k]) + e[k]
        (w[k+1] - w[k]) / ts = A(v[k]) w[k] + b(v[k])

Gate state vectors are ordered (m1, h1, m2, h2, ...) with absent gates
skipped.  The same ordering is used by the estimator's regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from numba import njit

from . import kinetics as kin
from .kinetics import ChannelKinetics

#: Voltages beyond this multiple of the working range count as divergence.
DIVERGENCE_FACTOR = 10.0


class ConfigurationError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"membrane voltage left the working range at step {step} (v = {value!r} mV)")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class Channel:
    """One ionic current ``g_max * m^a * h^b * (v - nu)``."""

    g_max: float
    nu: float
    kinetics: ChannelKinetics
    key: str = ""


@dataclass(frozen=True)
class GateLayout:
    """Flattened gate description shared by the simulator and the predictor."""

    taus: tuple
    x_infs: tuple
    channel_of: np.ndarray
    exponent: np.ndarray
    n_channels: int

    @property
    def n_gates(self) -> int:
        return len(self.taus)


def gate_layout(channels: Sequence[ChannelKinetics]) -> GateLayout:
    taus, x_infs, owner, expo = [], [], [], []
    for j, ch in enumerate(channels):
        for gate in ch.gates:
            taus.append(gate.tau)
            x_infs.append(gate.x_inf)
            owner.append(j)
            expo.append(gate.exponent)
    if not taus:
        raise ConfigurationError("at least one gate with a positive exponent is required")
    return GateLayout(
        taus=tuple(taus),
        x_infs=tuple(x_infs),
        channel_of=np.asarray(owner, dtype=np.int64),
        exponent=np.asarray(expo, dtype=np.int64),
        n_channels=len(channels),
    )


def steady_gates(channels: Sequence[ChannelKinetics], v: float) -> np.ndarray:
    """Gate vector at its voltage-clamped fixed point ``x_inf(v)``."""
    return np.array([g.x_inf(float(v)) for ch in channels for g in ch.gates])


@dataclass(frozen=True)
class ConductanceModel:
    c: float
    leak_g: float
    leak_nu: float
    channels: Tuple[Channel, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.c > 0:
            raise ConfigurationError("capacitance must be positive")
        if not self.leak_g > 0:
            raise ConfigurationError("leak conductance must be positive")
        if any(ch.g_max < 0 for ch in self.channels):
            raise ConfigurationError("maximal conductances must be non-negative")

    @property
    def kinetics(self) -> list:
        return [ch.kinetics for ch in self.channels]

    @property
    def layout(self) -> GateLayout:
        return gate_layout(self.kinetics)

    @property
    def n_gates(self) -> int:
        return sum(len(ch.kinetics.gates) for ch in self.channels)

    @property
    def g_max(self) -> np.ndarray:
        return np.array([ch.g_max for ch in self.channels], dtype=float)

    @property
    def nu(self) -> np.ndarray:
        return np.array([ch.nu for ch in self.channels], dtype=float)

    def steady_gates(self, v: float) -> np.ndarray:
        return steady_gates(self.kinetics, v)

    def tau_bounds(self, v_range=kin.V_RANGE) -> tuple:
        return kin.tau_bounds(self.kinetics, v_range)

    def theta(self) -> np.ndarray:
        """Parameter vector of the inverse dynamics, regressor column order."""
        g = np.concatenate([[self.leak_g], self.g_max])
        nu = np.concatenate([[self.leak_nu], self.nu])
        return np.concatenate([-g * nu / self.c, g / self.c, [-1.0 / self.c]])


# --- compiled kernels ---------------------------------------------------------


@njit
def _gate_products(w, channel_of, exponent, out):
    out[:] = 1.0
    for i in range(w.size):
        out[channel_of[i]] *= w[i] ** exponent[i]


@njit
def _current(v, prod, g_max, nu, leak_g, leak_nu):
    g = leak_g * (v - leak_nu)
    for j in range(g_max.size):
        g += g_max[j] * prod[j] * (v - nu[j])
    return g


@njit
def _gate_update(taus, x_infs, w, v, ts, out):
    for i in range(len(taus)):
        step = ts / taus[i](v)
        out[i] = w[i] * (1.0 - step) + step * x_infs[i](v)


@njit
def _simulate(taus, x_infs, channel_of, exponent, g_max, nu, leak_g, leak_nu,
              c, gamma, ts, r, e, v_limit, v_out, w_out):
    prod = np.empty(g_max.size)
    for k in range(r.size):
        v = v_out[k]
        _gate_products(w_out[k], channel_of, exponent, prod)
        g = _current(v, prod, g_max, nu, leak_g, leak_nu)
        v_out[k + 1] = v + ts / c * (-g + gamma * (r[k] - v) + e[k])
        _gate_update(taus, x_infs, w_out[k], v, ts, w_out[k + 1])
        if not abs(v_out[k + 1]) <= v_limit:
            return k + 1
    return -1


@njit
def _drive_gates(taus, x_infs, v, ts, w_out):
    for k in range(v.size - 1):
        _gate_update(taus, x_infs, w_out[k], v[k], ts, w_out[k + 1])


@njit
def _products_along(w, channel_of, exponent, n_channels):
    out = np.empty((w.shape[0], n_channels))
    for k in range(w.shape[0]):
        _gate_products(w[k], channel_of, exponent, out[k])
    return out


def drive_gates(layout: GateLayout, v: np.ndarray, w0, ts: float) -> np.ndarray:
    """Gate trajectory driven open-loop by a voltage sequence.

    Row ``k`` is the gate vector at step ``k``; the last voltage sample is not
    used since it only affects the state after the sequence ends.
    """
    v = np.ascontiguousarray(v, dtype=np.float64)
    w = np.empty((v.size, layout.n_gates))
    w[0] = w0
    _drive_gates(layout.taus, layout.x_infs, v, float(ts), w)
    return w


def gate_products(layout: GateLayout, w: np.ndarray) -> np.ndarray:
    """Per-channel products ``m^a h^b`` for every row of ``w``."""
    w = np.ascontiguousarray(np.atleast_2d(w), dtype=np.float64)
    return _products_along(w, layout.channel_of, layout.exponent, layout.n_channels)


# --- public API ---------------------------------------------------------------


def internal_current(model: ConductanceModel, v: float, w) -> float:
    """Total membrane current ``g(v, w)`` (uA/cm^2)."""
    layout = model.layout
    prod = np.empty(layout.n_channels)
    _gate_products(np.asarray(w, dtype=np.float64), layout.channel_of, layout.exponent, prod)
    return float(_current(float(v), prod, model.g_max, model.nu, model.leak_g, model.leak_nu))


def gate_step(channels: Sequence[ChannelKinetics], w, v: float, ts: float) -> np.ndarray:
    """One forward-Euler step of the gating dynamics at fixed voltage."""
    layout = gate_layout(channels)
    out = np.empty(layout.n_gates)
    _gate_update(layout.taus, layout.x_infs, np.asarray(w, dtype=np.float64), float(v), float(ts), out)
    return out


@dataclass
class ClosedLoopConfig:
    """Feedback gain (mS/cm^2), sampling period (ms), initial state and length.

    ``gamma = 0`` is accepted to simulate the open loop.  ``v_range`` is the
    voltage interval over which ``ts <= tau_min`` is enforced.
    """

    gamma: float
    ts: float
    steps: int
    v0: float = -65.0
    w0: Optional[np.ndarray] = None
    v_range: tuple = kin.V_RANGE

    def validate(self, model: ConductanceModel) -> None:
        if self.gamma < 0:
            raise ConfigurationError("feedback gain must be non-negative")
        if not self.ts > 0:
            raise ConfigurationError("sampling period must be positive")
        if self.steps < 1:
            raise ConfigurationError("need at least one step")
        tau_min, _ = model.tau_bounds(self.v_range)
        if self.ts > tau_min:
            raise ConfigurationError(
                f"ts = {self.ts} ms exceeds the smallest gate time constant "
                f"{tau_min:.6g} ms on {self.v_range} mV; gates could leave [0, 1]"
            )
        if self.w0 is not None:
            w0 = np.asarray(self.w0, dtype=float)
            if w0.shape != (model.n_gates,):
                raise ConfigurationError(f"w0 must have {model.n_gates} entries")
            if np.any(w0 < 0) or np.any(w0 > 1):
                raise ConfigurationError("initial gates must lie in [0, 1]")

    def initial_gates(self, model: ConductanceModel) -> np.ndarray:
        if self.w0 is None:
            return model.steady_gates(self.v0)
        return np.asarray(self.w0, dtype=float).copy()


@dataclass
class Trajectory:
    """Closed-loop record.

    ``v`` and ``w`` hold ``N + 1`` states, the inputs ``r``, ``e`` and the
    output ``y = -(v[k+1] - v[k]) / ts`` hold ``N`` samples.
    """

    ts: float
    gamma: float
    v: np.ndarray
    w: np.ndarray
    r: np.ndarray
    e: np.ndarray
    y: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.y is None:
            self.y = forward_difference(self.v, self.ts)

    def __len__(self):
        return self.r.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.v.size) * self.ts

    @property
    def u1(self) -> np.ndarray:
        """Injected clamp current ``gamma (r - v)``."""
        return self.gamma * (self.r - self.v[:-1])

    @property
    def u2(self) -> np.ndarray:
        return self.v[:-1]

    def segment(self, start: int, stop: Optional[int] = None) -> "Trajectory":
        """Samples ``start..stop-1`` (states up to ``stop``)."""
        stop = len(self) if stop is None else stop
        return Trajectory(
            ts=self.ts,
            gamma=self.gamma,
            v=self.v[start:stop + 1].copy(),
            w=self.w[start:stop + 1].copy(),
            r=self.r[start:stop].copy(),
            e=self.e[start:stop].copy(),
            y=self.y[start:stop].copy(),
        )

    def to_csv(self, path) -> None:
        n = len(self)
        nan = np.full(1, np.nan)
        u1 = np.concatenate([self.u1, nan])
        cols = [
            np.arange(n + 1),
            self.t,
            self.v,
            np.concatenate([self.r, nan]),
            np.concatenate([self.e, nan]),
            u1,
            self.v,
            np.concatenate([self.y, nan]),
        ]
        data = np.column_stack(cols + [self.w[:, i] for i in range(self.w.shape[1])])
        header = ",".join(
            ["k", "t", "v", "r", "e", "u1", "u2", "y"] + [f"w_{i}" for i in range(self.w.shape[1])]
        )
        fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path, gamma: Optional[float] = None) -> "Trajectory":
        """Read a trajectory written by :meth:`to_csv`.

        The feedback gain is recovered from ``u1 = gamma (r - v)`` unless
        given explicitly.
        """
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] < 2:
            raise ValueError("trajectory file needs at least two rows")
        t, v, r, e, u1, y = data[:, 1], data[:, 2], data[:-1, 3], data[:-1, 4], data[:-1, 5], data[:-1, 7]
        ts = float(t[1] - t[0])
        if gamma is None:
            diff = r - v[:-1]
            i = int(np.argmax(np.abs(diff)))
            gamma = float(u1[i] / diff[i]) if diff[i] != 0 else 0.0
        return cls(ts=ts, gamma=gamma, v=v, w=data[:, 8:], r=r, e=e, y=y)


def forward_difference(v: np.ndarray, ts: float) -> np.ndarray:
    return -(v[1:] - v[:-1]) / ts


def forward_difference_output(traj: Trajectory) -> np.ndarray:
    """Inverse-dynamics output ``y_k = -(v[k+1] - v[k]) / ts``."""
    if traj.v.size < 2:
        raise ValueError("trajectory must contain at least two voltage samples")
    return forward_difference(traj.v, traj.ts)


def simulate_closed_loop(
    model: ConductanceModel,
    config: ClosedLoopConfig,
    reference,
    noise,
) -> Trajectory:
    """Run the forward-Euler voltage-clamp loop for ``config.steps`` steps.

    ``reference`` and ``noise`` may be scalars (held constant) or sequences
    of at least ``config.steps`` samples.  Raises :class:`SimulationDiverged`
    when ``|v|`` exceeds ten times the working range.
    """
    config.validate(model)
    n = config.steps
    r = _as_input(reference, n, "reference")
    e = _as_input(noise, n, "noise")
    layout = model.layout
    v = np.empty(n + 1)
    w = np.empty((n + 1, layout.n_gates))
    v[0] = config.v0
    w[0] = config.initial_gates(model)
    v_limit = DIVERGENCE_FACTOR * max(abs(x) for x in kin.V_RANGE)
    bad = _simulate(
        layout.taus, layout.x_infs, layout.channel_of, layout.exponent,
        model.g_max, model.nu, float(model.leak_g), float(model.leak_nu),
        float(model.c), float(config.gamma), float(config.ts), r, e, v_limit, v, w,
    )
    if bad >= 0:
        raise SimulationDiverged(bad, float(v[bad]))
    return Trajectory(ts=config.ts, gamma=config.gamma, v=v, w=w, r=r, e=e)


def _as_input(x, n: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.size < n:
        raise ConfigurationError(f"{name} has {arr.size} samples, {n} required")
    return np.ascontiguousarray(arr[:n])


def steady_state_periodic_deviation(v: np.ndarray, period: int, cycles: int = 3) -> float:
    """Largest cycle-to-cycle voltage change over the last ``cycles`` periods."""
    tail = v[-(cycles + 1) * period:]
    if tail.size < (cycles + 1) * period:
        raise ValueError("trajectory shorter than the requested number of cycles")
    blocks = tail.reshape(cycles + 1, period)
    return float(np.max(np.abs(np.diff(blocks, axis=0))))


def spike_count(v: np.ndarray, threshold: float = 0.0) -> int:
    """Number of upward crossings of ``threshold``."""
    above = v >= threshold
    return int(np.count_nonzero(~above[:-1] & above[1:]))


# --- bundled models -----------------------------------------------------------


def hodgkin_huxley() -> ConductanceModel:
    return ConductanceModel(
        c=1.0,
        leak_g=0.3,
        leak_nu=-54.4,
        channels=(
            Channel(120.0, 55.0, kin.channel("hh.na"), "hh.na"),
            Channel(36.0, -77.0, kin.channel("hh.k"), "hh.k"),
        ),
        name="hh",
    )


CS_VARIANTS = {"a": (0.0, 0.0), "b": (90.0, 0.0), "c": (0.0, 0.4)}


def connor_stevens(variant: str = "a") -> ConductanceModel:
    """Modified Connor-Stevens model; variants differ in A-type and Ca conductances.

    Capacitance is 1 uF/cm^2.
    """
    g_a, g_ca = CS_VARIANTS[variant.lower()]
    return ConductanceModel(
        c=1.0,
        leak_g=0.3,
        leak_nu=-17.0,
        channels=(
            Channel(120.0, 55.0, kin.channel("cs.na"), "cs.na"),
            Channel(20.0, -75.0, kin.channel("cs.k"), "cs.k"),
            Channel(g_a, -75.0, kin.channel("cs.a"), "cs.a"),
            Channel(g_ca, 120.0, kin.channel("cs.ca"), "cs.ca"),
        ),
        name=f"cs-{variant.lower()}",
    )


def builtin_model(name: str) -> ConductanceModel:
    key = name.lower()
    if key == "hh":
        return hodgkin_huxley()
    if key.startswith("cs-") and key[3:] in CS_VARIANTS:
        return connor_stevens(key[3:])
    raise KeyError(f"unknown model {name!r}; expected hh, cs-a, cs-b or cs-c")

