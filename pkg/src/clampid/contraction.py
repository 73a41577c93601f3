"""Numerical contraction certificates for clamped conductance-based models.

All checks use constant metrics ``P = Theta' Theta`` and are evaluated on
sampled states; nothing here is symbolic.  Kinetic derivatives with respect to
voltage are central differences with step ``FD_STEP`` mV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kinetics as kin
from .neuron import ClosedLoopConfig, ConductanceModel, simulate_closed_loop

FD_STEP = 1e-4
#: Seed of the default random state sampler.
DEFAULT_SEED = 20240101
DEFAULT_SAMPLES = 100_000


@dataclass(frozen=True)
class Metric:
    """Constant contraction metric ``P`` with rate ``lam`` (1/ms)."""

    P: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] != P.shape[1] or not np.allclose(P, P.T):
            raise ValueError("metric must be a symmetric matrix")
        if self.min_eigenvalue_of(P) <= 0:
            raise ValueError("metric must be positive definite")
        object.__setattr__(self, "P", P)

    @staticmethod
    def min_eigenvalue_of(P) -> float:
        return float(np.linalg.eigvalsh(P)[0])

    @classmethod
    def diagonal(cls, weights, lam: float = 0.0) -> "Metric":
        return cls(np.diag(np.asarray(weights, dtype=float)), lam)

    @property
    def min_eigenvalue(self) -> float:
        return self.min_eigenvalue_of(self.P)

    @property
    def condition_number(self) -> float:
        eig = np.linalg.eigvalsh(self.P)
        return float(eig[-1] / eig[0])

    @property
    def theta(self) -> np.ndarray:
        """Symmetric square root, so that ``P = Theta' Theta``."""
        eig, vec = np.linalg.eigh(self.P)
        return (vec * np.sqrt(eig)) @ vec.T


@dataclass(frozen=True)
class StateBox:
    v_range: tuple
    n_gates: int

    def __post_init__(self):
        if not self.v_range[0] < self.v_range[1]:
            raise ValueError("v_min must be below v_max")

    def corners(self) -> np.ndarray:
        n = self.n_gates + 1
        bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        pts = bits.astype(float)
        lo, hi = self.v_range
        pts[:, 0] = np.where(bits[:, 0] == 1, hi, lo)
        return pts

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pts = rng.random((n, self.n_gates + 1))
        lo, hi = self.v_range
        pts[:, 0] = lo + (hi - lo) * pts[:, 0]
        return pts


def box_sampler(n: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED) -> Callable[[StateBox], np.ndarray]:
    """Corner enumeration followed by ``n`` uniform points; rows are ``(v, w...)``."""

    def sample(box: StateBox) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(seed))
        return np.vstack([box.corners(), box.uniform(n, rng)])

    return sample


@dataclass
class GainBoundReport:
    bound_sufficient: float
    bound_necessary_sampled: float
    sample_count: int
    argmax_state: np.ndarray
    sigma_max_q: float = 0.0

    def rows(self):
        rows = [
            ("bound_sufficient", self.bound_sufficient),
            ("bound_necessary_sampled", self.bound_necessary_sampled),
            ("sigma_max_Q", self.sigma_max_q),
            ("sample_count", self.sample_count),
        ]
        rows += [(f"argmax_state_{i}", x) for i, x in enumerate(self.argmax_state)]
        return rows

    def to_text(self) -> str:
        lines = ["gain lower bounds (mS/cm^2)"]
        lines.append(f"  sufficient (sigma_max[Q]^2 c / lambda_w): {self.bound_sufficient:.6g}")
        lines.append(f"  necessary, sampled maximum:               {self.bound_necessary_sampled:.6g}")
        lines.append(f"  samples: {self.sample_count}")
        lines.append("  maximizing state (v, w): " + ", ".join(f"{x:.6g}" for x in self.argmax_state))
        return "\n".join(lines)


# --- local linearization --------------------------------------------------------


@dataclass
class _Linearization:
    """Partial derivatives of the clamped model at a batch of states."""

    dg_dv: np.ndarray       # (n,)
    dg_dw: np.ndarray       # (n, m)
    a_diag: np.ndarray      # (n, m), diagonal of A(v)
    dgate_dv: np.ndarray    # (n, m), (dA/dv) w + db/dv


def _linearize(model: ConductanceModel, v: np.ndarray, w: np.ndarray) -> _Linearization:
    v = np.asarray(v, dtype=float).ravel()
    w = np.atleast_2d(np.asarray(w, dtype=float))
    layout = model.layout
    n, m = v.size, layout.n_gates
    if w.shape != (n, m):
        raise ValueError(f"expected gate array of shape {(n, m)}, got {w.shape}")

    g_max, nu = model.g_max, model.nu
    powered = w ** layout.exponent
    prod = np.ones((n, layout.n_channels))
    for i in range(m):
        prod[:, layout.channel_of[i]] *= powered[:, i]
    dg_dv = model.leak_g + prod @ g_max

    dg_dw = np.empty((n, m))
    for i in range(m):
        j = layout.channel_of[i]
        others = np.ones(n)
        for l in range(m):
            if l != i and layout.channel_of[l] == j:
                others *= powered[:, l]
        e = layout.exponent[i]
        dprod = e * w[:, i] ** (e - 1) * others
        dg_dw[:, i] = g_max[j] * (v - nu[j]) * dprod

    a_diag = np.empty((n, m))
    dgate = np.empty((n, m))
    for i, (tau, x_inf) in enumerate(zip(layout.taus, layout.x_infs)):
        a_diag[:, i] = -1.0 / kin.evaluate(tau, v)
        hi, lo = v + FD_STEP, v - FD_STEP
        f_hi = (kin.evaluate(x_inf, hi) - w[:, i]) / kin.evaluate(tau, hi)
        f_lo = (kin.evaluate(x_inf, lo) - w[:, i]) / kin.evaluate(tau, lo)
        dgate[:, i] = (f_hi - f_lo) / (2 * FD_STEP)
    return _Linearization(dg_dv, dg_dw, a_diag, dgate)


def _split_states(model: ConductanceModel, states) -> tuple:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[1] != model.n_gates + 1:
        raise ValueError(f"states must have {model.n_gates + 1} columns (v, w...)")
    return states[:, 0], states[:, 1:]


def jacobian(model: ConductanceModel, gamma: float, v: float, w) -> np.ndarray:
    """Jacobian of the continuous-time clamped dynamics in state ``(v, w)``."""
    lin = _linearize(model, np.array([v]), np.atleast_2d(w))
    m = lin.a_diag.shape[1]
    J = np.zeros((m + 1, m + 1))
    J[0, 0] = -(lin.dg_dv[0] + gamma) / model.c
    J[0, 1:] = -lin.dg_dw[0] / model.c
    J[1:, 0] = lin.dgate_dv[0]
    J[1:, 1:] = np.diag(lin.a_diag[0])
    return J


def closed_loop_jacobian(model: ConductanceModel, gamma: float, v: float, w, metric: Metric) -> np.ndarray:
    """Generalized Jacobian ``Theta J Theta^-1`` with ``Theta = diag(c, Theta_w)``."""
    theta_w = metric.theta
    if abs(np.linalg.det(theta_w)) < 1e-300:
        raise np.linalg.LinAlgError("gate block of the metric is singular")
    m = theta_w.shape[0]
    theta = np.zeros((m + 1, m + 1))
    theta[0, 0] = model.c
    theta[1:, 1:] = theta_w
    J = jacobian(model, gamma, v, w)
    return theta @ J @ np.linalg.inv(theta)


def internal_contraction_rate(channels, v_grid=None) -> tuple:
    """Rate ``1/tau_max`` certified by the identity metric, and ``tau_max``.

    ``channels`` may be a model or a list of channel kinetics.
    """
    if isinstance(channels, ConductanceModel):
        channels = channels.kinetics
    grid = kin.voltage_grid() if v_grid is None else np.asarray(v_grid, dtype=float)
    tau_max = max(float(np.max(kin.evaluate(g.tau, grid))) for ch in channels for g in ch.gates)
    n = sum(len(ch.gates) for ch in channels)
    lam = 1.0 / tau_max
    return Metric(np.eye(n), lam), tau_max


def _coupling(model: ConductanceModel, lin: _Linearization, metric: Metric):
    """Off-diagonal block ``Q`` and symmetric gate block for every state."""
    theta_w = metric.theta
    theta_inv = np.linalg.inv(theta_w)
    Q = 0.5 * (-lin.dg_dw @ theta_inv + (lin.dgate_dv @ theta_w.T) / model.c)
    F22 = theta_w[None, :, :] * lin.a_diag[:, None, :] @ theta_inv  # Theta A Theta^-1
    S = 0.5 * (F22 + np.transpose(F22, (0, 2, 1)))
    return Q, S


def gain_bound(
    model: ConductanceModel,
    metric: Metric,
    box: StateBox,
    sampler: Optional[Callable[[StateBox], np.ndarray]] = None,
    points=None,
) -> GainBoundReport:
    """Sampled gain lower bounds for closed-loop contraction.

    The necessary bound at a state is ``c Q (-S)^-1 Q' - dg/dv`` (the Schur
    complement condition), the sufficient one ``c sigma_max[Q]^2 / lam``.
    Both are maximized over the sampled states.  ``points`` (rows ``(v, w)``)
    replaces the sampler when given.
    """
    if points is None:
        points = (sampler or box_sampler())(box)
    v, w = _split_states(model, points)
    lin = _linearize(model, v, w)
    Q, S = _coupling(model, lin, metric)
    neg_S = -S
    x = np.linalg.solve(neg_S, Q[:, :, None])[:, :, 0]
    necessary = model.c * np.einsum("ij,ij->i", Q, x) - lin.dg_dv
    sigma_q = np.linalg.norm(Q, axis=1)
    best = int(np.argmax(necessary))
    if metric.lam > 0:
        sufficient = model.c * float(np.max(sigma_q)) ** 2 / metric.lam
    else:
        sufficient = math.inf
    return GainBoundReport(
        bound_sufficient=sufficient,
        bound_necessary_sampled=float(necessary[best]),
        sample_count=int(v.size),
        argmax_state=np.asarray(points, dtype=float)[best].copy(),
        sigma_max_q=float(np.max(sigma_q)),
    )


def gate_block_margin(model: ConductanceModel, metric: Metric, v_grid=None) -> float:
    """Largest eigenvalue of ``(F22 + F22')/2`` over the grid (should be ``<= -lam``)."""
    grid = kin.voltage_grid() if v_grid is None else np.asarray(v_grid, dtype=float)
    lin = _linearize(model, grid, np.zeros((grid.size, model.n_gates)))
    _, S = _coupling(model, lin, metric)
    return float(np.max(np.linalg.eigvalsh(S)))


@dataclass
class ClosedLoopCertificate:
    """Sampled continuous-time rate and Jacobian norm bound of the clamped loop."""

    rate: float
    sigma_bar: float
    sample_count: int
    P: np.ndarray  # full-state metric diag(c, Theta_w)' diag(c, Theta_w)


def certify_closed_loop(model: ConductanceModel, gamma: float, metric: Metric, points) -> ClosedLoopCertificate:
    """Contraction rate of the clamped loop in metric ``diag(c, Theta_w)^2``.

    ``rate`` is the smallest ``-lambda_max[(F + F')/2]`` over the sampled
    states and ``sigma_bar`` the largest singular value of the plain Jacobian.
    A non-positive rate means the metric does not certify contraction.
    """
    v, w = _split_states(model, points)
    theta = np.zeros((model.n_gates + 1,) * 2)
    theta[0, 0] = model.c
    theta[1:, 1:] = metric.theta
    rate, sigma = math.inf, 0.0
    for vi, wi in zip(v, w):
        F = closed_loop_jacobian(model, gamma, vi, wi, metric)
        rate = min(rate, -float(np.linalg.eigvalsh(0.5 * (F + F.T))[-1]))
        sigma = max(sigma, float(np.linalg.norm(jacobian(model, gamma, vi, wi), 2)))
    return ClosedLoopCertificate(rate, sigma, int(v.size), theta.T @ theta)


@dataclass
class EulerRate:
    """Outcome of the forward-Euler contraction test.

    ``accepted`` is false when ``alpha^2 >= 1``; ``max_ts`` is the admissible
    step-size threshold in either case.
    """

    accepted: bool
    alpha_sq: float
    max_ts: float

    @property
    def alpha(self) -> float:
        return math.sqrt(self.alpha_sq) if self.alpha_sq >= 0 else 0.0


def euler_rate_bound(lambda_ct: float, metric, sigma_bar: float, ts: float) -> EulerRate:
    """Discrete contraction factor ``alpha(ts)`` of a forward-Euler step.

    ``alpha^2 = 1 - 2 ts lam + ts^2 kappa sigma_bar^2`` with ``kappa`` the
    condition number of the metric.
    """
    if lambda_ct <= 0:
        raise ValueError("continuous-time rate must be positive")
    P = metric.P if isinstance(metric, Metric) else np.atleast_2d(np.asarray(metric, dtype=float))
    eig = np.linalg.eigvalsh(P)
    kappa = eig[-1] / eig[0]
    alpha_sq = 1.0 - 2.0 * ts * lambda_ct + ts * ts * kappa * sigma_bar * sigma_bar
    max_ts = 2.0 * lambda_ct / (kappa * sigma_bar * sigma_bar) if sigma_bar > 0 else math.inf
    return EulerRate(bool(alpha_sq < 1.0), alpha_sq, max_ts)


# --- empirical probe -------------------------------------------------------------


@dataclass
class ProbeReport:
    baselines: list
    t: np.ndarray
    voltages: np.ndarray         # (n_baselines, n_steps + 1)
    spread: np.ndarray
    settle_time: float
    max_spread_after_settle: float
    decay_rate: float            # 1/ms, nan if not fitted
    tolerance: float
    contracting: bool = field(init=False)

    def __post_init__(self):
        self.contracting = bool(self.max_spread_after_settle < self.tolerance)

    def rows(self):
        return [
            ("baselines", len(self.baselines)),
            ("settle_time_ms", self.settle_time),
            ("max_spread_after_settle_mV", self.max_spread_after_settle),
            ("decay_rate_per_ms", self.decay_rate),
            ("tolerance_mV", self.tolerance),
            ("contracting", int(self.contracting)),
        ]

    def to_text(self) -> str:
        verdict = "contracting" if self.contracting else "NOT contracting"
        return (
            f"step-response probe over {len(self.baselines)} baselines: {verdict}\n"
            f"  max spread after {self.settle_time:g} ms: {self.max_spread_after_settle:.6g} mV "
            f"(tolerance {self.tolerance:g} mV)\n"
            f"  fitted decay rate of the spread: {self.decay_rate:.6g} 1/ms"
        )


def fit_decay_rate(t: np.ndarray, spread: np.ndarray, floor: float = 1e-9) -> float:
    """Least-squares slope of ``-log(spread)`` while the spread is above ``floor``."""
    ok = spread > floor
    if ok.sum() < 2:
        return math.nan
    # stop at the first time the spread hits the floor
    last = np.argmax(~ok) if not ok.all() else ok.size
    tt, ss = t[:last], spread[:last]
    if tt.size < 2:
        return math.nan
    slope = np.polyfit(tt, np.log(ss), 1)[0]
    return float(-slope)


def step_response_probe(
    model: ConductanceModel,
    gamma: float,
    ts: float,
    baselines: Sequence[float],
    step_to: float,
    step_time: float,
    duration: float,
    noise=0.0,
    settle_time: Optional[float] = None,
    tolerance: float = 0.1,
    v_range=kin.V_RANGE,
) -> ProbeReport:
    """Clamp at several baselines, step to a common level, compare the runs.

    Each run starts at its baseline equilibrium estimate (``v0`` = baseline,
    gates at steady state).  ``noise`` is shared by all runs.  The spread is
    the max-min voltage across runs at each step.
    """
    n = int(round(duration / ts))
    k_step = int(round(step_time / ts))
    settle = duration if settle_time is None else settle_time
    runs = []
    for b in baselines:
        r = np.full(n, float(step_to))
        r[:k_step] = b
        cfg = ClosedLoopConfig(gamma=gamma, ts=ts, steps=n, v0=float(b), v_range=v_range)
        runs.append(simulate_closed_loop(model, cfg, r, noise).v)
    volts = np.array(runs)
    t = np.arange(n + 1) * ts
    spread = volts.max(axis=0) - volts.min(axis=0)
    after = t >= settle
    max_after = float(spread[after].max()) if after.any() else math.nan
    window = t >= step_time
    rate = fit_decay_rate(t[window] - step_time, spread[window]) if len(baselines) > 1 else math.nan
    return ProbeReport(
        baselines=list(baselines),
        t=t,
        voltages=volts,
        spread=spread,
        settle_time=settle,
        max_spread_after_settle=max_after,
        decay_rate=rate,
        tolerance=tolerance,
    )
