"""Prediction-error identification of the inverse (clamp-current) dynamics.

The predictor drives the postulated channel gates with the measured voltage
and is linear in the parameters, so the prediction-error estimate is an
ordinary least-squares problem.  Regressor columns are

    [1, p_1..p_n, u2, u2*p_1..u2*p_n, u1]

with ``p_j`` the gate product of channel ``j``, ``u1 = gamma (r - v)`` and
``u2 = v``.  The parameter vector uses the same order:
``theta1 = -g*nu/c`` (leak first), ``theta2 = g/c``, ``theta3 = -1/c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from . import kinetics as kin
from .kinetics import ChannelKinetics
from .neuron import Trajectory, drive_gates, gate_layout, gate_products

#: Persistency of excitation: smallest/largest eigenvalue of the scaled Psi'Psi/N.
PE_THRESHOLD = 1e-10
#: Reversal potentials are reported indeterminate below this relative |theta2|.
INDETERMINATE_FRACTION = 1e-3


class RankDeficientError(np.linalg.LinAlgError):
    """Regressor matrix is (numerically) rank deficient."""

    def __init__(self, message: str, null_direction: np.ndarray):
        super().__init__(message)
        self.null_direction = null_direction


class InvalidEstimate(ValueError):
    pass


@dataclass(frozen=True)
class ModelStructure:
    """Channel kinetics postulated by the predictor.

    ``w0`` defaults to the steady state at the first voltage sample.
    """

    channels: tuple
    ts: float
    w0: Optional[np.ndarray] = None
    keys: tuple = ()
    v_range: tuple = kin.V_RANGE

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "keys", tuple(self.keys))
        if not self.channels:
            raise ValueError("model structure needs at least one channel")
        tau_min, _ = kin.tau_bounds(self.channels, self.v_range)
        if self.ts > tau_min:
            raise ValueError(
                f"ts = {self.ts} exceeds the structure's smallest time constant {tau_min:.6g} ms"
            )

    @classmethod
    def from_keys(cls, keys: Sequence[str], ts: float, **kwargs) -> "ModelStructure":
        return cls(channels=tuple(kin.channel(k) for k in keys), ts=ts, keys=tuple(keys), **kwargs)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_params(self) -> int:
        return 2 * self.n_channels + 3

    @property
    def layout(self):
        return gate_layout(self.channels)

    def column_names(self) -> List[str]:
        names = self.keys or tuple(f"ch{j}" for j in range(1, self.n_channels + 1))
        return (
            ["theta1[leak]"] + [f"theta1[{k}]" for k in names]
            + ["theta2[leak]"] + [f"theta2[{k}]" for k in names]
            + ["theta3"]
        )


@dataclass
class ParameterVector:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: float

    @classmethod
    def from_array(cls, theta) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float)
        n = (theta.size - 1) // 2
        if theta.size != 2 * n + 1 or n < 1:
            raise ValueError(f"parameter vector of size {theta.size} has no valid layout")
        return cls(theta[:n].copy(), theta[n:2 * n].copy(), float(theta[-1]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, [self.theta3]])


@dataclass
class PhysicalParameters:
    """Capacitance, conductances and reversal potentials; index 0 is the leak.

    Reversal potentials that cannot be determined are ``nan`` and flagged in
    ``indeterminate``.
    """

    c: float
    g: np.ndarray
    nu: np.ndarray
    indeterminate: np.ndarray


@dataclass
class PersistencyReport:
    min_eigenvalue: float
    max_eigenvalue: float
    condition_number: float
    passed: bool


@dataclass
class EstimationResult:
    theta: ParameterVector
    physical: PhysicalParameters
    condition_number: float
    residual_variance: float
    n_samples: int
    names: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        p = self.physical
        lines = [
            f"samples: {self.n_samples}",
            f"condition number (scaled): {self.condition_number:.6g}",
            f"residual variance: {self.residual_variance:.6g}",
            f"c: {p.c:.8g}",
        ]
        for j, (g, nu, ind) in enumerate(zip(p.g, p.nu, p.indeterminate)):
            nu_text = "indeterminate" if ind else f"{nu:.8g}"
            lines.append(f"g_{j}: {g:.8g}  nu_{j}: {nu_text}")
        return "\n".join(lines)

    def report_rows(self, truth: Optional[np.ndarray] = None) -> List[tuple]:
        """``(parameter, true, estimate, abs_error)`` rows for the CSV report."""
        est = self.theta.as_array()
        rows = []
        for i, name in enumerate(self.names or [f"theta_{i}" for i in range(est.size)]):
            if truth is None:
                rows.append((name, "", est[i], ""))
            else:
                rows.append((name, truth[i], est[i], abs(truth[i] - est[i])))
        return rows


# --- operations ---------------------------------------------------------------


def simulate_predictor_gates(structure: ModelStructure, u2, w0=None, include_final: bool = False) -> np.ndarray:
    """Predictor gate trajectories driven by the measured voltage ``u2``.

    Returns one row per sample of ``u2``, plus the state after the last
    sample when ``include_final`` is set (used to continue a chunked run).
    ``w0`` overrides ``structure.w0``.
    """
    u2 = np.asarray(u2, dtype=float)
    layout = structure.layout
    if w0 is None:
        w0 = structure.w0
    if w0 is None:
        w0 = np.array([g.x_inf(float(u2[0])) for ch in structure.channels for g in ch.gates])
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (layout.n_gates,):
        raise ValueError(f"initial gates must have {layout.n_gates} entries")
    # one extra sample so the row after u2[-1] is produced
    path = drive_gates(layout, np.append(u2, u2[-1]), w0, structure.ts)
    return path if include_final else path[:-1]


def build_regressor(gates, u1, u2, structure: ModelStructure) -> np.ndarray:
    """Stack the regressor rows ``psi_k``, one per sample."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    gates = np.atleast_2d(np.asarray(gates, dtype=float))
    if not (u1.shape == u2.shape and gates.shape[0] == u1.size):
        raise ValueError(
            f"misaligned inputs: gates {gates.shape[0]}, u1 {u1.size}, u2 {u2.size}"
        )
    p = gate_products(structure.layout, gates)
    n, m = p.shape
    psi = np.empty((n, 2 * m + 3))
    psi[:, 0] = 1.0
    psi[:, 1:m + 1] = p
    psi[:, m + 1] = u2
    psi[:, m + 2:2 * m + 2] = u2[:, None] * p
    psi[:, 2 * m + 2] = u1
    return psi


def column_scales(psi: np.ndarray) -> np.ndarray:
    """Root-mean-square of each column (1 for all-zero columns)."""
    rms = np.sqrt(np.mean(psi * psi, axis=0))
    return np.where(rms > 0, rms, 1.0)


def persistency_check(psi: np.ndarray, threshold: float = PE_THRESHOLD) -> PersistencyReport:
    """Positive-definiteness of ``Psi'Psi/N`` with columns scaled to unit RMS.

    Diagonal scaling does not change definiteness; it keeps the eigenvalue
    ratio from being dominated by the physical units of ``u1`` and ``u2``.
    """
    n, p = psi.shape
    if n < p:
        raise ValueError(f"need at least {p} samples, got {n}")
    scaled = psi / column_scales(psi)
    eig = np.linalg.eigvalsh(scaled.T @ scaled / n)
    lo, hi = float(eig[0]), float(eig[-1])
    cond = hi / lo if lo > 0 else np.inf
    return PersistencyReport(lo, hi, cond, bool(lo > threshold * hi))


def least_squares(psi: np.ndarray, y) -> np.ndarray:
    """Minimize ``|y - psi theta|^2`` through a QR factorization of ``psi``.

    Columns are equilibrated before factorizing.
    """
    y = np.asarray(y, dtype=float)
    scale = column_scales(psi)
    q, r = np.linalg.qr(psi / scale, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.min() <= np.finfo(float).eps * psi.shape[0] * diag.max():
        _, s, vt = np.linalg.svd(r)
        null = vt[-1] / scale
        raise RankDeficientError(
            f"regressor is rank deficient (singular values {s[-1]:.3g} .. {s[0]:.3g})",
            null / np.linalg.norm(null),
        )
    return scipy.linalg.solve_triangular(r, q.T @ y) / scale


class IncrementalLeastSquares:
    """Least squares over data that arrives in chunks.

    Each update QR-factorizes the previous triangular factor stacked on the
    new rows, so memory stays at one chunk.  The output is appended as an
    extra column, so only ``R`` is formed and ``Q'y`` is read off its last
    column.  Columns are scaled by the RMS of the first chunk.
    """

    def __init__(self):
        self.n = 0
        self._scale = None
        self._r = None
        self._qty = None
        self._rho = 0.0

    def update(self, psi: np.ndarray, y) -> None:
        y = np.asarray(y, dtype=float)
        if psi.shape[0] != y.size:
            raise ValueError("psi and y must have the same number of rows")
        if psi.shape[0] == 0:
            return
        if self._scale is None:
            self._scale = column_scales(psi)
        p = psi.shape[1]
        a = np.empty((psi.shape[0], p + 1))
        np.divide(psi, self._scale, out=a[:, :p])
        a[:, p] = y
        if self._r is not None:
            top = np.zeros((p + 1, p + 1))
            top[:p, :p] = self._r
            top[:p, p] = self._qty
            top[p, p] = self._rho
            a = np.vstack([top, a])
        r = scipy.linalg.qr(a, mode="r", overwrite_a=True, check_finite=False)[0]
        k = min(p, r.shape[0])
        self._r = np.zeros((p, p))
        self._qty = np.zeros(p)
        self._r[:k] = r[:k, :p]
        self._qty[:k] = r[:k, p]
        # the trailing diagonal entry is the residual norm of all rows so far
        self._rho = abs(r[p, p]) if r.shape[0] > p else 0.0
        self.n += psi.shape[0]

    @property
    def residual_variance(self) -> float:
        """Mean squared residual at the current solution."""
        return self._rho ** 2 / self.n if self.n else 0.0

    def solve(self) -> np.ndarray:
        if self._r is None:
            raise ValueError("no data")
        r = self._r
        diag = np.abs(np.diag(r))
        if diag.min() <= np.finfo(float).eps * self.n * diag.max():
            _, s, vt = np.linalg.svd(r)
            null = vt[-1] / self._scale
            raise RankDeficientError(
                f"regressor is rank deficient (singular values {s[-1]:.3g} .. {s[0]:.3g})",
                null / np.linalg.norm(null),
            )
        return scipy.linalg.solve_triangular(r, self._qty) / self._scale

    def standard_errors(self) -> np.ndarray:
        """Least-squares standard errors ``sqrt(diag(s^2 (Psi'Psi)^-1))``."""
        p = self._r.shape[0]
        if self.n <= p:
            raise ValueError("need more rows than parameters")
        s2 = self._rho ** 2 / (self.n - p)
        r_inv = scipy.linalg.solve_triangular(self._r, np.eye(p))
        return np.sqrt(s2 * np.sum(r_inv ** 2, axis=1)) / self._scale

    def persistency(self, threshold: float = PE_THRESHOLD) -> PersistencyReport:
        s = np.linalg.svd(self._r, compute_uv=False)
        eig = s ** 2 / self.n
        lo, hi = float(eig.min()), float(eig.max())
        cond = hi / lo if lo > 0 else np.inf
        return PersistencyReport(lo, hi, cond, bool(lo > threshold * hi))


def recover_physical(theta, indeterminate_fraction: float = INDETERMINATE_FRACTION) -> PhysicalParameters:
    """Map ``theta`` back to ``c``, ``g_j`` and ``nu_j`` (leak at index 0)."""
    if not isinstance(theta, ParameterVector):
        theta = ParameterVector.from_array(theta)
    if theta.theta3 == 0 or not np.isfinite(theta.theta3):
        raise InvalidEstimate("theta3 must be finite and non-zero to recover the capacitance")
    c = -1.0 / theta.theta3
    g = -theta.theta2 / theta.theta3
    scale = np.max(np.abs(theta.theta2))
    small = np.abs(theta.theta2) < indeterminate_fraction * scale if scale > 0 else np.ones(g.size, bool)
    nu = np.full(g.size, np.nan)
    ok = ~small
    nu[ok] = -theta.theta1[ok] / theta.theta2[ok]
    return PhysicalParameters(c=c, g=g, nu=nu, indeterminate=small)


def regressor_from_trajectory(traj: Trajectory, structure: ModelStructure):
    """Predictor gates, regressor and output for a recorded trajectory."""
    gates = simulate_predictor_gates(structure, traj.u2)
    return build_regressor(gates, traj.u1, traj.u2, structure), traj.y


def estimate(traj: Trajectory, structure: ModelStructure, check: bool = True) -> EstimationResult:
    psi, y = regressor_from_trajectory(traj, structure)
    return estimate_from_regressor(psi, y, structure, check=check)


def estimate_from_regressor(psi, y, structure: ModelStructure, check: bool = True) -> EstimationResult:
    pe = persistency_check(psi)
    if check and not pe.passed:
        raise RankDeficientError(
            f"persistency of excitation fails (min/max eigenvalue {pe.min_eigenvalue:.3g}/{pe.max_eigenvalue:.3g})",
            _null_direction(psi),
        )
    theta = least_squares(psi, y)
    resid = y - psi @ theta
    return EstimationResult(
        theta=ParameterVector.from_array(theta),
        physical=recover_physical(theta),
        condition_number=pe.condition_number,
        residual_variance=float(np.var(resid)),
        n_samples=psi.shape[0],
        names=structure.column_names(),
    )


def error_history(psi: np.ndarray, y, checkpoints: Sequence[int], truth) -> np.ndarray:
    """``|truth - theta_N|`` for every prefix length ``N`` in ``checkpoints``.

    Each prefix is solved from scratch; rows follow ``checkpoints``.
    """
    checkpoints = list(checkpoints)
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    if checkpoints and checkpoints[-1] > psi.shape[0]:
        raise ValueError("checkpoint beyond the data length")
    truth = np.asarray(truth, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.array([np.abs(truth - least_squares(psi[:n], y[:n])) for n in checkpoints])


def truth_for_structure(model, structure: ModelStructure) -> np.ndarray:
    """True parameter vector of ``model`` laid out for ``structure``.

    Channels of the structure that the model lacks get zero parameters.
    """
    by_key: Dict[str, object] = {ch.key: ch for ch in model.channels if ch.key}
    m = structure.n_channels
    t1 = np.zeros(m + 1)
    t2 = np.zeros(m + 1)
    t1[0] = -model.leak_g * model.leak_nu / model.c
    t2[0] = model.leak_g / model.c
    for j, key in enumerate(structure.keys, start=1):
        ch = by_key.get(key)
        if ch is not None:
            t1[j] = -ch.g_max * ch.nu / model.c
            t2[j] = ch.g_max / model.c
    return np.concatenate([t1, t2, [-1.0 / model.c]])


def _null_direction(psi: np.ndarray) -> np.ndarray:
    scale = column_scales(psi)
    scaled = psi / scale
    vec = np.linalg.eigh(scaled.T @ scaled)[1][:, 0] / scale
    return vec / np.linalg.norm(vec)
