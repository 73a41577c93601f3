"""Declarative identification, probe and gain-bound experiments.

Configurations are INI files (see the ``configs`` directory shipped with the
package).  Every random draw is keyed by a seed listed in the configuration,
and all numeric output is written with 17 significant digits, so rerunning a
configuration reproduces its files byte for byte.
"""

from __future__ import annotations

import configparser
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import contraction as ct
from . import estimator as est
from . import kinetics as kin
from .neuron import (
    Channel,
    ClosedLoopConfig,
    ConductanceModel,
    ConfigurationError,
    Trajectory,
    builtin_model,
    gate_products,
    simulate_closed_loop,
)
from .signals import FilteredNoiseSpec, NoiseStream, ReferenceStream, SnrAccumulator, WhiteNoiseSpec

#: Chunk length of streamed runs (samples).
DEFAULT_CHUNK = 1_000_000
#: Longest run for which a full trajectory file may be requested.
MAX_TRAJECTORY_STEPS = 5_000_000


class StageError(RuntimeError):
    """An experiment stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- config parsing -----------------------------------------------------------


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def parse_seeds(text: str) -> List[int]:
    """``"1-20"``, ``"1,2,5"`` or a mix such as ``"1-3,7"``."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigurationError("empty seed list")
    return seeds


def _read(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"configuration file not found: {path}")
    parser.read(path)
    return parser


def config_path(name_or_path) -> Path:
    """Resolve a shipped configuration name (``"example3"``) or a file path."""
    path = Path(name_or_path)
    if path.exists():
        return path
    stem = path.name if path.suffix == ".cfg" else path.name + ".cfg"
    shipped = resources.files("clampid") / "configs" / stem
    if shipped.is_file():
        return Path(str(shipped))
    raise ConfigurationError(f"no configuration file or shipped config named {name_or_path!r}")


def shipped_configs() -> List[str]:
    root = resources.files("clampid") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_model(spec: str, base_dir: Optional[Path] = None) -> ConductanceModel:
    """Built-in model name or path to a model file.

    A model file has a ``[model]`` section (``c``, ``leak_g``, ``leak_nu``)
    and one ``[channel <kinetics key>]`` section per channel with ``g_max``
    and ``nu``.
    """
    try:
        return builtin_model(spec)
    except KeyError:
        pass
    path = Path(spec)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigurationError(f"unknown model {spec!r}: not a built-in name and no such file")
    p = _read(path)
    m = p["model"]
    channels = []
    for section in p.sections():
        if section.startswith("channel "):
            key = section.split(None, 1)[1].strip()
            channels.append(Channel(p.getfloat(section, "g_max"), p.getfloat(section, "nu"), kin.channel(key), key))
    return ConductanceModel(
        c=m.getfloat("c", 1.0),
        leak_g=m.getfloat("leak_g"),
        leak_nu=m.getfloat("leak_nu"),
        channels=tuple(channels),
        name=m.get("name", path.stem),
    )


@dataclass
class ExperimentConfig:
    """Identification experiment; ``duration`` and ``discard`` are in seconds."""

    name: str
    model: str
    structure: tuple
    gamma: float
    ts: float
    duration: float
    discard: float
    reference: FilteredNoiseSpec
    noise: WhiteNoiseSpec
    seeds: List[int]
    checkpoints: List[int]
    v0: float = -65.0
    v_range: tuple = kin.V_RANGE
    chunk: int = DEFAULT_CHUNK
    save_trajectory: bool = False
    base_dir: Optional[Path] = None

    def __post_init__(self):
        if not 0 <= self.discard < self.duration:
            raise ConfigurationError("discard must be non-negative and shorter than the duration")
        if self.chunk < 1:
            raise ConfigurationError("chunk must be positive")
        n = self.n_samples
        if any(c < 1 or c > n for c in self.checkpoints):
            raise ConfigurationError(f"checkpoints must lie in 1..{n}")
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ConfigurationError("checkpoints must be strictly increasing")
        if self.save_trajectory and self.n_steps > MAX_TRAJECTORY_STEPS:
            raise ConfigurationError(f"trajectory files are limited to {MAX_TRAJECTORY_STEPS} steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * 1000.0 / self.ts))

    @property
    def n_discard(self) -> int:
        return int(round(self.discard * 1000.0 / self.ts))

    @property
    def n_samples(self) -> int:
        """Samples used for estimation (after the discarded prefix)."""
        return self.n_steps - self.n_discard

    def build_model(self) -> ConductanceModel:
        return load_model(self.model, self.base_dir)

    def build_structure(self) -> est.ModelStructure:
        return est.ModelStructure.from_keys(self.structure, self.ts, v_range=self.v_range)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = config_path(path)
        p = _read(path)
        if "experiment" not in p:
            raise ConfigurationError(f"{path} has no [experiment] section")
        x, r, e = p["experiment"], p["reference"], p["noise"]
        checkpoints = [int(float(c)) for c in _floats(x.get("checkpoints", ""))]
        v_range = tuple(_floats(x["v_range"])) if "v_range" in x else kin.V_RANGE
        cfg = cls(
            name=x.get("name", path.stem),
            model=x["model"],
            structure=tuple(k.strip() for k in x["structure"].split(",") if k.strip()),
            gamma=x.getfloat("gamma"),
            ts=x.getfloat("ts"),
            duration=x.getfloat("duration"),
            discard=x.getfloat("discard", 0.0),
            reference=FilteredNoiseSpec(
                offset=r.getfloat("offset"),
                sigma=r.getfloat("sigma"),
                truncation=r.getfloat("truncation"),
                pole=r.getfloat("pole"),
            ),
            noise=WhiteNoiseSpec(sigma=e.getfloat("sigma"), truncation=e.getfloat("truncation")),
            seeds=parse_seeds(x.get("seeds", "1")),
            checkpoints=checkpoints,
            v0=x.getfloat("v0", -65.0),
            v_range=v_range,
            chunk=int(x.getfloat("chunk", DEFAULT_CHUNK)),
            save_trajectory=x.getboolean("save_trajectory", False),
            base_dir=path.parent,
        )
        return cfg


# --- identification --------------------------------------------------------------


def true_physical(model: ConductanceModel, structure: est.ModelStructure) -> np.ndarray:
    """``(c, g_0..g_m, nu_0..nu_m)``; reversal potentials of absent channels are NaN."""
    theta = est.truth_for_structure(model, structure)
    m = structure.n_channels + 1
    g = theta[m:2 * m] * model.c
    nu = np.full(m, np.nan)
    nz = g != 0
    nu[nz] = -theta[:m][nz] / theta[m:2 * m][nz]
    return np.concatenate([[model.c], g, nu])


def physical_names(structure: est.ModelStructure) -> List[str]:
    m = structure.n_channels + 1
    return ["c"] + [f"g_{j}" for j in range(m)] + [f"nu_{j}" for j in range(m)]


def _physical_vector(theta) -> np.ndarray:
    p = est.recover_physical(theta)
    return np.concatenate([[p.c], p.g, p.nu])


@dataclass
class SeedResult:
    seed: int
    theta: np.ndarray
    physical: np.ndarray
    truth_theta: np.ndarray
    truth_physical: np.ndarray
    checkpoints: List[int]
    history: np.ndarray          # |physical error| per checkpoint
    snr_db: float
    n_samples: int
    persistency: est.PersistencyReport
    residual_variance: float = math.nan
    theta_std_error: Optional[np.ndarray] = None
    names: List[str] = field(default_factory=list)
    theta_names: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"seed {self.seed}: N = {self.n_samples}, SNR {self.snr_db:.3f} dB",
            f"condition number (scaled): {self.persistency.condition_number:.6g}",
            f"residual variance: {self.residual_variance:.6g}",
        ]
        for n, t, e in zip(self.names, self.truth_physical, self.physical):
            lines.append(f"{n}: true {t:.8g}, estimate {e:.8g}")
        return "\n".join(lines)


def run_seed(config: ExperimentConfig, seed: int, trajectory_path=None) -> SeedResult:
    """Simulate, stream the regressor into the least-squares solver, and report.

    The predictor gates start at ``x_inf(v0)`` like the simulator and run from
    the first sample; only the regression rows of the discarded prefix are
    dropped.
    """
    model = config.build_model()
    structure = config.build_structure()
    ref = ReferenceStream(replace(config.reference, seed=seed), config.ts)
    noise = NoiseStream(replace(config.noise, seed=seed))
    solver = est.IncrementalLeastSquares()
    snr = SnrAccumulator(model.c)
    v = config.v0
    w = model.steady_gates(config.v0)
    w_hat = np.array([g.x_inf(config.v0) for ch in structure.channels for g in ch.gates])
    checkpoints = list(config.checkpoints)
    history = np.full((len(checkpoints), 2 * structure.n_channels + 3), np.nan)
    truth_phys = true_physical(model, structure)
    pieces = [] if trajectory_path is not None else None
    next_cp = 0
    done = 0
    while done < config.n_steps:
        n = min(config.chunk, config.n_steps - done)
        r, e = ref.take(n), noise.take(n)
        sim_cfg = ClosedLoopConfig(config.gamma, config.ts, n, v0=v, w0=w, v_range=config.v_range)
        try:
            traj = simulate_closed_loop(model, sim_cfg, r, e)
        except Exception as exc:
            raise StageError("simulation", exc) from exc
        if pieces is not None:
            pieces.append(traj)
        u1, u2, y = traj.u1, traj.u2, traj.y
        gates = est.simulate_predictor_gates(structure, u2, w0=w_hat, include_final=True)
        w_hat = gates[-1]
        psi = est.build_regressor(gates[:-1], u1, u2, structure)
        keep = max(0, config.n_discard - done)
        psi, y, e_kept = psi[keep:], y[keep:], e[keep:]
        snr.update(y, e_kept)
        # split the rows at checkpoint boundaries
        start = 0
        while start < psi.shape[0]:
            stop = psi.shape[0]
            if next_cp < len(checkpoints):
                stop = min(stop, checkpoints[next_cp] - solver.n + start)
            solver.update(psi[start:stop], y[start:stop])
            start = stop
            if next_cp < len(checkpoints) and solver.n == checkpoints[next_cp]:
                try:
                    history[next_cp] = np.abs(_physical_vector(solver.solve()) - truth_phys)
                except (est.RankDeficientError, est.InvalidEstimate):
                    pass
                next_cp += 1
        v, w = float(traj.v[-1]), traj.w[-1].copy()
        done += n

    if pieces is not None:
        _concat_trajectories(pieces).to_csv(trajectory_path)
    pe = solver.persistency()
    try:
        if not pe.passed:
            raise est.RankDeficientError(
                f"persistency of excitation fails (min/max eigenvalue {pe.min_eigenvalue:.3g}/{pe.max_eigenvalue:.3g})",
                np.zeros(structure.n_params),
            )
        theta = solver.solve()
        physical = _physical_vector(theta)
    except (est.RankDeficientError, est.InvalidEstimate) as exc:
        raise StageError("persistency", exc) from exc
    return SeedResult(
        seed=seed,
        theta=theta,
        physical=physical,
        truth_theta=est.truth_for_structure(model, structure),
        truth_physical=truth_phys,
        checkpoints=checkpoints,
        history=history,
        snr_db=snr.value,
        n_samples=solver.n,
        persistency=pe,
        residual_variance=solver.residual_variance,
        theta_std_error=solver.standard_errors(),
        names=physical_names(structure),
        theta_names=structure.column_names(),
    )


def _concat_trajectories(parts: Sequence[Trajectory]) -> Trajectory:
    first = parts[0]
    v = np.concatenate([p.v[:-1] for p in parts] + [parts[-1].v[-1:]])
    w = np.vstack([p.w[:-1] for p in parts] + [parts[-1].w[-1:]])
    return Trajectory(
        ts=first.ts,
        gamma=first.gamma,
        v=v,
        w=w,
        r=np.concatenate([p.r for p in parts]),
        e=np.concatenate([p.e for p in parts]),
    )


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([x if isinstance(x, str) else _fmt(x) for x in row])


def write_seed_outputs(result: SeedResult, out_dir: Path, name: str) -> None:
    stem = out_dir / f"{name}_seed{result.seed}"
    write_rows(
        f"{stem}_estimate.csv",
        ["parameter", "true", "estimate", "abs_error"],
        [
            (n, t, e, abs(e - t))
            for n, t, e in zip(result.names, result.truth_physical, result.physical)
        ],
    )
    write_rows(
        f"{stem}_theta.csv",
        ["parameter", "true", "estimate", "abs_error", "std_error"],
        [
            (n, t, e, abs(e - t), se)
            for n, t, e, se in zip(result.theta_names, result.truth_theta, result.theta, result.theta_std_error)
        ],
    )
    Path(f"{stem}_report.txt").write_text(result.to_text() + "\n")
    write_rows(
        f"{stem}_history.csv",
        ["N"] + result.names,
        [[n] + list(row) for n, row in zip(result.checkpoints, result.history)],
    )


@dataclass
class IdentificationSummary:
    name: str
    names: List[str]
    seeds: List[int]
    truth: np.ndarray
    mean_estimate: np.ndarray
    estimates: np.ndarray        # (n_seeds, n_params)
    checkpoints: List[int]
    mean_history: np.ndarray     # (n_checkpoints, n_params)
    snr_db: np.ndarray           # per seed
    n_samples: int

    @property
    def mean_snr_db(self) -> float:
        return float(np.mean(self.snr_db))

    def estimate(self, name: str) -> float:
        return float(self.mean_estimate[self.names.index(name)])

    def to_text(self) -> str:
        lines = [f"{self.name}: {len(self.seeds)} seed(s), N = {self.n_samples}, SNR {self.mean_snr_db:.2f} dB"]
        for n, t, e in zip(self.names, self.truth, self.mean_estimate):
            lines.append(f"  {n:>6}  true {t:>10.5g}  estimate {e:>12.6g}")
        return "\n".join(lines)


def _seed_job(args):
    config, seed, out_dir = args
    traj_path = None
    if config.save_trajectory and out_dir is not None:
        traj_path = Path(out_dir) / f"{config.name}_seed{seed}_trajectory.csv"
    return run_seed(config, seed, traj_path)


def run_identification(
    config: ExperimentConfig,
    out_dir=None,
    seeds: Optional[Sequence[int]] = None,
    jobs: int = 1,
) -> IdentificationSummary:
    """Run every seed and write per-seed and aggregate CSV files to ``out_dir``."""
    seeds = list(config.seeds if seeds is None else seeds)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    args = [(config, s, out) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_seed_job, args))
    else:
        results = [_seed_job(a) for a in args]

    estimates = np.array([r.physical for r in results])
    with np.errstate(invalid="ignore"):
        histories = np.array([r.history for r in results])
        mean_history = _nanmean(histories, axis=0)
        mean_estimate = _nanmean(estimates, axis=0)
    first = results[0]
    summary = IdentificationSummary(
        name=config.name,
        names=first.names,
        seeds=seeds,
        truth=first.truth_physical,
        mean_estimate=mean_estimate,
        estimates=estimates,
        checkpoints=first.checkpoints,
        mean_history=mean_history,
        snr_db=np.array([r.snr_db for r in results]),
        n_samples=first.n_samples,
    )
    if out is not None:
        for r in results:
            write_seed_outputs(r, out, config.name)
        write_rows(
            out / f"{config.name}_mean_history.csv",
            ["N"] + summary.names,
            [[n] + list(row) for n, row in zip(summary.checkpoints, summary.mean_history)],
        )
        write_rows(
            out / f"{config.name}_summary.csv",
            ["parameter", "true", "mean_estimate", "abs_error"],
            [(n, t, e, abs(e - t)) for n, t, e in zip(summary.names, summary.truth, summary.mean_estimate)],
        )
        write_rows(
            out / f"{config.name}_snr.csv",
            ["seed", "snr_db"],
            [(r.seed, r.snr_db) for r in results] + [("mean", summary.mean_snr_db)],
        )
    return summary


def _nanmean(x: np.ndarray, axis: int) -> np.ndarray:
    """Mean ignoring NaN; all-NaN slices stay NaN without a warning."""
    count = np.sum(~np.isnan(x), axis=axis)
    total = np.nansum(x, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


# --- contraction probe -------------------------------------------------------------


@dataclass
class ProbeConfig:
    name: str
    model: str
    gamma: float
    ts: float
    baselines: List[float]
    step_to: float
    step_time: float
    duration: float          # ms
    settle_time: float
    noise: float = 0.0
    tolerance: float = 0.1
    base_dir: Optional[Path] = None

    @classmethod
    def from_file(cls, path) -> "ProbeConfig":
        path = config_path(path)
        p = _read(path)
        if "probe" not in p:
            raise ConfigurationError(f"{path} has no [probe] section")
        x = p["probe"]
        return cls(
            name=x.get("name", path.stem),
            model=x["model"],
            gamma=x.getfloat("gamma"),
            ts=x.getfloat("ts"),
            baselines=_floats(x["baselines"]),
            step_to=x.getfloat("step_to"),
            step_time=x.getfloat("step_time"),
            duration=x.getfloat("duration"),
            settle_time=x.getfloat("settle_time"),
            noise=x.getfloat("noise", 0.0),
            tolerance=x.getfloat("tolerance", 0.1),
            base_dir=path.parent,
        )


def run_contraction_probe(config: ProbeConfig, out_dir=None) -> ct.ProbeReport:
    model = load_model(config.model, config.base_dir)
    report = ct.step_response_probe(
        model,
        config.gamma,
        config.ts,
        config.baselines,
        config.step_to,
        config.step_time,
        config.duration,
        noise=config.noise,
        settle_time=config.settle_time,
        tolerance=config.tolerance,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ["t"] + [f"v_baseline_{_fmt(b)}" for b in config.baselines] + ["spread"]
        rows = np.column_stack([report.t, report.voltages.T, report.spread])
        write_rows(out / f"{config.name}_traces.csv", header, rows)
        write_rows(out / f"{config.name}_report.csv", ["quantity", "value"], report.rows())
        (out / f"{config.name}_report.txt").write_text(report.to_text() + "\n")
    return report


# --- gain bound ---------------------------------------------------------------------


@dataclass
class GainBoundConfig:
    name: str
    model: str
    metric: str                  # "identity" or "diagonal"
    weights: Optional[List[float]]
    v_range: tuple
    points: Optional[np.ndarray] = None
    samples: int = ct.DEFAULT_SAMPLES
    seed: int = ct.DEFAULT_SEED
    base_dir: Optional[Path] = None

    @classmethod
    def from_file(cls, path) -> "GainBoundConfig":
        path = config_path(path)
        p = _read(path)
        if "gainbound" not in p:
            raise ConfigurationError(f"{path} has no [gainbound] section")
        x = p["gainbound"]
        metric = x.get("metric", "identity").strip().lower()
        if metric not in ("identity", "diagonal"):
            raise ConfigurationError("metric must be 'identity' or 'diagonal'")
        points = None
        if "points" in x:
            rows = [r for r in x["points"].split("|") if r.strip()]
            points = np.array([_floats(r) for r in rows])
        return cls(
            name=x.get("name", path.stem),
            model=x["model"],
            metric=metric,
            weights=_floats(x["weights"]) if "weights" in x else None,
            v_range=tuple(_floats(x.get("v_range", "-120, 120"))),
            points=points,
            samples=int(x.getfloat("samples", ct.DEFAULT_SAMPLES)),
            seed=x.getint("seed", ct.DEFAULT_SEED),
            base_dir=path.parent,
        )


def run_gain_bound(config: GainBoundConfig, out_dir=None) -> ct.GainBoundReport:
    model = load_model(config.model, config.base_dir)
    identity, _ = ct.internal_contraction_rate(model)
    if config.metric == "identity":
        metric = identity
    else:
        if config.weights is None or len(config.weights) != model.n_gates:
            raise ConfigurationError(f"diagonal metric needs {model.n_gates} weights")
        metric = ct.Metric.diagonal(config.weights, identity.lam)
    box = ct.StateBox(config.v_range, model.n_gates)
    report = ct.gain_bound(
        model, metric, box, sampler=ct.box_sampler(config.samples, config.seed), points=config.points
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / f"{config.name}_report.csv", ["quantity", "value"], report.rows())
        (out / f"{config.name}_report.txt").write_text(report.to_text() + "\n")
    return report


# --- trajectory verification ---------------------------------------------------------


@dataclass
class VerifyReport:
    steps: int
    max_state_deviation: float
    max_step_residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_state_deviation <= self.tolerance and self.max_step_residual <= self.tolerance

    def to_text(self) -> str:
        verdict = "OK" if self.passed else "MISMATCH"
        return (
            f"{verdict}: {self.steps} steps, max re-simulation deviation {self.max_state_deviation:.3g}, "
            f"max step-identity residual {self.max_step_residual:.3g} (tolerance {self.tolerance:g})"
        )


def verify_trajectory(traj: Trajectory, model: ConductanceModel, gamma: float, ts: float,
                      v_range=kin.V_RANGE, tolerance: float = 1e-9) -> VerifyReport:
    """Re-simulate from the recorded initial state and inputs; check the update identity."""
    if not math.isclose(traj.ts, ts, rel_tol=1e-9):
        raise ConfigurationError(f"trajectory sampling period {traj.ts} differs from configured {ts}")
    n = len(traj)
    cfg = ClosedLoopConfig(gamma, ts, n, v0=float(traj.v[0]), w0=traj.w[0], v_range=v_range)
    again = simulate_closed_loop(model, cfg, traj.r, traj.e)
    dev = max(float(np.max(np.abs(again.v - traj.v))), float(np.max(np.abs(again.w - traj.w))))
    v = traj.v[:-1]
    prod = gate_products(model.layout, traj.w[:-1])
    g = model.leak_g * (v - model.leak_nu) + np.sum(prod * model.g_max * (v[:, None] - model.nu), axis=1)
    pred = traj.v[:-1] + ts / model.c * (-g + gamma * (traj.r - traj.v[:-1]) + traj.e)
    scale = max(1.0, float(np.max(np.abs(traj.v))))
    resid = float(np.max(np.abs(pred - traj.v[1:]))) / scale
    return VerifyReport(n, dev, resid, tolerance)
