"""Command-line entry point: ``clampid identify|probe|gainbound|verify``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .estimator import InvalidEstimate, RankDeficientError
from .neuron import ConfigurationError, SimulationDiverged, Trajectory

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PERSISTENCY = 2
EXIT_DIVERGED = 3


def _cmd_identify(args) -> int:
    config = ex.ExperimentConfig.from_file(args.config)
    seeds = ex.parse_seeds(args.seeds) if args.seeds else None
    summary = ex.run_identification(config, out_dir=args.out, seeds=seeds, jobs=args.jobs)
    print(summary.to_text())
    return EXIT_OK


def _cmd_probe(args) -> int:
    report = ex.run_contraction_probe(ex.ProbeConfig.from_file(args.config), out_dir=args.out)
    print(report.to_text())
    return EXIT_OK


def _cmd_gainbound(args) -> int:
    report = ex.run_gain_bound(ex.GainBoundConfig.from_file(args.config), out_dir=args.out)
    print(report.to_text())
    return EXIT_OK


def _cmd_verify(args) -> int:
    config = ex.ExperimentConfig.from_file(args.config)
    traj = Trajectory.from_csv(args.trajectory, gamma=config.gamma)
    report = ex.verify_trajectory(
        traj, config.build_model(), config.gamma, config.ts, config.v_range, args.tolerance
    )
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clampid",
        description="Closed-loop identification of conductance-based neuron models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        return p

    p = add("identify", _cmd_identify, "simulate clamp experiments and estimate parameters")
    p.add_argument("config", help="configuration file or shipped config name")
    p.add_argument("--seeds", help="override the seed list, e.g. 1-5 or 1,3,7")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")

    p = add("probe", _cmd_probe, "step-response contraction probe")
    p.add_argument("config", help="configuration file or shipped config name")

    p = add("gainbound", _cmd_gainbound, "feedback gain lower bounds")
    p.add_argument("config", help="configuration file or shipped config name")

    p = add("verify", _cmd_verify, "re-simulate a trajectory file and check it")
    p.add_argument("trajectory", type=Path)
    p.add_argument("config", help="configuration file or shipped config name")
    p.add_argument("--tolerance", type=float, default=1e-9)

    sub.add_parser("configs", help="list shipped configurations").set_defaults(
        func=lambda args: print("\n".join(ex.shipped_configs())) or EXIT_OK
    )
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ex.StageError):
        exc = exc.cause
    if isinstance(exc, (RankDeficientError, InvalidEstimate)):
        return EXIT_PERSISTENCY
    if isinstance(exc, SimulationDiverged):
        return EXIT_DIVERGED
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ex.StageError, RankDeficientError, InvalidEstimate, SimulationDiverged,
            ConfigurationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
