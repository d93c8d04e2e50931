"""Command-line entry points: simulate, filter, rates, diagnose."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigurationError, FilterError
from .harness import ExperimentConfig, config_from_dict, estimate_recurrence_coefficient, \
    load_config, run_experiment, run_rate_study, save_report
from .model import get_model, simulate_truth


def _write_path_series(path: Path, name: str, times, rows) -> None:
    with open(path, "w", encoding="ascii") as handle:
        width = rows.shape[1]
        handle.write("k,t," + ",".join(f"{name}{j}" for j in range(width)) + "\n")
        for k, (t, row) in enumerate(zip(times, rows)):
            cells = [str(k), repr(float(t))] + [repr(float(v)) for v in row]
            handle.write(",".join(cells) + "\n")


def _load_cfg(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = config_from_dict({})
    updates = {}
    if getattr(args, "model", None):
        updates["model"] = args.model
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "replications", None) is not None:
        updates["replications"] = args.replications
    if getattr(args, "threads", None) is not None:
        updates["threads"] = args.threads
    if updates:
        cfg = replace(cfg, **updates)
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    model = get_model(cfg.model)
    grid = cfg.grid.build()
    truth, obs = simulate_truth(model, grid, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_path_series(out / "truth.csv", "x", grid.knots, truth)
    _write_path_series(out / "obs.csv", "o", grid.knots, obs)
    print(f"wrote {out / 'truth.csv'} and {out / 'obs.csv'}")
    return 0


def _cmd_filter(args) -> int:
    cfg = _load_cfg(args)
    artifacts = run_experiment(cfg)
    print(f"experiment artifacts under {artifacts.out_dir}")
    if artifacts.error_path is not None:
        print(f"oracle error table: {artifacts.error_path}")
    return 0


def _cmd_rates(args) -> int:
    cfg = _load_cfg(args)
    report = run_rate_study(args.axis, cfg)
    save_report(report, cfg.out_dir)
    print(f"axis {report.axis}: fitted slope {report.slope:.4f} "
          f"(+- {report.slope_half_width:.4f}), theory {report.theory_slope:.4f}")
    if report.notes:
        print(report.notes)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    model = get_model(cfg.model)
    grid = cfg.grid.build()
    _truth, obs = simulate_truth(model, grid, cfg.seed)
    diag = estimate_recurrence_coefficient(model, grid, obs, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": cfg.model,
        "r_hat": diag.r_hat,
        "g_hat": diag.g_hat,
        "ratio_sup": diag.ratio_sup,
        "per_step_ratios": list(diag.per_step_ratios),
        "below_one": diag.below_one,
        "failed": diag.failed,
        "message": diag.message,
    }
    with open(out / "recurrence.json", "w", encoding="ascii") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    verdict = "< 1 (contracting)" if diag.below_one else ">= 1 (no contraction certificate)"
    print(f"recurrence estimate {diag.r_hat:.4f} {verdict}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsdefilter",
        description="Kernel-learning FBSDE filter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", type=str, default=None,
                       help="zoo model name (linear1d, ou1d, doublewell1d, linear2d)")
        p.add_argument("--config", type=str, default=None,
                       help="JSON config mirroring the experiment fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--replications", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="simulate a hidden path and observations")
    common(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_filter = sub.add_parser("filter", help="run the filter and baselines")
    common(p_filter)
    p_filter.set_defaults(func=_cmd_filter)

    p_rates = sub.add_parser("rates", help="empirical convergence-rate study")
    common(p_rates)
    p_rates.add_argument("--axis", choices=("L", "M", "N", "dt"), required=True)
    p_rates.set_defaults(func=_cmd_rates)

    p_diag = sub.add_parser("diagnose", help="recurrence-coefficient diagnostic")
    common(p_diag)
    p_diag.set_defaults(func=_cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as err:
        where = args.config if getattr(args, "config", None) else "<config>"
        print(f"{where}:{err.lineno}:{err.colno}: invalid config: {err.msg}",
              file=sys.stderr)
        return 2
    except (ConfigurationError, FilterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
