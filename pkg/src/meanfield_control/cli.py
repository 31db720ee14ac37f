"""Command-line entry point: parse a config, run, write CSVs and a manifest.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
All files are written atomically (write to a temp file, then rename).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import ConfigError, NumericsError, load_config
from .experiments import (
    experiment_adjoint_consistency,
    experiment_convergence_rate,
    experiment_gradient_suite,
    timed,
    write_csv,
    write_manifest,
)
from .core import config_hash
from .gradient import optimize


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="meanfield-control",
        description="Steer an interacting particle ensemble with adjoint-based descent, "
                    "or run the verification experiments.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("solve", "solve the steering problem and write the optimal control"),
        ("check", "run the gradient/adjoint verification suite"),
        ("consistency", "adjoint consistency across particle counts"),
        ("rate", "convergence rate of optimal controls in the particle count"),
    ]:
        sp = sub.add_parser(name, help=desc)
        sp.add_argument("--config", required=True, help="path to the TOML run configuration")
        sp.add_argument("--out", default="./out", help="output directory (default ./out)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    return p


def _solve(config, out: Path) -> int:
    result, elapsed = timed(optimize, config)
    d = config.dimension
    u_rows = []
    nodes = config.grid().nodes
    for k in range(config.n_steps + 1):
        for agent in range(config.n_controls):
            row = {"node": k, "time": nodes[k], "agent": agent}
            row.update({f"u{a}": result.u_opt.values[k, agent, a] for a in range(d)})
            u_rows.append(row)
    write_csv(out / "u_star.csv",
              ["node", "time", "agent"] + [f"u{a}" for a in range(d)], u_rows)
    write_csv(out / "history.csv", ["iter", "cost", "grad_norm", "step"],
              ({"iter": h.iteration, "cost": h.cost, "grad_norm": h.grad_norm,
                "step": h.step} for h in result.history))
    write_manifest(out / "manifest.json", config, {"solve": elapsed},
                   ["u_star.csv", "history.csv"],
                   {"status": result.status, "final_cost": result.final_cost,
                    "final_grad_norm": result.final_grad_norm})
    print(f"status={result.status} cost={result.final_cost:.6e} "
          f"grad_norm={result.final_grad_norm:.3e} ({elapsed:.1f}s)")
    return 0 if result.status in ("converged", "max_iter") else 1


def _check(config, out: Path) -> int:
    report, elapsed = timed(experiment_gradient_suite, config)
    tag = config_hash(config)
    name = f"check_{tag}.csv"
    write_csv(out / name, ["check", "value", "threshold", "passed"], report.csv_rows())
    write_manifest(out / f"manifest_{tag}.json", config, {"check": elapsed}, [name],
                   {"all_passed": report.all_passed})
    for line in report.lines():
        print(line)
    return 0 if report.all_passed else 1


def _consistency(config, out: Path) -> int:
    report, elapsed = timed(experiment_adjoint_consistency, config)
    tag = config_hash(config)
    name = f"consistency_{tag}.csv"
    write_csv(out / name, ["n", "y_sup", "w2_initial", "ratio"], report.csv_rows())
    write_manifest(out / f"manifest_{tag}.json", config, {"consistency": elapsed}, [name],
                   {"fitted_c": report.fitted_c, "max_ratio": report.max_ratio,
                    "spearman_y": report.spearman_y})
    print(f"fitted C={report.fitted_c:.3e} max ratio={report.max_ratio:.3e} "
          f"spearman={report.spearman_y:+.2f} ({elapsed:.1f}s)")
    return 0


def _rate(config, out: Path) -> int:
    report, elapsed = timed(experiment_convergence_rate, config)
    tag = config_hash(config)
    name = f"rate_{tag}.csv"
    write_csv(out / name,
              ["n", "control_gap_sq", "w2_initial_sq", "ratio", "status", "iterations"],
              report.csv_rows())
    write_manifest(out / f"manifest_{tag}.json", config, {"rate": elapsed}, [name],
                   {"fitted_gamma": report.fitted_gamma, "spearman_gap": report.spearman_gap,
                    "complete": report.complete, "ref_status": report.ref_status})
    print(f"lambda={report.control_weight} fitted gamma={report.fitted_gamma:.3e} "
          f"spearman={report.spearman_gap:+.2f} complete={report.complete} ({elapsed:.1f}s)")
    if not report.complete:
        print("experiment incomplete: an optimizer run did not converge", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = {"solve": _solve, "check": _check,
                   "consistency": _consistency, "rate": _rate}[args.command]
        return handler(config, out)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
