"""Command-line entry point.

Every subcommand resolves its configuration from (optional) JSON config file
plus flags (flags win), derives all randomness from a single master seed,
writes its declared output files atomically, and prints a one-line JSON
summary to stdout.  Exit codes: 0 success, 2 invalid configuration, 3
resource-cap refusal.  Outputs are removed if the run fails partway.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

from . import brw
from .coalescent import (
    LambdaMeasure,
    RateTable,
    simulate_lambda_coalescent,
)
from .distributions import PDParams, mittag_leffler_moment, phi_moment, psi_alpha
from .errors import ParameterError, ResourceCapError
from .estimators import (
    ScalingConstants,
    estimate_cn,
    estimate_speed,
    pd_diagnostics,
    weight_tail_curve,
)
from .rng import DEFAULT_SEED, entropy_seed, seed_stream

SUBCOMMANDS = (
    "simulate",
    "speed",
    "cn",
    "coalescent",
    "rates",
    "pd-diagnostics",
    "tails",
    "constants",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run: subcommand plus its flat option mapping."""

    subcommand: str
    options: tuple

    @classmethod
    def from_mapping(cls, subcommand: str, options: dict) -> "ExperimentConfig":
        if subcommand not in SUBCOMMANDS:
            raise ParameterError(f"unknown subcommand {subcommand!r}")
        return cls(subcommand=subcommand, options=tuple(sorted(options.items())))

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "options": dict(self.options)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls.from_mapping(data["subcommand"], data["options"])


def _fmt(value) -> str:
    """CSV cell format: 17 significant digits for floats, locale-free."""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _json_ready(obj):
    """Strict-JSON form: non-finite floats become the strings the beta flag
    accepts back ("inf", "-inf", "nan")."""
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        if math.isnan(obj):
            return "nan"
        return "inf" if obj > 0 else "-inf"
    return obj


class _RunOutputs:
    """Tracks files written by one command so failures leave nothing behind."""

    def __init__(self):
        self.paths = []

    def write_csv(self, path: str, header: list, rows) -> None:
        tmp = f"{path}.tmp.{os.getpid()}"
        try:
            with open(tmp, "w", newline="") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.paths.append(path)

    def write_json(self, path: str, payload: dict) -> None:
        tmp = f"{path}.tmp.{os.getpid()}"
        try:
            with open(tmp, "w") as fh:
                json.dump(_json_ready(payload), fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.paths.append(path)

    def discard_all(self) -> None:
        for path in self.paths:
            try:
                os.unlink(path)
            except OSError:
                pass


def _parse_beta(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return brw.INFINITY
    return float(text)


def _add_seed_flags(sub):
    sub.add_argument("--seed", type=int, default=DEFAULT_SEED,
                     help=f"master seed (default {DEFAULT_SEED})")
    sub.add_argument("--entropy", action="store_true",
                     help="draw the master seed from OS entropy instead")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdbrw",
        description="Branching random walk with exponential-weight selection: "
                    "simulation and Monte Carlo verification tools.",
    )
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("simulate", help="run the particle system and export trajectory/genealogy")
    p.add_argument("--n", type=int, required=True, help="number of particles")
    p.add_argument("--beta", type=_parse_beta, required=True, help="selection exponent, or 'inf'")
    p.add_argument("--engine", choices=brw.ENGINES, default=None)
    p.add_argument("--variant", choices=brw.VARIANTS, default="standard")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True, help="trajectory CSV path")
    p.add_argument("--genealogy-out", default=None, help="genealogy CSV path")
    _add_seed_flags(p)

    p = subs.add_parser("speed", help="estimate the front speed")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--beta", type=_parse_beta, required=True)
    p.add_argument("--engine", choices=brw.ENGINES, default=None)
    p.add_argument("--variant", choices=brw.VARIANTS, default="standard")
    p.add_argument("--steps", type=int, required=True, help="steps per replicate")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--out", default=None, help="report file path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_seed_flags(p)

    p = subs.add_parser("cn", help="estimate the pair-coalescence probability")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--mode", choices=("semi_analytic", "empirical_pair"),
                   default="semi_analytic")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_seed_flags(p)

    p = subs.add_parser("coalescent", help="simulate the continuous-time coalescent")
    p.add_argument("--n-lineages", type=int, required=True)
    p.add_argument("--measure", choices=("beta", "kingman"), required=True)
    p.add_argument("--lam", type=float, default=1.0,
                   help="beta-family parameter in (0,2); 1 gives the uniform measure")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--out", required=True, help="trajectory CSV path")
    _add_seed_flags(p)

    p = subs.add_parser("rates", help="export a merger-rate table")
    p.add_argument("--measure", choices=("beta", "kingman"), required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--bmax", type=int, required=True)
    p.add_argument("--out", required=True, help="rates CSV path")

    p = subs.add_parser("pd-diagnostics", help="stick-breaking convergence diagnostics")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--n-sticks", type=int, required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_seed_flags(p)

    p = subs.add_parser("tails", help="scaled tail of the largest resampling weight")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--x-grid", default="0.3,0.5,0.7",
                   help="comma-separated grid points in (0,1)")
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_seed_flags(p)

    p = subs.add_parser("constants", help="print closed-form constants as JSON")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--p", type=float, default=1.0)

    for name, sub in subs.choices.items():
        sub.add_argument("--config", default=None,
                         help="JSON file with flat keys mirroring the flags; flags override")
    return parser


def _apply_config_file(parser, argv):
    """Load --config JSON (if any) as subparser defaults, rejecting unknown keys."""
    if not argv or argv[0] not in SUBCOMMANDS:
        return
    path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
    if path is None:
        return
    with open(path) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ParameterError("config file must hold a JSON object with flat keys")
    sub = parser._subparsers._group_actions[0].choices[argv[0]]
    known = {a.dest for a in sub._actions}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"config keys not accepted by '{argv[0]}': {sorted(unknown)}")
    if "beta" in values and isinstance(values["beta"], str):
        values["beta"] = _parse_beta(values["beta"])
    sub.set_defaults(**values)
    for action in sub._actions:
        if action.dest in values:
            action.required = False


def _resolve_seed(args) -> int:
    if getattr(args, "entropy", False):
        return entropy_seed()
    return args.seed


def _report_payload(report, config: ExperimentConfig) -> dict:
    return {
        "manifest": {
            "report": "name, params, estimate, std_error, n_samples, ci95 "
                      "(= estimate +- 1.96 std_error), reference (analytic "
                      "target or null), elapsed_seconds",
        },
        "config": config.to_dict(),
        "report": report.to_dict(),
    }


def _write_report(outputs, args, report, config) -> None:
    if args.out is None:
        return
    if args.format == "json":
        outputs.write_json(args.out, _report_payload(report, config))
    else:
        header = ["name", "estimate", "std_error", "n_samples",
                  "ci95_lo", "ci95_hi", "reference"]
        lo, hi = report.ci95
        ref = report.reference if report.reference is not None else float("nan")
        outputs.write_csv(args.out, header,
                          [[report.name, report.estimate, report.std_error,
                            report.n_samples, lo, hi, ref]])


def _cmd_simulate(args, outputs) -> dict:
    config = brw.BRWConfig(
        n_particles=args.n, beta=args.beta, engine=args.engine, variant=args.variant
    )
    seed = _resolve_seed(args)
    trajectory, genealogy = brw.run(config, args.steps, seed_stream(seed))
    rows = [
        [s.generation, s.x_eq, float(s.positions.max()), float(s.positions.min())]
        for s in trajectory
    ]
    outputs.write_csv(args.out, ["generation", "x_eq", "max_pos", "min_pos"], rows)
    written = [args.out]
    if args.genealogy_out:
        gen_rows = [
            [t + 1, i + 1, int(parent) + 1]
            for t, parents in enumerate(genealogy.parents)
            for i, parent in enumerate(parents)
        ]
        outputs.write_csv(
            args.genealogy_out, ["generation", "child_index", "parent_index"], gen_rows
        )
        written.append(args.genealogy_out)
    return {
        "subcommand": "simulate",
        "seed": seed,
        "n_particles": args.n,
        "beta": args.beta,
        "engine": config.engine,
        "steps": args.steps,
        "final_x_eq": trajectory[-1].x_eq,
        "outputs": written,
    }


def _cmd_speed(args, outputs) -> dict:
    config = brw.BRWConfig(
        n_particles=args.n, beta=args.beta, engine=args.engine, variant=args.variant
    )
    seed = _resolve_seed(args)
    report = estimate_speed(config, args.steps, args.replicates, seed)
    exp_config = ExperimentConfig.from_mapping(
        "speed",
        {"n": args.n, "beta": args.beta, "engine": config.engine,
         "variant": args.variant, "steps": args.steps,
         "replicates": args.replicates, "seed": seed, "format": args.format},
    )
    _write_report(outputs, args, report, exp_config)
    summary = report.to_dict()
    summary["subcommand"] = "speed"
    summary["outputs"] = [args.out] if args.out else []
    return summary


def _cmd_cn(args, outputs) -> dict:
    params = PDParams(alpha=args.alpha, theta=args.theta)
    seed = _resolve_seed(args)
    report = estimate_cn(params, args.n, args.replicates, args.mode, seed)
    exp_config = ExperimentConfig.from_mapping(
        "cn",
        {"alpha": args.alpha, "theta": args.theta, "n": args.n,
         "replicates": args.replicates, "mode": args.mode, "seed": seed,
         "format": args.format},
    )
    _write_report(outputs, args, report, exp_config)
    summary = report.to_dict()
    summary["subcommand"] = "cn"
    summary["outputs"] = [args.out] if args.out else []
    return summary


def _measure_from_args(args) -> LambdaMeasure:
    if args.measure == "beta":
        return LambdaMeasure.beta_family(args.lam)
    return LambdaMeasure.kingman()


def _cmd_coalescent(args, outputs) -> dict:
    measure = _measure_from_args(args)
    seed = _resolve_seed(args)
    table = RateTable.build(measure, args.n_lineages)
    rows = []
    total_pair_time = 0.0
    for r in range(args.replicates):
        traj = simulate_lambda_coalescent(
            args.n_lineages, measure, seed_stream(seed, r), rate_table=table
        )
        total_pair_time += traj.times[-1]
        for t, state in zip(traj.times, traj.states):
            row = [t, state.n_blocks, state.to_string()]
            if args.replicates > 1:
                row = [r] + row
            rows.append(row)
    header = ["time", "n_blocks", "partition"]
    if args.replicates > 1:
        header = ["replicate"] + header
    outputs.write_csv(args.out, header, rows)
    return {
        "subcommand": "coalescent",
        "seed": seed,
        "n_lineages": args.n_lineages,
        "measure": args.measure,
        "replicates": args.replicates,
        "mean_absorption_time": total_pair_time / args.replicates,
        "outputs": [args.out],
    }


def _cmd_rates(args, outputs) -> dict:
    table = RateTable.build(_measure_from_args(args), args.bmax)
    outputs.write_csv(args.out, ["b", "k", "rate"], table.rows())
    return {
        "subcommand": "rates",
        "measure": args.measure,
        "lam": args.lam if args.measure == "beta" else None,
        "bmax": args.bmax,
        "n_rates": sum(1 for _ in table.rows()),
        "outputs": [args.out],
    }


def _cmd_pd_diagnostics(args, outputs) -> dict:
    params = PDParams(alpha=args.alpha, theta=args.theta)
    seed = _resolve_seed(args)
    reports = pd_diagnostics(params, args.n_sticks, args.replicates, seed,
                             gamma=args.gamma)
    exp_config = ExperimentConfig.from_mapping(
        "pd-diagnostics",
        {"alpha": args.alpha, "theta": args.theta, "n_sticks": args.n_sticks,
         "replicates": args.replicates, "gamma": args.gamma, "seed": seed,
         "format": args.format},
    )
    if args.out:
        if args.format == "json":
            payload = {
                "manifest": {"reports": "mapping of diagnostic name to report "
                                        "(see report manifest in each entry)"},
                "config": exp_config.to_dict(),
                "reports": {k: r.to_dict() for k, r in reports.items()},
            }
            outputs.write_json(args.out, payload)
        else:
            header = ["name", "estimate", "std_error", "n_samples", "reference"]
            rows = [
                [r.name, r.estimate, r.std_error, r.n_samples,
                 r.reference if r.reference is not None else float("nan")]
                for r in reports.values()
            ]
            outputs.write_csv(args.out, header, rows)
    return {
        "subcommand": "pd-diagnostics",
        "seed": seed,
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "outputs": [args.out] if args.out else [],
    }


def _cmd_tails(args, outputs) -> dict:
    params = PDParams(alpha=args.alpha, theta=args.theta)
    seed = _resolve_seed(args)
    grid = [float(tok) for tok in args.x_grid.split(",") if tok.strip()]
    result = weight_tail_curve(params, args.n, grid, args.replicates, seed)
    rows = [
        [p.x, p.scaled_tail, p.std_error, p.reference] for p in result.points
    ]
    if args.out:
        if args.format == "json":
            payload = {
                "manifest": {
                    "points": "x, scaled_tail (= L_N * empirical tail), "
                              "std_error, reference (analytic limit)",
                    "second_weight": "scaled mean of the second-largest weight",
                },
                "config": {"alpha": args.alpha, "theta": args.theta, "n": args.n,
                           "replicates": args.replicates, "seed": seed},
                "points": [dict(zip(("x", "scaled_tail", "std_error", "reference"), r))
                           for r in rows],
                "second_weight": result.second_weight.to_dict(),
            }
            outputs.write_json(args.out, payload)
        else:
            outputs.write_csv(args.out, ["x", "scaled_tail", "std_error", "reference"], rows)
    return {
        "subcommand": "tails",
        "seed": seed,
        "points": [dict(zip(("x", "scaled_tail", "std_error", "reference"), r))
                   for r in rows],
        "second_weight_scaled_mean": result.second_weight.estimate,
        "outputs": [args.out] if args.out else [],
    }


def _cmd_constants(args, outputs) -> dict:
    params = PDParams(alpha=args.alpha, theta=args.theta)
    entries = [
        {"name": "psi_alpha", "params": {"alpha": args.alpha},
         "value": psi_alpha(args.alpha)},
        {"name": "phi_moment",
         "params": {"alpha": args.alpha, "theta": args.theta, "gamma": args.gamma},
         "value": phi_moment(params, args.gamma)},
        {"name": "mittag_leffler_moment",
         "params": {"alpha": args.alpha, "p": args.p},
         "value": mittag_leffler_moment(args.alpha, args.p)},
    ]
    if args.theta < args.alpha:
        sc = ScalingConstants(args.alpha, args.theta)
        entries.append({"name": "lambda_exponent",
                        "params": {"alpha": args.alpha, "theta": args.theta},
                        "value": sc.lam})
        entries.append({"name": "c_alpha_theta",
                        "params": {"alpha": args.alpha, "theta": args.theta},
                        "value": sc.c_alpha_theta})
    return {"subcommand": "constants", "constants": entries, "outputs": []}


_HANDLERS = {
    "simulate": _cmd_simulate,
    "speed": _cmd_speed,
    "cn": _cmd_cn,
    "coalescent": _cmd_coalescent,
    "rates": _cmd_rates,
    "pd-diagnostics": _cmd_pd_diagnostics,
    "tails": _cmd_tails,
    "constants": _cmd_constants,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    outputs = _RunOutputs()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        summary = _HANDLERS[args.subcommand](args, outputs)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        outputs.discard_all()
        return 2
    except ResourceCapError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        outputs.discard_all()
        return 3
    except BaseException:
        outputs.discard_all()
        raise
    print(json.dumps(_json_ready(summary), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
