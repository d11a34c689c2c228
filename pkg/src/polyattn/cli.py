"""Command-line entry point: ``polyattn <subcommand> [flags]``.

Verifier subcommands (bounds, moments, gradmoments, sweep) print one
``PASS``/``FAIL`` line and exit 0 or 1. Usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

from .experiments.config import ConfigError, ExperimentConfig
from .experiments.report import ReportParseError, has_known_schema, render_report
from .experiments.runner import SweepGrid, default_workers, scale_sweep, train, write_sweep_csv
from .attention import write_trace_csv
from .numerics import RngStream
from .theory import (
    BoundViolation,
    MomentRow,
    TheoryModelParams,
    closed_form_entry_moment,
    closed_form_grad_moment_p1,
    exact_entry_moment,
    exact_grad_moment_p1,
    mc_grad_frob,
    mc_poly_frob,
    verify_softmax_bounds,
    write_moments_csv,
)

# stream ids under the user seed, one per verifier
_BOUNDS_STREAM = 100
_MOMENTS_STREAM = 101
_GRAD_STREAM = 102

Z_BAND = 3.0
LEADING_ORDER_BAND = 0.15


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (default 0)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: out_dir from config)")


def _config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    group = p.add_argument_group("config keys (override the config file)")
    for f in fields(ExperimentConfig):
        if f.name in ("seed", "out_dir") or f.name in skip:
            continue
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyattn", description="Attention-activation norm verifiers and experiments.")
    sub = parser.add_subparsers(dest="command", metavar="{bounds,moments,gradmoments,sweep,train,report}")

    p = sub.add_parser("bounds", help="check the softmax and softmax-Jacobian Frobenius bounds on random matrices")
    _common(p)
    p.add_argument("--N", type=_int_list, default=[2, 4, 8, 16, 32, 64, 128])
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--sigma", type=_float_list, default=[0.1, 1.0, 10.0])

    for name, help_text in (("moments", "Monte-Carlo moments of powered score matrices"),
                            ("gradmoments", "Monte-Carlo moments of the score gradient w.r.t. Q")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--p", type=int, default=1)
        p.add_argument("--N", type=int, default=8)
        p.add_argument("--D", type=int, default=4)
        p.add_argument("--d", type=int, default=None, help="head width (default: D for the full sampler, 1 otherwise)")
        p.add_argument("--sigma-x", type=float, default=1.0)
        p.add_argument("--sigma-t", type=float, default=1.0)
        p.add_argument("--trials", type=int, default=20_000)
        if name == "moments":
            p.add_argument("--sampler", choices=("proof", "full"), default="proof")
            p.add_argument("--scaled", action="store_true", help="divide each powered matrix by sqrt(N)")
        else:
            p.add_argument("--method", choices=("autodiff", "analytic"), default="autodiff")
            p.add_argument("--divide-sqrt-d", action="store_true")

    p = sub.add_parser("train", help="train one model and write its norm trace")
    _common(p)
    _config_flags(p)

    p = sub.add_parser("sweep", help="train x^3/k over a grid of N and k")
    _common(p)
    _config_flags(p, skip=("N", "activation"))
    p.add_argument("--Ns", type=_int_list, default=[8, 32, 128])
    p.add_argument("--ks", type=_float_list, default=None, help="explicit k values (default: 1e-3..1e3, one per decade)")
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="render CSV outputs to an SVG")
    _common(p)
    p.add_argument("inputs", nargs="*", type=Path,
                   help="CSV files (default: trace, sweep and moments CSVs in the output directory)")
    p.add_argument("--svg", type=Path, default=None, help="output file (default: <out>/report.svg)")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return cfg.override(overrides) if overrides else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _verdict(ok: bool, name: str, detail: str) -> int:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if ok else 1


def cmd_bounds(args, cfg) -> int:
    if not args.N or any(n < 1 for n in args.N) or args.samples < 1 or not args.sigma:
        raise UsageError("bounds needs positive --N values, --samples >= 1 and at least one --sigma")
    stream = RngStream(cfg.seed, _BOUNDS_STREAM)
    path = _out_dir(cfg) / "bounds.csv"
    try:
        report = verify_softmax_bounds(args.N, args.samples, args.sigma, stream)
    except BoundViolation as exc:
        return _verdict(False, "bounds", str(exc))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("N", "sigma", "samples", "max_softmax_ratio", "max_jacobian_ratio"))
        for key in sorted(report.softmax_ratio):
            n, sigma = key
            w.writerow((n, f"{sigma:.9g}", args.samples, f"{report.softmax_ratio[key]:.9g}",
                        f"{report.jacobian_ratio[key]:.9g}"))
    sm = max(report.softmax_ratio.values())
    jac = max(report.jacobian_ratio.values())
    return _verdict(True, "bounds", f"{report.samples} matrices, max ratio {sm:.6f} (softmax) {jac:.6f} (jacobian); {path}")


def _theory_params(args, sampler: str) -> TheoryModelParams:
    d = args.d if args.d is not None else (args.D if sampler == "full" else 1)
    try:
        return TheoryModelParams(N=args.N, D=args.D, d=d, p=args.p, sigma_x=args.sigma_x, sigma_t=args.sigma_t,
                                 sampler=sampler)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_rows(rows: list[tuple[MomentRow, str]]) -> tuple[bool, list[str]]:
    ok, notes = True, []
    for row, band in rows:
        if row.closed_form is None:
            continue
        if band == "z":
            good = abs(row.z_score) <= Z_BAND
            notes.append(f"{row.quantity} z={row.z_score:+.2f}")
        else:
            rel = row.estimate.mean / row.closed_form - 1.0
            good = abs(rel) <= LEADING_ORDER_BAND
            notes.append(f"{row.quantity} rel={rel:+.3f}")
        ok &= good
    return ok, notes


def cmd_moments(args, cfg) -> int:
    params = _theory_params(args, args.sampler)
    if args.trials < 100:
        raise UsageError("--trials must be at least 100")
    res = mc_poly_frob(params, args.scaled, args.trials, RngStream(cfg.seed, _MOMENTS_STREAM))
    rows: list[tuple[MomentRow, str]] = [(MomentRow("frob", params, args.scaled, res.frob), "z")]
    if params.sampler == "proof" and params.p <= params.D:
        # every entry of the product shares one distribution, so the squared
        # norm is N^2 times the entry moment (divided by N when scaled)
        div = params.N if args.scaled else 1
        band = "z" if params.p == 1 else "rel"
        lead = closed_form_entry_moment(params.D, params.p, params.sigma_x, params.sigma_t)
        exact = exact_entry_moment(params.D, params.p, params.sigma_x, params.sigma_t)
        rows.append((MomentRow("frob_sq", params, args.scaled, res.frob_sq, params.N**2 * lead / div), band))
        rows.append((MomentRow("entry_sq", params, args.scaled, res.entry_sq, lead / div), band))
        rows.append((MomentRow("entry_sq_exact", params, args.scaled, res.entry_sq, exact / div), "z"))
    else:
        rows.append((MomentRow("frob_sq", params, args.scaled, res.frob_sq), "z"))
        rows.append((MomentRow("entry_sq", params, args.scaled, res.entry_sq), "z"))
    path = _out_dir(cfg) / "moments.csv"
    write_moments_csv([r for r, _ in rows], path)
    ok, notes = _check_rows(rows)
    detail = ", ".join(notes) if notes else "no closed form for this sampler, estimates only"
    return _verdict(ok, "moments", f"{detail}; {path}")


def cmd_gradmoments(args, cfg) -> int:
    params = _theory_params(args, "full")
    if args.trials < 100:
        raise UsageError("--trials must be at least 100")
    est = mc_grad_frob(params, args.trials, RngStream(cfg.seed, _GRAD_STREAM), method=args.method,
                       divide_sqrt_d=args.divide_sqrt_d)
    rows: list[tuple[MomentRow, str]] = []
    if params.p == 1:
        div = params.d if args.divide_sqrt_d else 1
        args_ = (params.N, params.D, params.d, params.sigma_x, params.sigma_t)
        rows.append((MomentRow("grad_frob_sq", params, False, est, closed_form_grad_moment_p1(*args_) / div), "z"))
        rows.append((MomentRow("grad_frob_sq_exact", params, False, est, exact_grad_moment_p1(*args_) / div), "z"))
    else:
        rows.append((MomentRow("grad_frob_sq", params, False, est), "z"))
    path = _out_dir(cfg) / "gradmoments.csv"
    write_moments_csv([r for r, _ in rows], path)
    ok, notes = _check_rows(rows)
    detail = ", ".join(notes) if notes else f"mean {est.mean:.6g} +- {est.std_error:.3g}, no closed form for p > 1"
    return _verdict(ok, "gradmoments", f"{detail}; {path}")


def cmd_train(args, cfg) -> int:
    out = _out_dir(cfg)
    result = train(cfg)
    write_trace_csv(result.norm_trace, out / "trace.csv")
    with open(out / "result.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("final_loss", "accuracy", "diverged", "divergence_step"))
        acc = "" if result.final_accuracy is None else f"{result.final_accuracy:.9g}"
        step = "" if result.divergence_step is None else str(result.divergence_step)
        w.writerow((f"{result.final_loss:.9g}", acc, "true" if result.diverged else "false", step))
    (out / "config.txt").write_text(cfg.render(), encoding="utf-8")
    state = f"diverged at step {result.divergence_step}" if result.diverged else f"accuracy {result.final_accuracy:.4f}"
    print(f"train: {cfg.activation} N={cfg.N} final loss {result.final_loss:.6g}, {state}; {out}")
    return 0


def cmd_sweep(args, cfg) -> int:
    try:
        if args.ks is None:
            grid = SweepGrid.log_spaced(args.Ns, replicates=args.replicates)
        else:
            grid = SweepGrid(tuple(args.Ns), tuple(args.ks), args.replicates)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    workers = default_workers() if args.workers == 0 else args.workers
    rows, best = scale_sweep(grid, cfg, workers=workers)
    out = _out_dir(cfg)
    write_sweep_csv(rows, out / "sweep.csv")
    with open(out / "best_k.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("N", "best_k"))
        for n in sorted(best):
            w.writerow((n, f"{best[n]:.9g}"))
    ordered = [best[n] for n in sorted(best)]
    ok = all(a <= b for a, b in zip(ordered, ordered[1:]))
    detail = " ".join(f"N={n}:k={best[n]:.3g}" for n in sorted(best))
    return _verdict(ok, "sweep", f"best k {'nondecreasing' if ok else 'decreases'} in N ({detail}); {out / 'sweep.csv'}")


def cmd_report(args, cfg) -> int:
    out = _out_dir(cfg)
    inputs = args.inputs or [p for p in sorted(out.glob("*.csv")) if has_known_schema(p)]
    svg = args.svg or out / "report.svg"
    try:
        render_report(inputs, svg)
    except (ReportParseError, OSError) as exc:
        print(f"report: {exc}", file=sys.stderr)
        return 1
    print(f"report: {len(inputs)} input(s) -> {svg}")
    return 0


COMMANDS = {
    "bounds": cmd_bounds,
    "moments": cmd_moments,
    "gradmoments": cmd_gradmoments,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"polyattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"polyattn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
