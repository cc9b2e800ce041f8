"""Command-line entry point: ``probfe <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ResponseSet, StudyError, StudySpec, default_study_spec, load_study_spec
from .distributed import Coordinator, LocalExecutor, parse_address, run_workers
from .envelope import (
    compare_envelopes,
    convergence_trace,
    format_diff_table,
    load_envelope_dir,
    pointwise_envelope,
    write_convergence_csv,
    write_diff_csv,
    write_envelope_csvs,
)
from .pipeline import (
    StageFailed,
    read_series_csv,
    run_study,
    write_series_csv,
    write_summaries_csv,
)
from .rsm import Basis, fit_rse, read_coefficients_csv, write_coefficients_csv
from .sampler import derive_seed, draw_monte_carlo, draw_regular_design, read_samples_csv, write_samples_csv
from .sensitivity import (
    SensitivityMode,
    read_sensitivity_csv,
    reduce_key_set,
    sensitivity_matrix,
    sensitivity_scores,
    write_sensitivity_csv,
)
from .simulator import METRIC_UNITS, build_simulator

log = logging.getLogger("probfe")


def _spec(args) -> StudySpec:
    if args.config:
        spec = load_study_spec(Path(args.config).read_text())
    else:
        spec = default_study_spec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    return spec


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_sample(args) -> None:
    spec = _spec(args)
    n = args.n or (spec.n_mc if args.kind == "mc" else spec.n_rsm)
    draw = draw_monte_carlo if args.kind == "mc" else draw_regular_design
    samples = draw(spec, n, derive_seed(spec.seed, f"cli-{args.kind}"))
    write_samples_csv(samples, _out(args) / "samples.csv")


def cmd_simulate(args) -> None:
    spec = _spec(args)
    samples = read_samples_csv(args.samples)
    executor = LocalExecutor(build_simulator(spec), args.workers)
    results = executor.run_batch(samples, spec.seed, "cli")

    responses = ResponseSet(
        np.stack([r.series for r in results]),
        np.stack([r.summaries for r in results]),
        spec.metrics,
        [r.sample_id for r in results],
    )
    out = _out(args)
    write_summaries_csv(responses, out / "summaries.csv")
    write_series_csv(responses, out / "series.csv")


def cmd_fit(args) -> None:
    samples = read_samples_csv(args.samples)
    with open(args.summaries, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    metrics = rows[0][1:]
    y = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    model = fit_rse(samples, y, Basis.from_config(args.basis), metrics)
    write_coefficients_csv(model, _out(args) / "coefficients.csv")


def cmd_sensitivity(args) -> None:
    spec = _spec(args)
    model = read_coefficients_csv(args.coefficients)
    sub = spec.subset(model.variable_names)
    n = args.n or spec.surrogate_samples
    X1 = draw_monte_carlo(sub, n, derive_seed(spec.seed, "cli-sensitivity"))
    mode = SensitivityMode.from_config(args.mode or spec.sensitivity_mode)
    scores = sensitivity_scores(sensitivity_matrix(model, X1, sub.std_devs, mode, sub.means))
    reduced = reduce_key_set(scores, spec.k_override, spec.gap_window)
    write_sensitivity_csv(scores, reduced, _out(args) / "sensitivity.csv")


def cmd_reduce(args) -> None:
    spec = _spec(args)
    scores = read_sensitivity_csv(args.sensitivity)
    reduced = reduce_key_set(scores, args.k or spec.k_override, spec.gap_window)
    out = _out(args)
    write_sensitivity_csv(scores, reduced, out / "sensitivity.csv")
    payload = {"selected": list(reduced.selected), "k": reduced.k, "drop_at": reduced.gap_report.drop_at}
    (out / "reduced.json").write_text(json.dumps(payload, indent=2))
    print("\n".join(reduced.selected))


def cmd_envelope(args) -> None:
    spec = _spec(args)
    responses = read_series_csv(args.series, [spec.summary_for(m) for m in spec.metrics])
    lo, hi = spec.percentiles
    cycle_ms = float(spec.simulator.get("cycle_ms", 1000.0))
    env = pointwise_envelope(responses, lo, hi, trimmed=args.trimmed, cycle_ms=cycle_ms)
    out = _out(args)
    write_envelope_csvs(env, out)
    trace = convergence_trace(
        responses.summaries, 0, spec.convergence.window, spec.convergence.rel_tol,
        spec.percentiles, responses.metric_names[0],
    )
    write_convergence_csv(trace, out / "convergence.csv")


def cmd_compare(args) -> None:
    spec = _spec(args)
    diff = compare_envelopes(load_envelope_dir(args.a, spec.metrics), load_envelope_dir(args.b, spec.metrics))
    write_diff_csv(diff, _out(args) / "diff_report.csv")
    print(format_diff_table(diff, METRIC_UNITS))


def cmd_study(args) -> None:
    spec = _spec(args)
    workers = args.workers or int(spec.distributed.get("workers", 1))
    report = run_study(spec, _out(args), LocalExecutor(build_simulator(spec), workers))
    for comparison in report.comparisons:
        print(f"{comparison['a']} vs {comparison['b']}")
        print(comparison["table"])


def cmd_coordinator(args) -> None:
    spec = _spec(args)
    dist = spec.distributed
    host, port = parse_address(args.bind or dist.get("bind", "127.0.0.1:0"))
    coordinator = Coordinator(
        (host, port),
        max_attempts=int(dist.get("max_attempts", 3)),
        initial_timeout=float(dist.get("initial_timeout_s", 30.0)),
        timeout_factor=float(dist.get("timeout_factor", 10.0)),
        timeout_floor=float(dist.get("timeout_floor_s", 1.0)),
        handshake={"config": spec.to_document()},
    ).start()
    print(f"listening on {coordinator.address_text}", flush=True)
    try:
        run_study(spec, _out(args), coordinator)
    finally:
        coordinator.close(grace=args.grace)


def cmd_worker(args) -> None:
    simulator = build_simulator(_spec(args)) if args.config else None
    run_workers(
        parse_address(args.connect),
        args.slots,
        simulator,
        worker_id=args.worker_id,
        speed=args.speed,
        idle_timeout=args.idle_timeout,
    )


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # the subcommand copy uses SUPPRESS so it never overwrites a flag given
    # before the subcommand name
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--config", default=default(None), help="study config JSON (default: shipped 78-variable study)")
    parser.add_argument("--out", default=default("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=default(None), help="override the study seed")
    parser.add_argument("--format", choices=["csv"], default=default("csv"))
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, suppress=True)

    parser = argparse.ArgumentParser(prog="probfe", description=__doc__)
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", parents=[common], help="draw Monte Carlo samples or a regular design")
    p.add_argument("--kind", choices=["mc", "design"], default="mc")
    p.add_argument("-n", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", parents=[common], help="run the simulator on a samples CSV")
    p.add_argument("--samples", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a response surface")
    p.add_argument("--samples", required=True)
    p.add_argument("--summaries", required=True)
    p.add_argument("--basis", choices=["linear", "quadratic"], default="linear")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sensitivity", parents=[common], help="sensitivity scores from a fitted surface")
    p.add_argument("--coefficients", required=True)
    p.add_argument("--mode", choices=["centered", "raw"])
    p.add_argument("-n", type=int, help="propagated samples (default: study surrogate_samples)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("reduce", parents=[common], help="rank-sum key-variable reduction")
    p.add_argument("--sensitivity", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("envelope", parents=[common], help="percentile envelopes of a series CSV")
    p.add_argument("--series", required=True)
    p.add_argument("--trimmed", action="store_true", help="mean over values inside the band only")
    p.set_defaults(func=cmd_envelope)

    p = sub.add_parser("compare", parents=[common], help="difference between two envelope directories")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("study", parents=[common], help="run the full four-analysis study locally")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("coordinator", parents=[common], help="run the study, farming jobs to workers")
    p.add_argument("--bind", help="HOST:PORT (port 0 picks a free one)")
    p.add_argument("--grace", type=float, default=1.0, help="seconds to tell workers to stop")
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", parents=[common], help="serve jobs for a coordinator")
    p.add_argument("--connect", required=True, help="HOST:PORT")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--worker-id")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--idle-timeout", type=float)
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except StageFailed as exc:
        print(f"error: {args.command}: stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2
    except (StudyError, OSError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
