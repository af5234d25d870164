"""Command-line front end: estimate, covariance, ci, simulate, bench."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import __version__, bench, fileio, pipeline, simulate, uncertainty
from .collection import collection_step
from .downpass import down_pass
from .errors import CountsError, ParameterError
from .histogram import DesiredSet, NoisyTableSet, Schema, close_downward


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consistent-counts",
        description="Post-process independently noised histogram margins into "
        "self-consistent minimum-variance estimates with confidence intervals.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, counts=True):
        p.add_argument("--schema", required=True, help="schema JSON file")
        if counts:
            p.add_argument("--counts", required=True, help="noisy counts CSV file")
        p.add_argument("--out-dir", required=True, help="directory for outputs and the manifest")
        p.add_argument(
            "--desired",
            default="all",
            help='margins to estimate: "all" or a comma list of +-joined tables '
            "(closed downward automatically)",
        )
        p.add_argument(
            "--invariant-epsilon",
            type=float,
            default=None,
            help="accept zero-variance (invariant) counts, flooring them at this "
            "fraction of the median positive variance (e.g. 1e-10)",
        )

    est = sub.add_parser("estimate", help="write self-consistent estimates")
    add_io(est)
    est.add_argument("--method", choices=pipeline.METHODS, default=pipeline.TWO_PASS)
    est.add_argument(
        "--drop-unreachable",
        action="store_true",
        help="drop desired margins with no observed table above them instead of failing",
    )
    est.add_argument("--mem-cap", type=int, default=None, help="projection allocation cap in bytes")

    cov = sub.add_parser("covariance", help="write exact per-cell output variances")
    add_io(cov)

    ci = sub.add_parser("ci", help="write per-cell confidence intervals")
    add_io(ci)
    ci.add_argument("--method", choices=("exact", "mc-t", "mc-df"), default="exact")
    ci.add_argument("--alpha", type=float, default=0.05)
    ci.add_argument("--replicates", type=int, default=99, help="Monte-Carlo replicate count")
    ci.add_argument("--seed", type=int, default=0)
    ci.add_argument("--clip", action="store_true", help="clip to nonnegative integer endpoints")
    ci.add_argument("--noise", choices=uncertainty.NOISE_TAGS, default=uncertainty.GAUSSIAN)

    sim = sub.add_parser("simulate", help="run a synthetic experiment from a scenario file")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--kind", choices=("mse", "coverage", "robustness", "width-ratio"), required=True)
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    bn = sub.add_parser("bench", help="time/memory ladder for both methods")
    bn.add_argument("--out-dir", required=True)
    bn.add_argument("--sizes", default="3,4,5,6", help="comma list of balanced sizes k (k variables, k levels)")
    bn.add_argument("--pl94", action=argparse.BooleanOptionalAction, default=True)
    bn.add_argument("--timing-reps", type=int, default=3)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--mem-cap", type=int, default=None)
    return parser


def _parse_desired(schema: Schema, noisy: NoisyTableSet, text: str) -> DesiredSet:
    if text.strip().lower() == "all":
        return close_downward(noisy.margins)
    margins = []
    for part in text.split(","):
        members = tuple(p for p in part.strip().split("+") if p)
        margins.append(schema.margin(*members))
    return close_downward(margins)


def _load(args) -> tuple[Schema, NoisyTableSet, DesiredSet]:
    schema = fileio.read_schema(args.schema)
    noisy = fileio.read_counts(schema, args.counts, invariant_epsilon=args.invariant_epsilon)
    desired = _parse_desired(schema, noisy, args.desired)
    return schema, noisy, desired


def _cmd_estimate(args, out_dir: Path) -> list[Path]:
    _, noisy, desired = _load(args)
    out = out_dir / "estimates.csv"
    if args.method == pipeline.PROJECTION:
        result = pipeline.oracle(noisy, desired, with_covariance=True, mem_cap=args.mem_cap)
        diag = result.covariance.diagonal()
        variances = {}
        pos = 0
        for margin in desired.ordered:
            variances[margin] = diag[pos : pos + margin.ncells].reshape(margin.shape)
            pos += margin.ncells
        fileio.write_estimates(result.estimates, variances, out)
    else:
        intermediates = collection_step(noisy, desired, drop_unreachable=args.drop_unreachable)
        finals = down_pass(intermediates)
        # Pooled pre-projection variances: an upper bound on the final
        # variance under the equal-variance assumptions. Exact values come
        # from the `covariance` subcommand.
        variances = {m: intermediates[m].variance_array() for m in finals.desired}
        fileio.write_estimates(finals, variances, out)
    return [out]


def _cmd_covariance(args, out_dir: Path) -> list[Path]:
    _, noisy, desired = _load(args)
    estimates = pipeline.two_pass(noisy, desired)
    variances = uncertainty.exact_variance_tables(noisy, desired)
    out = out_dir / "exact_variances.csv"
    fileio.write_estimates(estimates, variances, out)
    return [out]


def _cmd_ci(args, out_dir: Path) -> list[Path]:
    _, noisy, desired = _load(args)
    estimates = pipeline.two_pass(noisy, desired)
    if args.method == "exact":
        variances = uncertainty.exact_variance_tables(noisy, desired)
        table = uncertainty.exact_z_intervals(estimates, variances, args.alpha)
    else:
        model = uncertainty.NoiseModel.from_tables(noisy, args.noise)
        if args.method == "mc-t":
            table = uncertainty.mc_t_intervals(
                estimates, model, args.replicates, args.alpha, args.seed
            )
        else:
            table = uncertainty.mc_df_intervals(
                estimates, model, args.replicates, args.alpha, args.seed
            )
    if args.clip:
        table = uncertainty.clip_table(table)
    out = out_dir / "intervals.csv"
    fileio.write_intervals(table, estimates, out)
    return [out]


def _cmd_simulate(args, out_dir: Path) -> list[Path]:
    raw = json.loads(Path(args.scenario).read_text())
    extras = {k: raw.pop(k) for k in list(raw) if k not in simulate.ScenarioConfig.__dataclass_fields__}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.kind == "width-ratio":
        report = simulate.width_ratio_experiment(
            extras.get("method", uncertainty.MC_T),
            int(extras.get("m", 19)),
            alpha=float(extras.get("alpha", 0.05)),
            trials=int(extras.get("trials", 20_000)),
            seed=int(raw.get("seed", 0)),
        )
    else:
        cfg = simulate.ScenarioConfig.from_dict(raw)
        if args.kind == "mse":
            methods = tuple(extras.get("methods", (pipeline.TWO_PASS, pipeline.PROJECTION, simulate.RAW)))
            report = simulate.mse_experiment(cfg, methods)
        elif args.kind == "coverage":
            report = simulate.coverage_experiment(
                cfg,
                tuple(extras.get("ci_methods", (uncertainty.EXACT_Z, uncertainty.MC_T, uncertainty.MC_DF))),
                float(extras.get("alpha", 0.05)),
                mc_rounds=int(extras.get("mc_rounds", 20)),
            )
        else:
            violation = extras.get("violation")
            if violation is None:
                raise ParameterError('robustness scenarios need a "violation" key')
            report = simulate.robustness_experiment(cfg, violation)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    json_path.write_text(report.to_json() + "\n")
    with csv_path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["metric", "value"])
        writer.writeheader()
        writer.writerows(report.rows())
    return [json_path, csv_path]


def _cmd_bench(args, out_dir: Path) -> list[Path]:
    sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    rows, report = bench.bench_ladder(
        sizes,
        pl94=args.pl94,
        seed=args.seed,
        timing_reps=args.timing_reps,
        mem_cap=args.mem_cap,
    )
    json_path = out_dir / "bench.json"
    csv_path = out_dir / "bench.csv"
    json_path.write_text(report.to_json() + "\n")
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["label", "counts", "two_pass_time", "projection_time",
             "two_pass_memory", "projection_memory", "projection_skipped"]
        )
        for row in rows:
            writer.writerow(
                [row.label, row.counts, row.two_pass_time, row.projection_time,
                 row.two_pass_memory, row.projection_memory, row.projection_skipped or ""]
            )
    return [json_path, csv_path]


_HANDLERS = {
    "estimate": _cmd_estimate,
    "covariance": _cmd_covariance,
    "ci": _cmd_ci,
    "simulate": _cmd_simulate,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    options = {k: v for k, v in vars(args).items() if k != "command"}
    manifest = fileio.RunManifest(
        command=args.command,
        argv=argv,
        config_hash=fileio.config_hash(args.command, {k: repr(v) for k, v in options.items()}),
        seed=getattr(args, "seed", None),
        inputs={},
        version=__version__,
    )
    for attr in ("schema", "counts", "scenario"):
        path = getattr(args, attr, None)
        if path is not None:
            try:
                manifest.inputs[path] = fileio.file_digest(path)
            except OSError as exc:
                manifest.status = "error"
                manifest.error = f"cannot read {path}: {exc}"

    start = time.perf_counter()
    exit_code = 0
    if manifest.status == "ok":
        try:
            outputs = _HANDLERS[args.command](args, out_dir)
            manifest.outputs = [str(p) for p in outputs]
        except CountsError as exc:
            manifest.status = "error"
            manifest.error = str(exc)
            print(f"error: {exc}", file=sys.stderr)
            exit_code = 1
    else:
        print(f"error: {manifest.error}", file=sys.stderr)
        exit_code = 1
    manifest.wall_time = time.perf_counter() - start
    manifest.peak_memory = fileio.peak_rss_bytes()
    manifest.write(out_dir / "manifest.json")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
