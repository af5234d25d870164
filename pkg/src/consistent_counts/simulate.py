"""Synthetic-data generators and the experiment drivers behind the studies.

Instances are balanced k-variable histograms with I levels each: detailed
cells are drawn from a zero-inflated Poisson, every margin is computed
exactly, and independent noise is layered on each observed table. Experiments
aggregate mean squared error, interval coverage, and widths over seeded
replicates, so identical configurations reproduce identical reports.
"""

from __future__ import annotations

import json
import math
import string
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import pipeline, uncertainty
from .downpass import FinalEstimates
from .errors import ParameterError, SizeGuardError
from .histogram import (
    DesiredSet,
    MarginId,
    NoisyTableSet,
    Schema,
    Table,
    _collapse,
    close_downward,
)
from .uncertainty import (
    EXACT_Z,
    MC_DF,
    MC_T,
    NoiseModel,
    clip_table,
    derive_rng,
    df_order_index,
    exact_variance_tables,
    exact_z_intervals,
    mc_df_intervals,
    mc_t_intervals,
)

RAW = "raw"

VIOLATIONS = (
    "one-marginal",
    "all-marginals",
    "all-2way",
    "all-3way",
    "detailed",
    "all-counts-1var",
)


@dataclass(frozen=True)
class ScenarioConfig:
    """A balanced synthetic scenario: k variables with I levels each."""

    variables: int
    levels: int
    zip_lambda: float = 5.0
    zip_zero_prob: float = 0.5
    noise_variance: float = 2.0
    noise: str = uncertainty.GAUSSIAN
    replicates: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.variables < 1:
            raise ParameterError("need at least one variable")
        if self.levels < 2:
            raise ParameterError("each variable needs at least 2 levels")
        if not 0.0 <= self.zip_zero_prob <= 1.0:
            raise ParameterError("zero-inflation probability must lie in [0, 1]")
        if self.zip_lambda < 0.0:
            raise ParameterError("Poisson rate must be nonnegative")
        if self.noise_variance <= 0.0:
            raise ParameterError("noise variance must be positive")
        if self.noise not in uncertainty.NOISE_TAGS:
            raise ParameterError(f"unknown noise tag {self.noise!r}")
        if self.replicates < 1:
            raise ParameterError("need at least one replicate")

    def schema(self) -> Schema:
        names = _variable_names(self.variables)
        return Schema.of(*((n, self.levels) for n in names))

    def desired(self) -> DesiredSet:
        return close_downward([self.schema().full_margin])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        return cls(**dict(data))


def _variable_names(k: int) -> tuple[str, ...]:
    letters = string.ascii_uppercase
    if k <= len(letters):
        return tuple(letters[:k])
    return tuple(f"V{i + 1}" for i in range(k))


@dataclass(frozen=True)
class ExperimentReport:
    """Flat metric map plus run bookkeeping; serializes deterministically."""

    kind: str
    config: dict
    metrics: dict
    skipped: tuple[str, ...] = ()
    wall_time: float = 0.0
    peak_memory: int = 0

    def __post_init__(self):
        for name, value in self.metrics.items():
            if name.startswith("mse.") and value < 0.0:
                raise ParameterError(f"negative MSE metric {name}")
            if name.startswith("coverage.") and not 0.0 <= value <= 1.0:
                raise ParameterError(f"coverage metric {name} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "config": self.config,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "skipped": list(self.skipped),
            "wall_time": self.wall_time,
            "peak_memory": self.peak_memory,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def rows(self) -> list[dict]:
        return [{"metric": k, "value": self.metrics[k]} for k in sorted(self.metrics)]


def generate_instance(
    cfg: ScenarioConfig,
    *,
    replicate: int = 0,
    unequal: frozenset[MarginId] | set[MarginId] = frozenset(),
) -> tuple[FinalEstimates, NoisyTableSet]:
    """One synthetic draw: exact margins of a ZIP detail table, then noise.

    Tables in ``unequal`` get per-cell variances drawn uniformly from
    {1, 2, 3} instead of the scenario's shared value. The truth is
    self-consistent by construction.
    """
    schema = cfg.schema()
    desired = cfg.desired()
    truth_rng = derive_rng(cfg.seed, replicate, 0)
    noise_rng = derive_rng(cfg.seed, replicate, 1)

    full = schema.full_margin
    keep = truth_rng.random(full.shape) >= cfg.zip_zero_prob
    detail = truth_rng.poisson(cfg.zip_lambda, full.shape) * keep
    detail = detail.astype(np.float64)

    truth_tables = {m: _collapse(detail, full, m) for m in desired}
    truth = FinalEstimates(schema, desired, truth_tables, {m: "synthetic" for m in desired})

    observed = []
    for margin in desired.ordered:
        if margin in unequal:
            variance = truth_rng.integers(1, 4, margin.shape).astype(np.float64)
        else:
            variance = cfg.noise_variance
        values = truth_tables[margin] + uncertainty.sample_noise(
            cfg.noise, variance, margin.shape, noise_rng
        )
        observed.append(Table(margin, values, variance))
    return truth, NoisyTableSet.build(schema, observed)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def mse_experiment(
    cfg: ScenarioConfig,
    methods: Sequence[str] = (pipeline.TWO_PASS, pipeline.PROJECTION, RAW),
    *,
    unequal: frozenset[MarginId] | set[MarginId] = frozenset(),
    mem_cap: int | None = None,
) -> ExperimentReport:
    """Per-cell squared error of each method, averaged over replicates.

    Also reports the mean squared difference between the two estimation
    routes when both ran. A projection run refused by the allocation guard is
    recorded as skipped rather than failing the experiment.
    """
    unknown = set(methods) - {pipeline.TWO_PASS, pipeline.PROJECTION, RAW}
    if unknown:
        raise ParameterError(f"unknown methods {sorted(unknown)}")
    start = time.perf_counter()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()

    desired = cfg.desired()
    sums = {m: 0.0 for m in methods}
    gap_sum = 0.0
    gap_runs = 0
    skipped: list[str] = []
    runs = {m: 0 for m in methods}
    for rep in range(cfg.replicates):
        truth, noisy = generate_instance(cfg, replicate=rep, unequal=unequal)
        truth_vec = truth.pack()
        vectors: dict[str, np.ndarray] = {}
        if RAW in sums:
            vectors[RAW] = pipeline.observed_values_vector(noisy)
        if pipeline.TWO_PASS in sums:
            vectors[pipeline.TWO_PASS] = pipeline.two_pass(noisy, desired).pack()
        if pipeline.PROJECTION in sums:
            try:
                vectors[pipeline.PROJECTION] = pipeline.oracle(
                    noisy, desired, with_covariance=False, mem_cap=mem_cap
                ).estimates.pack()
            except SizeGuardError as exc:
                if f"projection: {exc}" not in skipped:
                    skipped.append(f"projection: {exc}")
        for name, vec in vectors.items():
            sums[name] += _mse(vec, truth_vec)
            runs[name] += 1
        if pipeline.TWO_PASS in vectors and pipeline.PROJECTION in vectors:
            gap_sum += _mse(vectors[pipeline.TWO_PASS], vectors[pipeline.PROJECTION])
            gap_runs += 1

    metrics = {
        f"mse.{name}": sums[name] / runs[name] for name in methods if runs[name]
    }
    if gap_runs:
        metrics["mse.two-pass-to-projection"] = gap_sum / gap_runs
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return ExperimentReport(
        "mse",
        cfg.to_dict(),
        metrics,
        skipped=tuple(skipped),
        wall_time=time.perf_counter() - start,
        peak_memory=peak,
    )


def _interval_seed(cfg: ScenarioConfig, rep: int, stream: int) -> int:
    state = np.random.SeedSequence((cfg.seed, rep, stream)).generate_state(1)
    return int(state[0])


def coverage_experiment(
    cfg: ScenarioConfig,
    ci_methods: Sequence[str] = (EXACT_Z, MC_T, MC_DF),
    alpha: float = 0.05,
    *,
    mc_rounds: int = 20,
) -> ExperimentReport:
    """Fraction of cells whose interval covers the truth, plus mean widths.

    Each replicate draws a fresh instance; Monte-Carlo methods build fresh
    replicate sets from a seed derived per (replicate, method). Raw and
    clipped widths are both reported.
    """
    unknown = set(ci_methods) - {EXACT_Z, MC_T, MC_DF}
    if unknown:
        raise ParameterError(f"unknown interval methods {sorted(unknown)}")
    start = time.perf_counter()
    desired = cfg.desired()

    variances = None
    if EXACT_Z in ci_methods:
        _, template = generate_instance(cfg, replicate=0)
        variances = exact_variance_tables(template, desired)

    cover_sum = {m: 0.0 for m in ci_methods}
    width_sum = {m: 0.0 for m in ci_methods}
    clipped_width_sum = {m: 0.0 for m in ci_methods}
    for rep in range(cfg.replicates):
        truth, noisy = generate_instance(cfg, replicate=rep)
        estimates = pipeline.two_pass(noisy, desired)
        model = NoiseModel.from_tables(noisy, cfg.noise)
        for method in ci_methods:
            if method == EXACT_Z:
                table = exact_z_intervals(estimates, variances, alpha)
            elif method == MC_T:
                table = mc_t_intervals(
                    estimates, model, mc_rounds, alpha, _interval_seed(cfg, rep, 1)
                )
            else:
                table = mc_df_intervals(
                    estimates, model, mc_rounds, alpha, _interval_seed(cfg, rep, 2)
                )
            cover_sum[method] += table.coverage(truth.tables)
            width_sum[method] += table.mean_width()
            clipped_width_sum[method] += clip_table(table).mean_width()

    n = cfg.replicates
    metrics = {}
    for method in ci_methods:
        metrics[f"coverage.{method}"] = cover_sum[method] / n
        metrics[f"width.{method}.raw"] = width_sum[method] / n
        metrics[f"width.{method}.clipped"] = clipped_width_sum[method] / n
    return ExperimentReport(
        "coverage",
        {**cfg.to_dict(), "alpha": alpha, "mc_rounds": mc_rounds},
        metrics,
        wall_time=time.perf_counter() - start,
    )


def violated_margins(cfg: ScenarioConfig, violation: str) -> frozenset[MarginId]:
    """Tables whose within-table equal-variance assumption gets broken."""
    if violation not in VIOLATIONS:
        raise ParameterError(f"unknown violation {violation!r}; expected one of {VIOLATIONS}")
    schema = cfg.schema()
    desired = cfg.desired()
    first = schema.names[0]
    if violation == "one-marginal":
        return frozenset({schema.margin(first)})
    if violation == "all-marginals":
        return frozenset(desired.by_cardinality(1))
    if violation == "all-2way":
        return frozenset(desired.by_cardinality(2))
    if violation == "all-3way":
        return frozenset(desired.by_cardinality(3))
    if violation == "detailed":
        return frozenset({schema.full_margin})
    return frozenset(m for m in desired if first in m)


def robustness_experiment(
    cfg: ScenarioConfig, violation: str, *, mem_cap: int | None = None
) -> ExperimentReport:
    """MSE of both routes, and between them, under an equal-variance breach."""
    unequal = violated_margins(cfg, violation)
    report = mse_experiment(
        cfg,
        (pipeline.TWO_PASS, pipeline.PROJECTION, RAW),
        unequal=unequal,
        mem_cap=mem_cap,
    )
    metrics = dict(report.metrics)
    metrics["violated.cells"] = float(sum(m.ncells for m in unequal))
    return ExperimentReport(
        "robustness",
        {**cfg.to_dict(), "violation": violation},
        metrics,
        skipped=report.skipped,
        wall_time=report.wall_time,
        peak_memory=report.peak_memory,
    )


def width_ratio_experiment(
    method: str,
    m: int,
    *,
    alpha: float = 0.05,
    trials: int = 20_000,
    seed: int = 0,
    chunk: int = 2_000,
) -> ExperimentReport:
    """Mean width of a Monte-Carlo interval relative to the exact-z interval.

    Runs many independent interval constructions on a minimal instance. The
    estimator is linear, so each construction applies the pipeline's matrix
    (extracted once from real pipeline runs) to fresh noise draws; per trial
    and cell the ratio of the Monte-Carlo half-width to the exact half-width
    is averaged.
    """
    if method not in (MC_T, MC_DF):
        raise ParameterError("width ratios are defined for the Monte-Carlo methods")
    start = time.perf_counter()
    cfg = ScenarioConfig(variables=1, levels=2, noise_variance=2.0, replicates=1, seed=seed)
    _, noisy = generate_instance(cfg)
    matrix = pipeline.linear_map(noisy)
    obs_sd = np.sqrt(pipeline.observed_variance_vector(noisy))
    exact_var = (matrix**2 * obs_sd**2).sum(axis=1)
    z_half = stats.norm.ppf(1.0 - alpha / 2.0) * np.sqrt(exact_var)

    if method == MC_T:
        scale = stats.t.ppf(1.0 - alpha / 2.0, df=m)
    else:
        bound = (1.0 - alpha) / alpha
        if m < bound:
            raise ParameterError(f"mc-df needs m >= {bound:.6g} replicates, got {m}")
        rank = df_order_index(m, alpha)

    rng = derive_rng(seed, 97, m)
    ratio_sum = 0.0
    ratio_sq_sum = 0.0
    done = 0
    while done < trials:
        batch = min(chunk, trials - done)
        noise = rng.normal(0.0, obs_sd[:, None], (obs_sd.size, batch * m))
        outputs = (matrix @ noise).reshape(-1, batch, m)
        if method == MC_T:
            half = scale * np.sqrt(np.mean(outputs**2, axis=2))
        else:
            half = np.partition(np.abs(outputs), rank - 1, axis=2)[:, :, rank - 1]
        ratios = np.mean(half / z_half[:, None], axis=0)  # per-trial cell mean
        ratio_sum += float(np.sum(ratios))
        ratio_sq_sum += float(np.sum(ratios**2))
        done += batch

    mean = ratio_sum / trials
    sd = math.sqrt(max(ratio_sq_sum / trials - mean**2, 0.0))
    metrics = {
        f"width_ratio.{method}.mean": mean,
        f"width_ratio.{method}.mc_error": sd / math.sqrt(trials),
    }
    return ExperimentReport(
        "width-ratio",
        {"method": method, "m": m, "alpha": alpha, "trials": trials, "seed": seed},
        metrics,
        wall_time=time.perf_counter() - start,
    )
