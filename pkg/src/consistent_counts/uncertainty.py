"""Confidence machinery: exact variances, Monte-Carlo intervals, clipping.

Everything here leans on one fact: the estimator is linear in the observed
values, and the noise distribution is public. So the output variance can be
propagated exactly through the pipeline, or estimated from replicate runs on
pure noise, with no access to the protected data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy import stats

from . import pipeline
from .downpass import FinalEstimates
from .errors import (
    AssumptionError,
    MethodAssumptionError,
    ParameterError,
    UnreachableMarginError,
)
from .histogram import (
    EQUAL_VARIANCE_RTOL,
    DesiredSet,
    MarginId,
    NoisyTableSet,
    Schema,
    Table,
    close_downward,
)

GAUSSIAN = "gaussian"
DISCRETE_GAUSSIAN = "discrete-gaussian"
UNIFORM = "uniform"
NOISE_TAGS = (GAUSSIAN, DISCRETE_GAUSSIAN, UNIFORM)

EXACT_Z = "exact-z"
MC_T = "mc-t"
MC_DF = "mc-df"


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for one derived stream; reproducible in isolation."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *stream))))


def sample_discrete_gaussian(sigma2, size, rng: np.random.Generator) -> np.ndarray:
    """Integer noise with pmf proportional to exp(-t^2 / (2 sigma^2)).

    Exact rejection from a discrete Laplace proposal: propose a geometric
    magnitude with a random sign, then accept with probability
    exp(-(|x| - sigma^2/t)^2 / (2 sigma^2)) for scale t = floor(sigma) + 1.
    """
    shape = tuple(np.atleast_1d(size)) if not isinstance(size, tuple) else size
    total = int(np.prod(shape)) if shape else 1
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), shape).ravel()
    if np.any(s2 <= 0.0):
        raise ParameterError("discrete Gaussian variance must be positive")
    out = np.zeros(total)
    pending = np.arange(total)
    while pending.size:
        cur = s2[pending]
        t = np.floor(np.sqrt(cur)) + 1.0
        survival = np.exp(-1.0 / t)
        magnitude = rng.geometric(1.0 - survival, pending.size) - 1
        sign = rng.integers(0, 2, pending.size) * 2 - 1
        candidate = sign * magnitude
        proper = ~((sign == -1) & (magnitude == 0))  # zero proposed once only
        accept = np.exp(-((np.abs(candidate) - cur / t) ** 2) / (2.0 * cur))
        taken = proper & (rng.random(pending.size) < accept)
        out[pending[taken]] = candidate[taken]
        pending = pending[~taken]
    return out.reshape(shape)


def sample_noise(tag: str, variance, shape, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero noise of the declared variance in the requested shape."""
    var = np.broadcast_to(np.asarray(variance, dtype=np.float64), shape)
    if tag == GAUSSIAN:
        return rng.normal(0.0, np.sqrt(var), shape)
    if tag == UNIFORM:
        half = np.sqrt(3.0 * var)
        return rng.uniform(-half, half, shape) if shape else rng.uniform(-half, half)
    if tag == DISCRETE_GAUSSIAN:
        return sample_discrete_gaussian(var, shape, rng)
    raise ParameterError(f"unknown noise tag {tag!r}; expected one of {NOISE_TAGS}")


@dataclass(frozen=True, eq=False)
class TableNoise:
    margin: MarginId
    tag: str
    variance: float | np.ndarray

    def __post_init__(self):
        if self.tag not in NOISE_TAGS:
            raise ParameterError(f"unknown noise tag {self.tag!r}")


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-table noise distribution and variance; the sampler is seedable."""

    schema: Schema
    entries: Mapping[MarginId, TableNoise]

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    @classmethod
    def from_tables(cls, noisy: NoisyTableSet, tag: str | Mapping[MarginId, str] = GAUSSIAN) -> "NoiseModel":
        entries = {}
        for table in noisy:
            table_tag = tag if isinstance(tag, str) else tag[table.margin]
            entries[table.margin] = TableNoise(table.margin, table_tag, table.variance)
        return cls(noisy.schema, entries)

    @property
    def margins(self) -> tuple[MarginId, ...]:
        return tuple(sorted(self.entries, key=MarginId.sort_key))

    @property
    def all_gaussian(self) -> bool:
        return all(e.tag == GAUSSIAN for e in self.entries.values())

    def replicate(self, seed: int, index: int) -> NoisyTableSet:
        """Pure-noise observed set number `index`, reproducible in isolation."""
        rng = derive_rng(seed, index)
        tables = []
        for margin in self.margins:
            entry = self.entries[margin]
            values = sample_noise(entry.tag, entry.variance, margin.shape, rng)
            tables.append(Table(margin, values, entry.variance))
        return NoisyTableSet.build(self.schema, tables)


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    alpha: float
    method: str
    clipped: bool = False
    empty: bool = False

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class IntervalTable:
    """Per-cell confidence intervals over a desired family of margins."""

    desired: DesiredSet
    alpha: float
    method: str
    lower: Mapping[MarginId, np.ndarray]
    upper: Mapping[MarginId, np.ndarray]
    clipped: bool = False
    empty: Mapping[MarginId, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lower", MappingProxyType(dict(self.lower)))
        object.__setattr__(self, "upper", MappingProxyType(dict(self.upper)))
        if self.empty is not None:
            object.__setattr__(self, "empty", MappingProxyType(dict(self.empty)))

    def cell(self, margin: MarginId, coords) -> Interval:
        flat = int(np.ravel_multi_index(tuple(int(c) - 1 for c in coords), margin.shape)) if len(margin) else 0
        empty = bool(self.empty[margin].ravel()[flat]) if self.empty is not None else False
        return Interval(
            float(self.lower[margin].ravel()[flat]),
            float(self.upper[margin].ravel()[flat]),
            self.alpha,
            self.method,
            clipped=self.clipped,
            empty=empty,
        )

    def mean_width(self) -> float:
        widths = [np.ravel(self.upper[m] - self.lower[m]) for m in self.desired]
        return float(np.mean(np.concatenate(widths)))

    def coverage(self, truth: Mapping[MarginId, np.ndarray]) -> float:
        hits = []
        for m in self.desired:
            t = np.asarray(truth[m]).reshape(self.lower[m].shape)
            hits.append(((self.lower[m] <= t) & (t <= self.upper[m])).ravel())
        return float(np.mean(np.concatenate(hits)))


def z_interval(estimate: float, variance: float, alpha: float) -> Interval:
    """Symmetric normal interval around a point estimate."""
    if variance < 0.0:
        raise ParameterError("variance must be nonnegative")
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie strictly between 0 and 1")
    half = stats.norm.ppf(1.0 - alpha / 2.0) * math.sqrt(variance)
    return Interval(estimate - half, estimate + half, alpha, EXACT_Z)


def clip_interval(iv: Interval) -> Interval:
    """Tighten to nonnegative integer endpoints; flags an emptied interval.

    Valid whenever the underlying quantity is a nonnegative integer: rounding
    the lower endpoint up and the upper endpoint down can only shed impossible
    values, so coverage is preserved and width never grows.
    """
    lower = max(0.0, math.ceil(iv.lower))
    upper = math.floor(iv.upper)
    return Interval(lower, upper, iv.alpha, iv.method, clipped=True, empty=lower > upper)


def clip_table(table: IntervalTable) -> IntervalTable:
    lower = {m: np.maximum(0.0, np.ceil(table.lower[m])) for m in table.desired}
    upper = {m: np.floor(table.upper[m]) for m in table.desired}
    empty = {m: lower[m] > upper[m] for m in table.desired}
    return IntervalTable(
        table.desired, table.alpha, table.method, lower, upper, clipped=True, empty=empty
    )


def _check_equal_variance_tables(noisy: NoisyTableSet) -> None:
    for table in noisy:
        if not table.equal_variance:
            raise AssumptionError(
                f"table {table.margin.name or '<total>'!r} has unequal within-table variances; "
                "exact variance propagation requires equal variance within every table"
            )


def _column_input(noisy: NoisyTableSet, margin: MarginId, flat: int) -> NoisyTableSet:
    """Observed set holding one column of the noise covariance as values."""
    tables = []
    for t in noisy:
        if t.margin == margin:
            values = np.zeros(margin.ncells)
            values[flat] = t.variance_array().ravel()[flat]
            tables.append(Table(margin, values.reshape(margin.shape), t.variance))
        else:
            tables.append(Table(t.margin, np.zeros(t.margin.shape), t.variance))
    return NoisyTableSet.build(noisy.schema, tables)


def exact_cell_variance(
    noisy: NoisyTableSet, desired: DesiredSet, cell: tuple[MarginId, tuple]
) -> float:
    """Exact variance of one final estimate, by propagating covariance columns.

    Runs the pipeline on the queried cell's noise-covariance column and reads
    the queried entry. For a cell of an unobserved margin, the variance is
    accumulated from the covariance columns of the cells of the smallest
    observed table above it (the final tables are self-consistent, so the
    queried estimate is exactly the sum of those estimates).
    """
    margin, coords = cell
    _check_equal_variance_tables(noisy)
    flat = int(np.ravel_multi_index(tuple(int(c) - 1 for c in coords), margin.shape)) if len(margin) else 0
    if margin in noisy:
        run = pipeline.two_pass(_column_input(noisy, margin, flat), desired)
        return float(run[margin].ravel()[flat])

    covers = noisy.supersets_of(margin)
    if not covers:
        raise UnreachableMarginError(
            f"no observed table above margin {margin.name or '<total>'!r}", margins=(margin,)
        )
    cover = min(covers, key=lambda m: m.ncells)
    working = close_downward(set(desired.margins) | {cover})
    kept = [cover.members.index(name) for name in margin.members]
    total = 0.0
    for source in range(cover.ncells):
        multi = np.unravel_index(source, cover.shape)
        if tuple(multi[i] + 1 for i in kept) != tuple(int(c) for c in coords):
            continue
        run = pipeline.two_pass(_column_input(noisy, cover, source), working)
        total += float(run[margin].ravel()[flat])
    return total


def exact_variance_tables(
    noisy: NoisyTableSet, desired: DesiredSet
) -> dict[MarginId, np.ndarray]:
    """Exact per-cell variance of every final estimate.

    One pipeline run per observed cell; each run is a covariance column and
    simultaneously serves the matching observed cell and every unobserved
    cell it sums into.
    """
    _check_equal_variance_tables(noisy)
    unobserved = [m for m in desired.ordered if m not in noisy]
    cover_of: dict[MarginId, MarginId] = {}
    for margin in unobserved:
        covers = noisy.supersets_of(margin)
        if not covers:
            raise UnreachableMarginError(
                f"no observed table above margin {margin.name or '<total>'!r}", margins=(margin,)
            )
        cover_of[margin] = min(covers, key=lambda m: m.ncells)

    working = close_downward(set(desired.margins) | set(noisy.margins))
    out = {m: np.zeros(m.shape) for m in desired.ordered}
    for source_margin in noisy.margins:
        served = [m for m, c in cover_of.items() if c == source_margin]
        wanted = source_margin in desired
        if not served and not wanted:
            continue
        kept = {m: [source_margin.members.index(n) for n in m.members] for m in served}
        for flat in range(source_margin.ncells):
            run = pipeline.two_pass(_column_input(noisy, source_margin, flat), working)
            multi = np.unravel_index(flat, source_margin.shape)
            if wanted:
                out[source_margin].ravel()[flat] = run[source_margin].ravel()[flat]
            for m in served:
                target = tuple(multi[i] for i in kept[m])
                out[m][target] += run[m][target]
    return out


def exact_z_intervals(
    estimates: FinalEstimates,
    variances: Mapping[MarginId, np.ndarray],
    alpha: float,
) -> IntervalTable:
    """Normal intervals from exact variances, for every desired cell."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie strictly between 0 and 1")
    scale = stats.norm.ppf(1.0 - alpha / 2.0)
    lower, upper = {}, {}
    for m in estimates.desired:
        half = scale * np.sqrt(np.asarray(variances[m]).reshape(m.shape))
        lower[m] = estimates[m] - half
        upper[m] = estimates[m] + half
    return IntervalTable(estimates.desired, alpha, EXACT_Z, lower, upper)


def _replicate_finals(noise: NoiseModel, desired: DesiredSet, m: int, seed: int):
    for j in range(1, m + 1):
        yield pipeline.two_pass(noise.replicate(seed, j), desired)


def mc_t_intervals(
    estimates: FinalEstimates,
    noise: NoiseModel,
    m: int,
    alpha: float,
    seed: int,
    *,
    allow_nongaussian: bool = False,
) -> IntervalTable:
    """t intervals scaled by the mean square of pure-noise replicate outputs.

    Draws m independent pure-noise input sets, pushes each through the full
    pipeline, and uses the per-cell mean square as the variance estimate; the
    same replicates serve every cell. Centered at the real-data estimates.
    """
    if m < 2:
        raise ParameterError("mc-t needs at least 2 replicates")
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie strictly between 0 and 1")
    if not noise.all_gaussian and not allow_nongaussian:
        raise MethodAssumptionError(
            "mc-t assumes Gaussian noise; pass allow_nongaussian=True to override"
        )
    desired = estimates.desired
    ssq = {margin: np.zeros(margin.shape) for margin in desired}
    for final in _replicate_finals(noise, desired, m, seed):
        for margin in desired:
            ssq[margin] += final[margin] ** 2
    scale = stats.t.ppf(1.0 - alpha / 2.0, df=m)
    lower, upper = {}, {}
    for margin in desired:
        half = scale * np.sqrt(ssq[margin] / m)
        lower[margin] = estimates[margin] - half
        upper[margin] = estimates[margin] + half
    return IntervalTable(desired, alpha, MC_T, lower, upper)


def df_order_index(m: int, alpha: float) -> int:
    """1-based order-statistic index used by the distribution-free interval."""
    return math.ceil((1.0 - alpha) * (m + 1))


def mc_df_intervals(
    estimates: FinalEstimates,
    noise: NoiseModel,
    m: int,
    alpha: float,
    seed: int,
) -> IntervalTable:
    """Distribution-free intervals from order statistics of replicate outputs.

    Valid for any mean-zero noise with known distribution: the half-width per
    cell is an upper order statistic of the m absolute replicate outputs.
    Needs m >= (1 - alpha) / alpha so that the index exists.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie strictly between 0 and 1")
    bound = (1.0 - alpha) / alpha
    if m < bound:
        raise ParameterError(
            f"mc-df needs m >= (1 - alpha)/alpha = {bound:.6g} replicates, got {m}"
        )
    desired = estimates.desired
    rank = df_order_index(m, alpha)
    magnitudes = {margin: np.empty((m, margin.ncells)) for margin in desired}
    for j, final in enumerate(_replicate_finals(noise, desired, m, seed)):
        for margin in desired:
            magnitudes[margin][j] = np.abs(final[margin]).ravel()
    lower, upper = {}, {}
    for margin in desired:
        half = np.partition(magnitudes[margin], rank - 1, axis=0)[rank - 1]
        half = half.reshape(margin.shape)
        lower[margin] = estimates[margin] - half
        upper[margin] = estimates[margin] + half
    return IntervalTable(desired, alpha, MC_DF, lower, upper)
