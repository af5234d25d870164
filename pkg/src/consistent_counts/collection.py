"""Aggregation stage: pool every estimate of a count obtainable from finer tables.

Each observed table is reduced margin-by-margin down a spanning set of
intermediate margins, so a margin is always computed from a one-variable-larger
margin rather than re-summed from the full table. Every reduced view of a
desired count contributes to that count's inverse-variance-weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .errors import SchemaError, UnreachableMarginError
from .histogram import (
    SUM,
    DesiredSet,
    MarginId,
    NoisyTableSet,
    Table,
    cell_lookup,
    marginalize,
)


@dataclass(frozen=True, eq=False)
class IntermediateEstimates:
    """Pooled per-margin estimates with their variances and raw accumulators.

    ``tables[m].variance`` is the pooled variance (reciprocal of the summed
    weights); ``weighted_sums`` and ``weights`` keep the raw accumulators for
    diagnostics.
    """

    schema: object
    desired: DesiredSet
    tables: Mapping[MarginId, Table]
    weighted_sums: Mapping[MarginId, np.ndarray]
    weights: Mapping[MarginId, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "tables", MappingProxyType(dict(self.tables)))
        object.__setattr__(self, "weighted_sums", MappingProxyType(dict(self.weighted_sums)))
        object.__setattr__(self, "weights", MappingProxyType(dict(self.weights)))

    def __getitem__(self, margin: MarginId) -> Table:
        return self.tables[margin]


def spanning_margins(observed: MarginId, desired: DesiredSet) -> frozenset[MarginId]:
    """Margins to materialize while reducing one observed table.

    Contains every desired margin inside the observed table, the total, and
    the observed margin itself, plus fill-ins so each member reaches the
    observed margin through a chain growing one variable at a time. Chains
    extend by the not-yet-included variable with the smallest schema index.
    """
    schema = observed.schema
    base = {m for m in desired if m.issubset(observed)}
    base.add(schema.empty_margin)
    base.add(observed)
    span = set(base)
    observed_set = set(observed.members)
    for start in base:
        current = start
        while len(current) < len(observed):
            missing = sorted(
                observed_set - set(current.members), key=schema.index_of
            )
            current = current.add(missing[0])
            span.add(current)
    return frozenset(span)


def _weight_of(table: Table) -> float | np.ndarray:
    if np.ndim(table.variance) == 0:
        return 1.0 / table.variance
    return 1.0 / np.asarray(table.variance)


def collection_step(
    noisy: NoisyTableSet,
    desired: DesiredSet,
    *,
    drop_unreachable: bool = False,
) -> IntermediateEstimates:
    """Pool all within-table estimates "from below" for every desired margin.

    For each desired cell the estimate is the inverse-variance-weighted mean
    over every observed table whose margin contains the desired margin, and
    the pooled variance is the reciprocal of the total weight. Raises (or,
    with ``drop_unreachable``, drops) desired margins no observed table sits
    above.
    """
    if noisy.schema != desired.schema:
        raise SchemaError("observed tables and desired set use different schemas")

    weighted = {m: np.zeros(m.shape) for m in desired}
    weight = {m: np.zeros(m.shape) for m in desired}

    # Observed tables in canonical order keeps the summation order fixed.
    for observed in noisy.margins:
        span = spanning_margins(observed, desired)
        by_size: dict[int, list[MarginId]] = {}
        for m in span:
            by_size.setdefault(len(m), []).append(m)
        for margins in by_size.values():
            margins.sort(key=MarginId.sort_key)

        current: dict[MarginId, Table] = {observed: noisy[observed]}
        for size in range(len(observed), -1, -1):
            for margin in by_size.get(size, ()):
                if margin == observed:
                    table = noisy[observed]
                else:
                    parent = next(
                        p for p in by_size[size + 1] if margin.issubset(p)
                    )
                    table = marginalize(current[parent], margin)
                    current[margin] = table
                if margin in desired:
                    w = _weight_of(table)
                    weighted[margin] += table.values * w
                    weight[margin] += w
            # Only the next-smaller margins still need this level.
            for margin in by_size.get(size + 1, ()):
                current.pop(margin, None)

    unreachable = [m for m in desired.ordered if not np.all(weight[m] > 0.0)]
    if unreachable:
        if not drop_unreachable:
            names = ", ".join(repr(m.name or "<total>") for m in unreachable)
            raise UnreachableMarginError(
                f"no observed table above desired margin(s) {names}", margins=unreachable
            )
        desired = desired.without(unreachable)
        for m in unreachable:
            del weighted[m], weight[m]

    tables: dict[MarginId, Table] = {}
    for m in desired:
        values = weighted[m] / weight[m]
        variance = 1.0 / weight[m]
        flat = variance.ravel()
        if flat.size and np.all(flat == flat[0]):
            variance = float(flat[0])
        tables[m] = Table(m, values, variance)
    return IntermediateEstimates(noisy.schema, desired, tables, weighted, weight)


def collection_cell(
    noisy: NoisyTableSet, target: MarginId, coords: Sequence[int]
) -> tuple[float, float]:
    """Pooled (estimate, variance) for one cell, evaluated directly.

    This is the naive one-cell evaluation of the pooling formula, kept
    independent of the batched reuse scheme so the two can cross-check each
    other.
    """
    coords = tuple(coords)
    num = 0.0
    den = 0.0
    for margin in noisy.supersets_of(target):
        table = noisy[margin]
        idx = tuple(
            coords[target.members.index(name)] if name in target else SUM
            for name in margin.members
        )
        value = cell_lookup(table, idx)
        if np.ndim(table.variance) == 0:
            variance = table.variance * (margin.ncells // target.ncells)
        else:
            variance = cell_lookup(Table(margin, table.variance, 1.0), idx)
        num += value / variance
        den += 1.0 / variance
    if den == 0.0:
        raise UnreachableMarginError(
            f"no observed table above margin {target.name or '<total>'!r}", margins=(target,)
        )
    return num / den, 1.0 / den
