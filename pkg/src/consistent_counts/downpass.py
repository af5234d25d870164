"""Projection stage: make each i-way table agree with the finalized margins.

Margins are processed in increasing cardinality. Within one table, the
"zero-margin" subspace (tables all of whose margins vanish) is the part the
constraints cannot see; its orthogonal complement is exactly one table per
choice of margins. Two completions of that complement drive the update: one
built from the finalized margins, one from the table's own margins. Under
equal within-table variance their difference is the orthogonal projection
correction; otherwise a weighted least-squares projection on the single table
takes over.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import projection
from .collection import IntermediateEstimates
from .errors import IncompleteMarginsError, ParameterError, SizeGuardError
from .histogram import (
    EQUAL_VARIANCE_RTOL,
    DesiredSet,
    MarginId,
    Schema,
    Table,
    _collapse,
)

#: Cell-count cap for the dense weighted projection on one table.
DEFAULT_WEIGHTED_CELL_CAP = 100_000

EFFICIENT_PATH = "efficient-path"
WEIGHTED_PATH = "weighted-path"


@dataclass(frozen=True, eq=False)
class FinalEstimates:
    """Self-consistent estimates per desired margin, plus how each was made."""

    schema: Schema
    desired: DesiredSet
    tables: Mapping[MarginId, np.ndarray]
    provenance: Mapping[MarginId, str] = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for margin, values in self.tables.items():
            arr = np.asarray(values, dtype=np.float64).reshape(margin.shape).copy(order="C")
            arr.flags.writeable = False
            fixed[margin] = arr
        object.__setattr__(self, "tables", MappingProxyType(fixed))
        object.__setattr__(self, "provenance", MappingProxyType(dict(self.provenance)))

    def __getitem__(self, margin: MarginId) -> np.ndarray:
        return self.tables[margin]

    def pack(self) -> np.ndarray:
        return self.desired.pack(self.tables)

    def total(self) -> float:
        return float(self.tables[self.schema.empty_margin])

    def max_consistency_error(self) -> float:
        """Largest |margin-of-table - published margin| over all nested pairs."""
        worst = 0.0
        for big in self.desired:
            values = self.tables[big]
            for small in big.subsets(proper=True):
                if small not in self.desired:
                    continue
                dev = np.max(np.abs(_collapse(values, big, small) - self.tables[small]))
                worst = max(worst, float(dev))
        return worst


@dataclass(frozen=True, eq=False)
class ZeroMarginBasis:
    """Basis of the subspace of tables on a margin whose margins all vanish."""

    margin: MarginId
    tables: tuple[np.ndarray, ...]

    def matrix(self) -> np.ndarray:
        """Cells-by-basis matrix with each basis table as a raveled column."""
        return np.stack([t.ravel() for t in self.tables], axis=1)

    def __len__(self) -> int:
        return len(self.tables)


def zero_margin_basis(margin: MarginId) -> ZeroMarginBasis:
    """Signed-indicator basis of the zero-margin subspace of one margin.

    One basis table per choice of adjacent level pair in each variable: the
    outer product of vectors holding +1 at level i_j and -1 at level i_j + 1.
    There are prod(levels - 1) of them and each has every margin exactly zero.
    """
    if len(margin) < 1:
        raise ParameterError("the zero-margin subspace is defined for margins with at least one variable")
    shape = margin.shape
    factors: list[list[np.ndarray]] = []
    for levels in shape:
        vecs = []
        for pivot in range(levels - 1):
            v = np.zeros(levels)
            v[pivot] = 1.0
            v[pivot + 1] = -1.0
            vecs.append(v)
        factors.append(vecs)
    tables = []
    for combo in itertools.product(*factors):
        out = combo[0]
        for v in combo[1:]:
            out = np.multiply.outer(out, v)
        out = np.ascontiguousarray(out.reshape(shape))
        out.flags.writeable = False
        tables.append(out)
    return ZeroMarginBasis(margin, tuple(tables))


def margin_completion(
    margins: Mapping[MarginId, np.ndarray], target: MarginId
) -> np.ndarray:
    """The table in the zero-margin complement having the supplied margins.

    Built as an alternating sum over the nonempty variable subsets dropped
    from the target: each term broadcasts a supplied margin back over the
    dropped variables, scaled by the inverse product of their level counts.
    Requires every proper submargin of the target.
    """
    schema = target.schema
    members = target.members
    shape = target.shape
    out = np.zeros(shape)
    for k in range(1, len(members) + 1):
        for dropped in itertools.combinations(members, k):
            kept = target.difference(dropped)
            if kept not in margins:
                raise IncompleteMarginsError(
                    f"margin {kept.name or '<total>'!r} required to complete {target.name!r}"
                )
            coeff = (-1.0) ** (k + 1) / math.prod(schema.levels_of(n) for n in dropped)
            dropped_set = set(dropped)
            view_shape = tuple(
                1 if name in dropped_set else schema.levels_of(name) for name in members
            )
            out += coeff * np.asarray(margins[kept]).reshape(view_shape)
    return out


def project_consistent(values: np.ndarray, margin: MarginId) -> np.ndarray:
    """Orthogonal projection of a table onto the zero-margin complement.

    Equals the completion built from the table's own margins; the residual
    has every margin identically zero.
    """
    values = np.asarray(values, dtype=np.float64).reshape(margin.shape)
    own = {
        sub: _collapse(values, margin, sub) for sub in margin.subsets(proper=True)
    }
    return margin_completion(own, margin)


def down_pass(
    intermediates: IntermediateEstimates,
    *,
    equal_variance_rtol: float = EQUAL_VARIANCE_RTOL,
    weighted_cell_cap: int = DEFAULT_WEIGHTED_CELL_CAP,
) -> FinalEstimates:
    """Finalize estimates margin by margin, smallest first.

    The total passes through unchanged. Each larger table is corrected by
    swapping its own margin completion for the completion built from the
    already-finalized margins; when its pooled variances are not equal within
    tolerance, the correction is instead the variance-weighted projection onto
    the fixed-margin affine space, solved densely on that single table.
    """
    desired = intermediates.desired
    schema = desired.schema
    final: dict[MarginId, np.ndarray] = {}
    provenance: dict[MarginId, str] = {}

    empty = schema.empty_margin
    final[empty] = intermediates[empty].values
    provenance[empty] = EFFICIENT_PATH

    for size in range(1, desired.max_cardinality + 1):
        for margin in desired.by_cardinality(size):
            table = intermediates[margin]
            anchored = margin_completion(final, margin)
            if _equal_within(table, equal_variance_rtol):
                correction = project_consistent(table.values, margin)
                final[margin] = table.values - correction + anchored
                provenance[margin] = EFFICIENT_PATH
            else:
                if margin.ncells > weighted_cell_cap:
                    raise SizeGuardError(
                        f"weighted projection on {margin.name!r} needs {margin.ncells} cells, "
                        f"above the cap of {weighted_cell_cap}; raise the cap to force it",
                        required_bytes=margin.ncells**2 * 8,
                        cap_bytes=weighted_cell_cap,
                    )
                basis = zero_margin_basis(margin).matrix()
                solved = projection.affine_projection(
                    table.values.ravel(),
                    table.variance_array().ravel(),
                    anchored.ravel(),
                    basis,
                )
                final[margin] = solved.reshape(margin.shape)
                provenance[margin] = WEIGHTED_PATH
    return FinalEstimates(schema, desired, final, provenance)


def _equal_within(table: Table, rtol: float) -> bool:
    if np.ndim(table.variance) == 0:
        return True
    lo = float(np.min(table.variance))
    hi = float(np.max(table.variance))
    return hi / lo - 1.0 <= rtol
