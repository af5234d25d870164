"""End-to-end estimation drivers: the two-pass route and the dense oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collection import collection_step
from .downpass import FinalEstimates, down_pass
from .errors import ParameterError
from .histogram import DesiredSet, MarginId, NoisyTableSet, Table, close_downward
from .projection import ConstraintSystem, blue_projection, build_constraints

TWO_PASS = "two-pass"
PROJECTION = "projection"
METHODS = (TWO_PASS, PROJECTION)


def default_desired(noisy: NoisyTableSet) -> DesiredSet:
    """Everything derivable from the observed tables: their downward closure."""
    return close_downward(noisy.margins)


def two_pass(
    noisy: NoisyTableSet,
    desired: DesiredSet | None = None,
    *,
    drop_unreachable: bool = False,
) -> FinalEstimates:
    """Aggregate estimates from finer tables, then project for consistency."""
    desired = desired if desired is not None else default_desired(noisy)
    intermediates = collection_step(noisy, desired, drop_unreachable=drop_unreachable)
    return down_pass(intermediates)


@dataclass(frozen=True, eq=False)
class OracleResult:
    estimates: FinalEstimates
    covariance: np.ndarray | None
    system: ConstraintSystem
    desired_index: np.ndarray  # rows of the system vector kept in `estimates`


def observed_vector(
    noisy: NoisyTableSet, desired: DesiredSet
) -> tuple[np.ndarray, np.ndarray]:
    """(values, variance diagonal) over the desired-cell coordinate system.

    Cells of unobserved margins carry value 0 and infinite variance, the
    zero-weight convention the dense solver expects.
    """
    offsets = desired.offsets()
    values = np.zeros(desired.total_cells)
    diag = np.full(desired.total_cells, np.inf)
    for margin in noisy.margins:
        if margin not in desired:
            continue
        table = noisy[margin]
        start = offsets[margin]
        values[start : start + margin.ncells] = table.values.ravel()
        diag[start : start + margin.ncells] = table.variance_array().ravel()
    return values, diag


def oracle(
    noisy: NoisyTableSet,
    desired: DesiredSet | None = None,
    *,
    with_covariance: bool = True,
    mem_cap: int | None = None,
) -> OracleResult:
    """Dense minimum-variance estimate of every desired cell.

    Internally works on the downward closure of desired and observed margins
    together (the solver needs the observed cells in its coordinate system)
    and restricts the answer back to the requested margins.
    """
    desired = desired if desired is not None else default_desired(noisy)
    working = close_downward(set(desired.margins) | set(noisy.margins))
    system = build_constraints(noisy.schema, working, mem_cap=mem_cap)
    values, diag = observed_vector(noisy, working)
    estimate, covariance = blue_projection(
        values, diag, system, with_covariance=with_covariance, mem_cap=mem_cap
    )

    offsets = working.offsets()
    keep = np.concatenate(
        [offsets[m] + np.arange(m.ncells) for m in desired.ordered]
    )
    tables = desired.unpack(estimate[keep])
    final = FinalEstimates(
        noisy.schema, desired, tables, {m: "projection" for m in desired}
    )
    if covariance is not None and keep.size != covariance.shape[0]:
        covariance = covariance[np.ix_(keep, keep)]
    return OracleResult(final, covariance, system, keep)


def estimate(
    noisy: NoisyTableSet,
    desired: DesiredSet | None = None,
    *,
    method: str = TWO_PASS,
    drop_unreachable: bool = False,
    mem_cap: int | None = None,
) -> FinalEstimates:
    """Run either estimation route and return the final tables."""
    if method == TWO_PASS:
        return two_pass(noisy, desired, drop_unreachable=drop_unreachable)
    if method == PROJECTION:
        return oracle(noisy, desired, with_covariance=False, mem_cap=mem_cap).estimates
    raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")


def replace_values(
    noisy: NoisyTableSet, values: dict[MarginId, np.ndarray]
) -> NoisyTableSet:
    """Same margins and variances, different cell values."""
    tables = [
        Table(t.margin, values[t.margin], t.variance) for t in noisy
    ]
    return NoisyTableSet.build(noisy.schema, tables)


def linear_map(noisy: NoisyTableSet, desired: DesiredSet | None = None) -> np.ndarray:
    """Matrix of the two-pass estimator for this observation layout.

    The estimator is linear in the observed values, so running it on each
    basis input recovers its matrix: desired cells by observed cells, with the
    observed cells ordered by canonical margin then C order.
    """
    desired = desired if desired is not None else default_desired(noisy)
    zeros = {m: np.zeros(m.shape) for m in noisy.margins}
    columns = []
    for margin in noisy.margins:
        for flat in range(margin.ncells):
            basis_values = dict(zeros)
            impulse = np.zeros(margin.ncells)
            impulse[flat] = 1.0
            basis_values[margin] = impulse.reshape(margin.shape)
            final = two_pass(replace_values(noisy, basis_values), desired)
            columns.append(final.pack())
    return np.stack(columns, axis=1)


def observed_values_vector(noisy: NoisyTableSet) -> np.ndarray:
    """Observed values in the column order used by linear_map."""
    return np.concatenate([noisy[m].values.ravel() for m in noisy.margins])


def observed_variance_vector(noisy: NoisyTableSet) -> np.ndarray:
    """Observed per-cell variances in the column order used by linear_map."""
    return np.concatenate([noisy[m].variance_array().ravel() for m in noisy.margins])
