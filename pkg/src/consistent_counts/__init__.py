"""Self-consistent minimum-variance estimates from noisy histogram margins.

Independently noised counts of the same histogram, observed at several levels
of marginalization, generally disagree with each other. This package pools
them into estimates that are exactly self-consistent across margins, carry
the smallest variance any linear unbiased post-processing can achieve under
its stated assumptions, and come with exact or Monte-Carlo confidence
intervals.
"""

__version__ = "0.1.0"

from .collection import IntermediateEstimates, collection_cell, collection_step, spanning_margins
from .downpass import (
    FinalEstimates,
    ZeroMarginBasis,
    down_pass,
    margin_completion,
    project_consistent,
    zero_margin_basis,
)
from .errors import (
    AssumptionError,
    ConflictError,
    CountsError,
    IncompleteMarginsError,
    MarginMismatchError,
    MethodAssumptionError,
    NumericError,
    ParameterError,
    ParseError,
    SchemaError,
    SizeGuardError,
    StructureError,
    UnreachableMarginError,
)
from .histogram import (
    SUM,
    DesiredSet,
    MarginId,
    NoisyTableSet,
    Schema,
    Table,
    Variable,
    cell_lookup,
    close_downward,
    marginalize,
    pre_aggregate,
)
from .pipeline import PROJECTION, TWO_PASS, estimate, oracle, two_pass
from .projection import (
    ConstraintSystem,
    blue_projection,
    build_constraints,
    dimension_report,
)
from .uncertainty import (
    Interval,
    IntervalTable,
    NoiseModel,
    clip_interval,
    clip_table,
    exact_cell_variance,
    exact_variance_tables,
    exact_z_intervals,
    mc_df_intervals,
    mc_t_intervals,
    z_interval,
)
