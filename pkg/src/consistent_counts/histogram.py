"""Dense histogram tables and the margin algebra every other module consumes.

A histogram lives over a fixed ordered list of categorical variables (the
schema). A margin is a subset of those variables; the table on a margin holds
one 64-bit count per level combination, stored dense in C order (last variable
fastest). Levels are 1-based everywhere, matching the on-disk formats.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import (
    ConflictError,
    MarginMismatchError,
    ParameterError,
    SchemaError,
    StructureError,
)


class _SumMarker:
    """Singleton coordinate marker meaning "summed over this variable"."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "SUM"


#: Coordinate marker: a cell index entry of SUM collapses that variable.
SUM = _SumMarker()

Coordinate = Union[int, _SumMarker]
CellIndex = tuple  # entries are 1-based levels or SUM

# Tolerance below which per-cell variances within a table count as equal and
# the cheap orthogonal-projection path applies: max/min - 1 <= this.
EQUAL_VARIANCE_RTOL = 1e-9


@dataclass(frozen=True)
class Variable:
    name: str
    levels: int

    def __post_init__(self):
        if not self.name:
            raise SchemaError("variable name must be non-empty")
        if "+" in self.name or "," in self.name or ":" in self.name:
            raise SchemaError(f"variable name {self.name!r} contains a reserved character")
        if self.levels < 2:
            raise SchemaError(f"variable {self.name!r} needs at least 2 levels, got {self.levels}")


@dataclass(frozen=True)
class Schema:
    """Ordered variables; the universe every margin and table lives in."""

    variables: tuple[Variable, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        object.__setattr__(self, "_index", {v.name: i for i, v in enumerate(self.variables)})

    @classmethod
    def of(cls, *pairs: tuple[str, int]) -> "Schema":
        return cls(tuple(Variable(name, levels) for name, levels in pairs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown variable {name!r}") from None

    def levels_of(self, name: str) -> int:
        return self.variables[self.index_of(name)].levels

    def margin(self, *names: str) -> "MarginId":
        return MarginId(self, tuple(names))

    @property
    def full_margin(self) -> "MarginId":
        return MarginId(self, self.names)

    @property
    def empty_margin(self) -> "MarginId":
        return MarginId(self, ())


@dataclass(frozen=True, eq=False)
class MarginId:
    """A subset of schema variables, kept sorted in schema order.

    The empty set is valid and denotes the grand total.
    """

    schema: Schema
    members: tuple[str, ...]

    def __post_init__(self):
        idx = [self.schema.index_of(n) for n in self.members]
        if len(set(idx)) != len(idx):
            raise SchemaError(f"duplicate variables in margin {self.members!r}")
        order = np.argsort(idx)
        members = tuple(self.members[i] for i in order)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "axes", tuple(sorted(idx)))
        object.__setattr__(self, "_hash", hash((id(type(self)), self.schema.names, members)))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MarginId)
            and self.members == other.members
            and self.schema == other.schema
        )

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[str]:
        return iter(self.members)

    def __contains__(self, name: str) -> bool:
        return name in self.members

    def __repr__(self) -> str:
        return f"MarginId({self.name or '<total>'})"

    @property
    def name(self) -> str:
        """"+"-joined member list; empty string for the total."""
        return "+".join(self.members)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.schema.levels_of(n) for n in self.members)

    @property
    def ncells(self) -> int:
        return int(math.prod(self.shape))

    def issubset(self, other: "MarginId") -> bool:
        return set(self.members) <= set(other.members)

    def union(self, other: "MarginId") -> "MarginId":
        return MarginId(self.schema, tuple(set(self.members) | set(other.members)))

    def difference(self, other: Iterable[str]) -> "MarginId":
        dropped = set(other)
        return MarginId(self.schema, tuple(n for n in self.members if n not in dropped))

    def add(self, name: str) -> "MarginId":
        return MarginId(self.schema, self.members + (name,))

    def subsets(self, *, proper: bool = False) -> Iterator["MarginId"]:
        top = len(self.members) - (1 if proper else 0)
        for size in range(top + 1):
            for combo in itertools.combinations(self.members, size):
                yield MarginId(self.schema, combo)

    def sort_key(self) -> tuple:
        return (len(self.members), self.axes)


def _as_value_array(values, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        if arr.size != math.prod(shape):
            raise StructureError(f"expected {math.prod(shape)} cells shaped {shape}, got {arr.shape}")
        arr = arr.reshape(shape)
    arr = arr.copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Table:
    """One dense margin table: values plus a scalar or per-cell variance.

    Variances must be strictly positive and finite. A scalar variance means
    every cell shares it; a per-cell array is only materialized when the
    within-table variances genuinely differ.
    """

    margin: MarginId
    values: np.ndarray
    variance: float | np.ndarray

    def __post_init__(self):
        shape = self.margin.shape
        object.__setattr__(self, "values", _as_value_array(self.values, shape))
        if np.ndim(self.variance) == 0:
            var = float(self.variance)
            if not (var > 0.0 and math.isfinite(var)):
                raise StructureError(f"table {self.margin.name!r}: variance must be positive and finite, got {var}")
            object.__setattr__(self, "variance", var)
        else:
            var = _as_value_array(self.variance, shape)
            if not (np.all(var > 0.0) and np.all(np.isfinite(var))):
                raise StructureError(f"table {self.margin.name!r}: all variances must be positive and finite")
            object.__setattr__(self, "variance", var)

    @property
    def ncells(self) -> int:
        return self.margin.ncells

    @property
    def equal_variance(self) -> bool:
        if np.ndim(self.variance) == 0:
            return True
        lo = float(np.min(self.variance))
        hi = float(np.max(self.variance))
        return hi / lo - 1.0 <= EQUAL_VARIANCE_RTOL

    def variance_array(self) -> np.ndarray:
        if np.ndim(self.variance) == 0:
            return np.full(self.margin.shape, self.variance)
        return np.asarray(self.variance)

    def total(self) -> float:
        return float(np.sum(self.values))


def _collapse(values: np.ndarray, margin: MarginId, target: MarginId) -> np.ndarray:
    """Sum a dense array over the variables of margin not in target.

    Collapses the variable with the most levels first; ties break on schema
    order so the reduction order is reproducible.
    """
    keep = set(target.members)
    drop = [(self_pos, name) for self_pos, name in enumerate(margin.members) if name not in keep]
    drop.sort(key=lambda item: (-margin.schema.levels_of(item[1]), margin.schema.index_of(item[1])))
    remaining = [pos for pos, _ in drop]
    out = values
    while remaining:
        pos = remaining.pop(0)
        out = out.sum(axis=pos)
        remaining = [p - 1 if p > pos else p for p in remaining]
    return out


def marginalize(table: Table, target: MarginId) -> Table:
    """Sum a table over the variables not in target.

    Per-cell variances sum cell-by-cell; a scalar variance scales by the
    number of collapsed cells.
    """
    if not target.issubset(table.margin):
        raise MarginMismatchError(
            f"target {target.name or '<total>'!r} is not a subset of table margin {table.margin.name or '<total>'!r}"
        )
    if target == table.margin:
        return table
    values = _collapse(table.values, table.margin, target)
    if np.ndim(table.variance) == 0:
        collapsed = table.margin.ncells // target.ncells
        variance = table.variance * collapsed
    else:
        variance = _collapse(table.variance, table.margin, target)
    return Table(target, values, variance)


def cell_lookup(table: Table, idx: Sequence[Coordinate]) -> float:
    """Look up one cell; SUM entries are summed over on the fly."""
    idx = tuple(idx)
    if len(idx) != len(table.margin):
        raise IndexError(f"index length {len(idx)} does not match margin size {len(table.margin)}")
    selector = []
    for coord, name in zip(idx, table.margin.members):
        if coord is SUM:
            selector.append(slice(None))
        else:
            levels = table.margin.schema.levels_of(name)
            if not isinstance(coord, (int, np.integer)) or not (1 <= coord <= levels):
                raise IndexError(f"coordinate {coord!r} out of range 1..{levels} for variable {name!r}")
            selector.append(int(coord) - 1)
    return float(np.sum(table.values[tuple(selector)]))


@dataclass(frozen=True, eq=False)
class DesiredSet:
    """A downward-closed family of margins to estimate."""

    schema: Schema
    margins: frozenset[MarginId]

    def __post_init__(self):
        object.__setattr__(self, "margins", frozenset(self.margins))
        if not self.margins:
            raise StructureError("desired set must be non-empty")
        for m in self.margins:
            if m.schema != self.schema:
                raise SchemaError("desired margins must share the set's schema")
        members = self.margins
        for m in members:
            for sub in m.subsets(proper=True):
                if sub not in members:
                    raise StructureError(
                        f"desired set is not downward closed: {m.name!r} present but {sub.name or '<total>'!r} missing"
                    )
        object.__setattr__(self, "_ordered", tuple(sorted(self.margins, key=MarginId.sort_key)))

    def __contains__(self, margin: MarginId) -> bool:
        return margin in self.margins

    def __iter__(self) -> Iterator[MarginId]:
        return iter(self._ordered)

    def __len__(self) -> int:
        return len(self.margins)

    @property
    def ordered(self) -> tuple[MarginId, ...]:
        """Margins in canonical order: by cardinality, then schema position."""
        return self._ordered

    @property
    def max_cardinality(self) -> int:
        return max(len(m) for m in self.margins)

    @property
    def total_cells(self) -> int:
        return sum(m.ncells for m in self.margins)

    def by_cardinality(self, size: int) -> tuple[MarginId, ...]:
        return tuple(m for m in self._ordered if len(m) == size)

    def maximal(self) -> tuple[MarginId, ...]:
        out = []
        for m in self._ordered:
            if not any(m is not other and m.issubset(other) for other in self.margins):
                out.append(m)
        return tuple(out)

    def without(self, drop: Iterable[MarginId]) -> "DesiredSet":
        return DesiredSet(self.schema, self.margins - frozenset(drop))

    def offsets(self) -> dict[MarginId, int]:
        """Start offset of each margin in the canonical cell vector."""
        out = {}
        pos = 0
        for m in self._ordered:
            out[m] = pos
            pos += m.ncells
        return out

    def pack(self, tables: Mapping[MarginId, np.ndarray]) -> np.ndarray:
        """Concatenate per-margin arrays into the canonical cell vector."""
        return np.concatenate([np.ravel(tables[m]) for m in self._ordered]) if self._ordered else np.empty(0)

    def unpack(self, vec: np.ndarray) -> dict[MarginId, np.ndarray]:
        if vec.shape != (self.total_cells,):
            raise StructureError(f"expected vector of length {self.total_cells}, got {vec.shape}")
        out = {}
        pos = 0
        for m in self._ordered:
            out[m] = np.asarray(vec[pos : pos + m.ncells]).reshape(m.shape)
            pos += m.ncells
        return out


def close_downward(margins: Iterable[MarginId]) -> DesiredSet:
    """Union of all subsets of the given margins (always includes the total)."""
    margins = list(margins)
    if not margins:
        raise ParameterError("close_downward needs at least one margin")
    schema = margins[0].schema
    closed: set[MarginId] = set()
    for m in margins:
        if m.schema != schema:
            raise SchemaError("all margins must share one schema")
        closed.update(m.subsets())
    return DesiredSet(schema, frozenset(closed))


@dataclass(frozen=True, eq=False)
class NoisyTableSet:
    """The observed tables: one noisy table per margin, no duplicates."""

    schema: Schema
    tables: Mapping[MarginId, Table]

    def __post_init__(self):
        tables = dict(self.tables)
        for margin, table in tables.items():
            if margin.schema != self.schema or table.margin != margin:
                raise SchemaError(f"table keyed {margin.name!r} does not match its margin or schema")
        object.__setattr__(self, "tables", MappingProxyType(tables))
        object.__setattr__(self, "_ordered", tuple(sorted(tables, key=MarginId.sort_key)))

    @classmethod
    def build(cls, schema: Schema, tables: Iterable[Table]) -> "NoisyTableSet":
        keyed: dict[MarginId, Table] = {}
        for t in tables:
            if t.margin in keyed:
                raise ConflictError(
                    f"duplicate table for margin {t.margin.name or '<total>'!r}",
                    colliding=(t.margin, t.margin),
                )
            keyed[t.margin] = t
        return cls(schema, keyed)

    @property
    def margins(self) -> tuple[MarginId, ...]:
        return self._ordered

    def __getitem__(self, margin: MarginId) -> Table:
        return self.tables[margin]

    def __contains__(self, margin: MarginId) -> bool:
        return margin in self.tables

    def __len__(self) -> int:
        return len(self.tables)

    def __iter__(self) -> Iterator[Table]:
        return (self.tables[m] for m in self._ordered)

    def equal_variance(self, margin: MarginId) -> bool:
        return self.tables[margin].equal_variance

    def total_counts(self) -> int:
        return sum(t.ncells for t in self)

    def supersets_of(self, margin: MarginId) -> tuple[MarginId, ...]:
        return tuple(m for m in self._ordered if margin.issubset(m))


def pre_aggregate(noisy: NoisyTableSet, drop: str) -> NoisyTableSet:
    """Remove one variable by summing it out of every table that carries it.

    Raises a conflict error when aggregation would produce two tables on the
    same margin; the caller must decide which source to keep.
    """
    noisy.schema.index_of(drop)
    if not any(drop in m for m in noisy.margins):
        raise ParameterError(f"variable {drop!r} does not appear in any observed table")
    produced: dict[MarginId, MarginId] = {}  # result margin -> source margin
    out: list[Table] = []
    for table in noisy:
        if drop in table.margin:
            target = table.margin.difference((drop,))
            reduced = marginalize(table, target)
        else:
            target = table.margin
            reduced = table
        if target in produced:
            raise ConflictError(
                f"aggregating out {drop!r} collides on margin {target.name or '<total>'!r}: "
                f"from {produced[target].name or '<total>'!r} and {table.margin.name or '<total>'!r}",
                colliding=(produced[target], table.margin),
            )
        produced[target] = table.margin
        out.append(reduced)
    return NoisyTableSet.build(noisy.schema, out)
