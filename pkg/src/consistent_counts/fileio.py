"""On-disk formats: schema JSON, counts/estimates CSV, reports, run manifests.

Counts files use the header ``table,cell_coords,value,variance`` where
``table`` is a "+"-joined variable list (empty string for the total) and
``cell_coords`` a ":"-joined list of 1-based level indices (empty for the
total's single cell).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import resource
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .downpass import FinalEstimates
from .errors import ParseError
from .histogram import MarginId, NoisyTableSet, Schema, Table
from .uncertainty import IntervalTable

COUNTS_HEADER = ["table", "cell_coords", "value", "variance"]
ESTIMATES_HEADER = ["table", "cell_coords", "estimate", "variance"]
INTERVALS_HEADER = [
    "table", "cell_coords", "estimate", "lower", "upper", "alpha", "method", "clipped", "empty",
]


def read_schema(path: str | Path) -> Schema:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", str(path)) from exc
    if not isinstance(data, dict) or "variables" not in data:
        raise ParseError('expected an object with a "variables" list', str(path))
    pairs = []
    for entry in data["variables"]:
        try:
            pairs.append((str(entry["name"]), int(entry["levels"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad variable entry {entry!r}", str(path)) from exc
    return Schema.of(*pairs)


def write_schema(schema: Schema, path: str | Path) -> None:
    payload = {"variables": [{"name": v.name, "levels": v.levels} for v in schema.variables]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _margin_from_name(schema: Schema, name: str, path: str, line: int) -> MarginId:
    members = tuple(part for part in name.split("+") if part)
    try:
        return schema.margin(*members)
    except Exception as exc:
        raise ParseError(f"unknown table {name!r}: {exc}", path, line) from exc


def _coords_from_text(margin: MarginId, text: str, path: str, line: int) -> tuple[int, ...]:
    parts = tuple(p for p in text.split(":") if p)
    if len(parts) != len(margin):
        raise ParseError(
            f"cell_coords {text!r} has {len(parts)} entries, table {margin.name!r} needs {len(margin)}",
            path,
            line,
        )
    try:
        coords = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ParseError(f"non-integer coordinate in {text!r}", path, line) from exc
    for coord, name in zip(coords, margin.members):
        levels = margin.schema.levels_of(name)
        if not 1 <= coord <= levels:
            raise ParseError(f"coordinate {coord} outside 1..{levels} for {name!r}", path, line)
    return coords


def read_counts(
    schema: Schema,
    path: str | Path,
    *,
    invariant_epsilon: float | None = None,
) -> NoisyTableSet:
    """Parse a counts CSV into an observed-table set.

    Every cell of every mentioned table must appear exactly once. Variances
    must be positive; zero-variance rows (invariant counts) are accepted only
    when ``invariant_epsilon`` is given, and are floored at epsilon times the
    median positive variance.
    """
    path = Path(path)
    cells: dict[MarginId, dict[tuple[int, ...], tuple[float, float]]] = {}
    zero_rows: list[tuple[MarginId, tuple[int, ...]]] = []
    positives: list[float] = []
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != COUNTS_HEADER:
            raise ParseError(f"expected header {','.join(COUNTS_HEADER)!r}", str(path), 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not col.strip() for col in row):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", str(path), lineno)
            margin = _margin_from_name(schema, row[0].strip(), str(path), lineno)
            coords = _coords_from_text(margin, row[1].strip(), str(path), lineno)
            try:
                value = float(row[2])
                variance = float(row[3])
            except ValueError as exc:
                raise ParseError(f"non-numeric value/variance in {row!r}", str(path), lineno) from exc
            if variance < 0.0:
                raise ParseError(f"negative variance {variance}", str(path), lineno)
            if variance == 0.0:
                if invariant_epsilon is None:
                    raise ParseError(
                        "zero variance (invariant count) needs an explicit epsilon floor",
                        str(path),
                        lineno,
                    )
                zero_rows.append((margin, coords))
            else:
                positives.append(variance)
            table_cells = cells.setdefault(margin, {})
            if coords in table_cells:
                raise ParseError(f"duplicate cell {row[1]!r} in table {row[0]!r}", str(path), lineno)
            table_cells[coords] = (value, variance)

    if zero_rows:
        if not positives:
            raise ParseError("all variances are zero; nothing to anchor the epsilon floor", str(path))
        floor = invariant_epsilon * float(np.median(positives))
        for margin, coords in zero_rows:
            value, _ = cells[margin][coords]
            cells[margin][coords] = (value, floor)

    tables = []
    for margin, table_cells in cells.items():
        if len(table_cells) != margin.ncells:
            raise ParseError(
                f"table {margin.name or '<total>'!r} has {len(table_cells)} cells, needs {margin.ncells}",
                str(path),
            )
        values = np.empty(margin.shape)
        variance = np.empty(margin.shape)
        for coords, (value, var) in table_cells.items():
            pos = tuple(c - 1 for c in coords)
            values[pos] = value
            variance[pos] = var
        flat = variance.ravel()
        var_out: float | np.ndarray = float(flat[0]) if np.all(flat == flat[0]) else variance
        tables.append(Table(margin, values, var_out))
    return NoisyTableSet.build(schema, tables)


def _cell_rows(margin: MarginId):
    if len(margin) == 0:
        yield (), ""
        return
    for pos in np.ndindex(*margin.shape):
        yield pos, ":".join(str(c + 1) for c in pos)


def write_counts(noisy: NoisyTableSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(COUNTS_HEADER)
        for table in noisy:
            variance = table.variance_array()
            for pos, coords in _cell_rows(table.margin):
                writer.writerow(
                    [table.margin.name, coords, repr(table.values[pos]), repr(variance[pos])]
                )


def write_estimates(
    estimates: FinalEstimates,
    variances: Mapping[MarginId, np.ndarray | float],
    path: str | Path,
) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ESTIMATES_HEADER)
        for margin in estimates.desired:
            values = estimates[margin]
            var = np.broadcast_to(np.asarray(variances[margin]), margin.shape)
            for pos, coords in _cell_rows(margin):
                writer.writerow([margin.name, coords, repr(values[pos]), repr(var[pos])])


def write_intervals(
    intervals: IntervalTable,
    estimates: FinalEstimates,
    path: str | Path,
) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(INTERVALS_HEADER)
        for margin in intervals.desired:
            est = estimates[margin]
            lower = intervals.lower[margin]
            upper = intervals.upper[margin]
            empty = intervals.empty[margin] if intervals.empty is not None else None
            for pos, coords in _cell_rows(margin):
                writer.writerow(
                    [
                        margin.name,
                        coords,
                        repr(est[pos]),
                        repr(float(lower[pos])),
                        repr(float(upper[pos])),
                        intervals.alpha,
                        intervals.method,
                        int(intervals.clipped),
                        int(bool(empty[pos])) if empty is not None else 0,
                    ]
                )


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Provenance record emitted for every CLI run, success or failure."""

    command: str
    argv: list[str]
    config_hash: str
    seed: int | None
    inputs: dict[str, str]
    version: str
    wall_time: float = 0.0
    peak_memory: int = 0
    outputs: list[str] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def config_hash(command: str, options: Mapping) -> str:
    canon = json.dumps({"command": command, **{k: options[k] for k in sorted(options)}}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def peak_rss_bytes() -> int:
    """Process high-water resident memory; ru_maxrss is KiB on Linux."""
    usage = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return usage * 1024 if sys.platform.startswith("linux") else usage
