"""Time and memory ladder comparing the two estimation routes.

Each rung builds a seeded synthetic instance, times both routes (separately
from the memory pass, so allocation tracing never distorts wall times), and
measures each route's allocation peak. Projection runs refused by the
allocation guard are recorded with the reason instead of failing the ladder.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from . import pipeline
from .errors import SizeGuardError
from .histogram import DesiredSet, NoisyTableSet, Schema, Table, _collapse, close_downward
from .simulate import ExperimentReport, ScenarioConfig, generate_instance
from .uncertainty import derive_rng, sample_noise

PL94_LABEL = "pl94-shaped"


@dataclass(frozen=True)
class BenchRow:
    label: str
    counts: int
    two_pass_time: float | None = None
    projection_time: float | None = None
    two_pass_memory: int | None = None
    projection_memory: int | None = None
    projection_skipped: str | None = None


def pl94_shaped_instance(seed: int = 0, noise_variance: float = 2.0):
    """Synthetic instance shaped like the redistricting product.

    Four variables sized 2, 2, 8, 63; nine observed tables: each variable by
    itself, the three 2-way crosses among the first three variables, their
    3-way cross, and the full 4-way cross. Desired: every margin.
    """
    schema = Schema.of(("A", 2), ("B", 2), ("C", 8), ("D", 63))
    observed_margins = [
        schema.margin("A"),
        schema.margin("B"),
        schema.margin("C"),
        schema.margin("D"),
        schema.margin("A", "B"),
        schema.margin("A", "C"),
        schema.margin("B", "C"),
        schema.margin("A", "B", "C"),
        schema.margin("A", "B", "C", "D"),
    ]
    rng = derive_rng(seed, 1994)
    full = schema.full_margin
    keep = rng.random(full.shape) >= 0.5
    detail = (rng.poisson(5.0, full.shape) * keep).astype(np.float64)
    tables = []
    for margin in observed_margins:
        values = _collapse(detail, full, margin) + sample_noise(
            "gaussian", noise_variance, margin.shape, rng
        )
        tables.append(Table(margin, values, noise_variance))
    noisy = NoisyTableSet.build(schema, tables)
    return detail, noisy


def _timed(fn, reps: int) -> float:
    best = None
    for _ in range(max(1, reps)):
        start = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - start
        best = elapsed if best is None else min(best, elapsed)
    return best


def _traced(fn) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    before, _ = tracemalloc.get_traced_memory()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return max(0, peak - before)


def _bench_instance(label: str, seed: int):
    if label == PL94_LABEL:
        _, noisy = pl94_shaped_instance(seed)
        return noisy
    size = int(label.split("x")[0])
    cfg = ScenarioConfig(variables=size, levels=size, replicates=1, seed=seed)
    _, noisy = generate_instance(cfg)
    return noisy


def bench_rung(
    label: str,
    *,
    seed: int = 0,
    timing_reps: int = 3,
    run_projection: bool = True,
    mem_cap: int | None = None,
) -> BenchRow:
    """Benchmark one instance size; always completes, recording any skip."""
    noisy = _bench_instance(label, seed)
    desired = close_downward(noisy.margins)
    counts = desired.total_cells

    two_pass_time = _timed(lambda: pipeline.two_pass(noisy, desired), timing_reps)
    two_pass_memory = _traced(lambda: pipeline.two_pass(noisy, desired))

    projection_time = projection_memory = None
    skip = None
    if run_projection:
        try:
            projection_time = _timed(
                lambda: pipeline.oracle(noisy, desired, with_covariance=False, mem_cap=mem_cap),
                timing_reps,
            )
            projection_memory = _traced(
                lambda: pipeline.oracle(noisy, desired, with_covariance=False, mem_cap=mem_cap)
            )
        except SizeGuardError as exc:
            skip = str(exc)
            projection_time = projection_memory = None
    return BenchRow(
        label,
        counts,
        two_pass_time=two_pass_time,
        projection_time=projection_time,
        two_pass_memory=two_pass_memory,
        projection_memory=projection_memory,
        projection_skipped=skip,
    )


def bench_ladder(
    sizes=(3, 4, 5, 6),
    *,
    pl94: bool = True,
    seed: int = 0,
    timing_reps: int = 3,
    mem_cap: int | None = None,
) -> tuple[list[BenchRow], ExperimentReport]:
    labels = [f"{s}x{s}" for s in sizes] + ([PL94_LABEL] if pl94 else [])
    start = time.perf_counter()
    rows = [
        bench_rung(label, seed=seed, timing_reps=timing_reps, mem_cap=mem_cap)
        for label in labels
    ]
    metrics = {}
    skipped = []
    for row in rows:
        metrics[f"time.two-pass.{row.label}"] = row.two_pass_time
        metrics[f"memory.two-pass.{row.label}"] = float(row.two_pass_memory)
        metrics[f"counts.{row.label}"] = float(row.counts)
        if row.projection_time is not None:
            metrics[f"time.projection.{row.label}"] = row.projection_time
            metrics[f"memory.projection.{row.label}"] = float(row.projection_memory)
        if row.projection_skipped:
            skipped.append(f"{row.label}: {row.projection_skipped}")
    report = ExperimentReport(
        "bench",
        {"sizes": list(sizes), "pl94": pl94, "seed": seed, "timing_reps": timing_reps},
        metrics,
        skipped=tuple(skipped),
        wall_time=time.perf_counter() - start,
    )
    return rows, report


def raw_count_bytes(noisy: NoisyTableSet) -> int:
    """Storage footprint of the raw observed counts alone."""
    return noisy.total_counts() * 8
