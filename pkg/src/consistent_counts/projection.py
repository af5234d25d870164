"""Dense minimum-variance projection onto the self-consistency constraints.

This is the general-case solver and the validation oracle for the two-pass
estimator: assemble the constraint matrix over every desired cell, then solve
the variance-weighted least-squares problem restricted to its null space.
Estimates and covariances come from rank-tolerant factorizations; nothing is
ever explicitly inverted. The module is deliberately the memory-hungry
baseline, so every dense allocation is estimated up front and refused above a
configurable cap.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import NumericError, SizeGuardError, StructureError
from .histogram import DesiredSet, MarginId, Schema

#: Default cap on the estimated dense allocation, in bytes.
DEFAULT_MEM_CAP = 2 * 1024**3

#: Environment variable overriding the cap (integer bytes, or a number with a
#: B/KiB/MiB/GiB suffix).
MEM_CAP_ENV = "CONSISTENT_COUNTS_MEM_CAP"

_SUFFIXES = {"B": 1, "KIB": 1024, "MIB": 1024**2, "GIB": 1024**3}


def resolve_mem_cap(mem_cap: int | None = None) -> int:
    """Explicit cap, else the environment override, else the default."""
    if mem_cap is not None:
        return int(mem_cap)
    raw = os.environ.get(MEM_CAP_ENV)
    if raw is None:
        return DEFAULT_MEM_CAP
    text = raw.strip().upper()
    for suffix, scale in sorted(_SUFFIXES.items(), key=lambda kv: -len(kv[0])):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * scale)
    return int(text)


def _guard(required: int, cap: int, what: str) -> None:
    if required > cap:
        raise SizeGuardError(
            f"{what} needs an estimated {required / 1024**2:.0f} MiB, above the cap of "
            f"{cap / 1024**2:.0f} MiB; set {MEM_CAP_ENV} to raise it",
            required_bytes=required,
            cap_bytes=cap,
        )


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Self-consistency constraints over the canonical desired-cell vector.

    One row per (parent margin, child margin one variable smaller, child
    cell): the child cell minus the sum of parent cells mapping to it. Rows
    are intentionally redundant; solvers must be rank-tolerant.
    """

    schema: Schema
    desired: DesiredSet
    matrix: np.ndarray
    offsets: Mapping[MarginId, int]

    @property
    def ncells(self) -> int:
        return self.desired.total_cells

    def column_of(self, margin: MarginId, coords: Sequence[int]) -> int:
        """Column of one desired cell; coordinates are 1-based."""
        zero_based = tuple(int(c) - 1 for c in coords)
        flat = int(np.ravel_multi_index(zero_based, margin.shape)) if len(margin) else 0
        return self.offsets[margin] + flat

    def pack(self, tables: Mapping[MarginId, np.ndarray]) -> np.ndarray:
        return self.desired.pack(tables)

    def unpack(self, vec: np.ndarray) -> dict[MarginId, np.ndarray]:
        return self.desired.unpack(vec)


def build_constraints(
    schema: Schema, desired: DesiredSet, *, mem_cap: int | None = None
) -> ConstraintSystem:
    """Assemble the dense constraint matrix for a downward-closed family."""
    if desired.schema != schema:
        raise StructureError("desired set was built against a different schema")
    n = desired.total_cells
    nrows = sum(
        margin.difference((name,)).ncells
        for margin in desired
        for name in margin.members
    )
    _guard(nrows * n * 8, resolve_mem_cap(mem_cap), f"constraint matrix ({nrows} x {n})")

    offsets = desired.offsets()
    A = np.zeros((nrows, n))
    row = 0
    for margin in desired.ordered:
        if len(margin) == 0:
            continue
        cell_ids = np.arange(margin.ncells).reshape(margin.shape)
        for pos, name in enumerate(margin.members):
            child = margin.difference((name,))
            mapped = np.moveaxis(cell_ids, pos, -1).reshape(child.ncells, margin.shape[pos])
            rows = row + np.arange(child.ncells)
            A[rows, offsets[child] + np.arange(child.ncells)] = 1.0
            A[rows[:, None], offsets[margin] + mapped] = -1.0
            row += child.ncells
    return ConstraintSystem(schema, desired, A, offsets)


def dimension_report(system: ConstraintSystem) -> tuple[int, int]:
    """(number of desired cells, min(rank, nullity) of the constraints)."""
    n = system.ncells
    rank = int(np.linalg.matrix_rank(system.matrix)) if system.matrix.size else 0
    return n, min(rank, n - rank)


def _structural_nullspace(desired: DesiredSet) -> scipy.sparse.csr_matrix:
    """Exact sparse null-space basis when the family is one margin's powerset.

    Columns are the detailed cells of the maximal margin; each desired cell's
    row marks the detailed cells that sum into it.
    """
    top = desired.maximal()[0]
    d = top.ncells
    detail_ids = np.arange(d).reshape(top.shape)
    offsets = desired.offsets()
    rows, cols = [], []
    for margin in desired.ordered:
        kept = [top.members.index(name) for name in margin.members]
        dropped = [i for i in range(len(top)) if i not in kept]
        moved = np.transpose(detail_ids, kept + dropped).reshape(margin.ncells, -1)
        rows.append(np.repeat(offsets[margin] + np.arange(margin.ncells), moved.shape[1]))
        cols.append(moved.ravel())
    row_idx = np.concatenate(rows)
    col_idx = np.concatenate(cols)
    data = np.ones(row_idx.size)
    return scipy.sparse.csr_matrix(
        (data, (row_idx, col_idx)), shape=(desired.total_cells, d)
    )


def _nullspace(system: ConstraintSystem, cap: int):
    """Null-space basis of the constraints: structural when possible."""
    maximal = system.desired.maximal()
    if len(maximal) == 1:
        return _structural_nullspace(system.desired)
    n = system.ncells
    m = system.matrix.shape[0]
    _guard((m * n + n * n) * 8, cap, "null-space factorization")
    basis = scipy.linalg.null_space(system.matrix)
    if basis.shape[1] == 0:
        raise StructureError("constraints leave no degrees of freedom")
    return basis


def _diag_weights(sigma, n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 0:
        sigma = np.full(n, float(sigma))
    if sigma.shape != (n,):
        raise StructureError(f"diagonal covariance must have length {n}, got {sigma.shape}")
    if np.any(np.isnan(sigma)) or np.any(sigma <= 0.0):
        raise NumericError("covariance diagonal must be positive (infinite means unobserved)")
    return np.where(np.isinf(sigma), 0.0, 1.0 / sigma)


def _solver_bytes(n: int, d: int, structural: bool, with_covariance: bool) -> int:
    dense_gram = 3 * d * d * 8  # gram + eigenvectors + pseudo-inverse product
    basis_bytes = (2 * d * 20) if structural else (n * d * 8)
    cov_bytes = (n * n + n * d) * 8 if with_covariance else 0
    return dense_gram + basis_bytes + cov_bytes + 2 * n * 8


def blue_projection(
    noisy_vec: np.ndarray,
    sigma,
    system: ConstraintSystem,
    *,
    with_covariance: bool = True,
    mem_cap: int | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Minimum-variance consistent estimate of the desired-cell vector.

    ``noisy_vec`` holds observed values mapped into the desired-cell
    coordinate system; unobserved cells carry an infinite variance on the
    diagonal of ``sigma`` (weight zero) and an arbitrary value. ``sigma`` may
    be a scalar, a diagonal given as a vector, or a full positive-definite
    matrix (finite entries only). Returns the estimate and, unless disabled,
    its covariance.
    """
    cap = resolve_mem_cap(mem_cap)
    n = system.ncells
    x = np.asarray(noisy_vec, dtype=np.float64)
    if x.shape != (n,):
        raise StructureError(f"expected a vector of {n} desired cells, got shape {x.shape}")

    full_sigma = None
    if np.ndim(sigma) == 2:
        full_sigma = np.asarray(sigma, dtype=np.float64)
        if full_sigma.shape != (n, n):
            raise StructureError(f"covariance must be {n} x {n}, got {full_sigma.shape}")
        if not np.all(np.isfinite(full_sigma)):
            raise NumericError("full covariance must be finite; use a diagonal with inf instead")
        if not np.allclose(full_sigma, full_sigma.T, rtol=1e-10, atol=0.0):
            raise NumericError("covariance must be symmetric")
        try:
            chol = scipy.linalg.cho_factor(full_sigma)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError("covariance is not positive definite") from exc
        weights = scipy.linalg.cho_solve(chol, np.eye(n))
    else:
        weights = _diag_weights(sigma, n)

    basis = _nullspace(system, cap)
    structural = scipy.sparse.issparse(basis)
    d = basis.shape[1]
    _guard(_solver_bytes(n, d, structural, with_covariance), cap, "projection solve")

    if full_sigma is not None:
        weighted = weights @ (basis.toarray() if structural else basis)
        nb = basis.toarray() if structural else basis
        gram = nb.T @ weighted
        rhs = nb.T @ (weights @ x)
    elif structural:
        weighted = basis.multiply(weights[:, None]).tocsr()
        gram = (basis.T @ weighted).toarray()
        rhs = basis.T @ (weights * x)
    else:
        gram = basis.T @ (basis * weights[:, None])
        rhs = basis.T @ (weights * x)

    evals, evecs = scipy.linalg.eigh(gram)
    tol = float(np.max(evals, initial=0.0)) * d * np.finfo(np.float64).eps
    if np.sum(evals > tol) < d:
        raise StructureError(
            "the observed cells do not identify every desired cell; "
            "some degrees of freedom carry no weight"
        )
    coeffs = evecs @ ((evecs.T @ rhs) / evals)
    estimate = np.asarray(basis @ coeffs).ravel()

    covariance = None
    if with_covariance:
        pseudo = (evecs / evals) @ evecs.T
        half = np.asarray(basis @ pseudo)  # dense n x d
        covariance = np.asarray(basis @ half.T).T  # N pinv(gram) N^T
    return estimate, covariance


def affine_projection(
    values: np.ndarray,
    variances: np.ndarray,
    anchor: np.ndarray,
    basis: np.ndarray,
) -> np.ndarray:
    """Weighted projection onto an affine space: anchor plus a basis span.

    Minimizes the inverse-variance-weighted distance to ``values`` over
    ``anchor + basis @ z`` via a rank-tolerant least-squares solve. Used for
    the single-table fixed-margin projection when within-table variances are
    unequal.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    anchor = np.asarray(anchor, dtype=np.float64).ravel()
    variances = np.asarray(variances, dtype=np.float64).ravel()
    if np.any(variances <= 0.0) or not np.all(np.isfinite(variances)):
        raise NumericError("weighted projection needs positive finite variances")
    root_w = 1.0 / np.sqrt(variances)
    solution, *_ = scipy.linalg.lstsq(root_w[:, None] * basis, root_w * (values - anchor))
    return anchor + basis @ solution
