"""Homogeneous stationarity systems for any stage, with rank/null-space solves.

Setting every input-derivative of an output unit to zero at every training
sample yields a homogeneous linear system.  At stage n the unknowns are the
output-layer weights themselves.  At stage u < n the unknowns are products of
weights along connectivity paths from an output unit down to layer u, treated
as single monomial variables.  Two assembly variants exist for u < n:

* ``aggregate``   - interior derivative factors are dropped, so the coefficient
                    of a path depends only on its endpoints and the columns
                    collapse to one aggregate unknown per (class, entry) pair.
* ``c-corrected`` - interior factors c = h*(1-h), evaluated at the current
                    weights, are kept as fixed per-path coefficients, keeping
                    the stationarity condition exact at the evaluation point.

The variants coincide at stage n.  Both are first class and every report
records which one produced it, because they genuinely disagree for u < n and
the gap is worth measuring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Dataset, NetSpec

VARIANT_AGGREGATE = "aggregate"
VARIANT_C_CORRECTED = "c-corrected"
VARIANTS = (VARIANT_AGGREGATE, VARIANT_C_CORRECTED)

DEFAULT_RANK_TOL = 1e-10


@dataclass(frozen=True)
class MonomialIndex:
    """Bijection between system columns and weight monomials.

    ``layer_widths`` runs (l_n, l_{n-1}, ..., l_{u-1}) along the path from the
    output layer down to the inputs of stage u.  Columns are ordered with the
    class index slowest, then path indices lexicographically, which is exactly
    the C-order flattening of the monomial tensor.
    """

    stage: int
    layer_widths: tuple
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def n_classes(self) -> int:
        return self.layer_widths[0]

    @property
    def block_shape(self) -> tuple:
        """Monomial tensor axes for one class."""
        if self.variant == VARIANT_AGGREGATE:
            return (self.layer_widths[-1],)
        return tuple(self.layer_widths[1:])

    @property
    def block_columns(self) -> int:
        return int(np.prod(self.block_shape))

    @property
    def n_columns(self) -> int:
        return self.n_classes * self.block_columns

    def column_monomial(self, j: int) -> tuple:
        """Factor chain of column j as 1-based indices (v, k_{n-1}, ..)."""
        if not 0 <= j < self.n_columns:
            raise ValueError(f"column {j} out of range")
        v, rest = divmod(j, self.block_columns)
        path = np.unravel_index(rest, self.block_shape)
        return (v + 1,) + tuple(int(p) + 1 for p in path)

    def expand(self, tail) -> np.ndarray:
        """Monomial vector of a realized weight chain (ascending W[u]..W[n]).

        Aggregate columns get the matrix product of the chain; c-corrected
        columns get per-path products with no summation over interior indices.
        """
        mats = [np.asarray(w, dtype=float) for w in tail]
        want = list(zip(self.layer_widths[:-1], self.layer_widths[1:]))
        got = [w.shape for w in reversed(mats)]
        if got != [tuple(s) for s in want]:
            raise ValueError(f"chain shapes {got} do not match index {want}")
        if self.variant == VARIANT_AGGREGATE:
            s = mats[-1]
            for w in reversed(mats[:-1]):
                s = s @ w
            return s.ravel()
        t = mats[-1]
        for w in reversed(mats[:-1]):
            t = t[..., :, None] * w
        return t.ravel()


@dataclass
class NullSpaceBasis:
    """Numerical kernel of a coefficient matrix: rank, orthonormal basis, residual."""

    rank: int
    tolerance: float
    vectors: np.ndarray  # shape (columns, nullity), orthonormal columns
    residual: float      # max ||A b||_inf over basis vectors, on the undeduplicated A

    @property
    def nullity(self) -> int:
        return self.vectors.shape[1]


@dataclass
class HomogeneousSystem:
    """Assembled stationarity system for one stage over a dataset.

    The full matrix is block-diagonal over the class index and every class
    block is identical (coefficients never depend on the class), so ``block``
    is stored once and solved once.  Row provenance uses 1-based (sample,
    class, coordinate) triples in the row order (i, v, t), sample-major.
    """

    stage: int
    variant: str
    matrix: np.ndarray
    block: np.ndarray
    index: MonomialIndex
    row_meta: list
    block_row_meta: list

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def nullspace(self, tol: float = DEFAULT_RANK_TOL) -> NullSpaceBasis:
        """Kernel of the shared class block."""
        return rank_nullspace(self.block, tol)

    def full_nullity(self, tol: float = DEFAULT_RANK_TOL) -> int:
        """Nullity of the whole stacked system (classes included)."""
        return self.index.n_classes * self.nullspace(tol).nullity


def _stage_block(u, dataset, traces, jacobians, spec, variant):
    """Shared per-class coefficient block, rows ordered (sample, coordinate)."""
    m = spec.input_dim
    rows = []
    meta = []
    for i, _ in enumerate(dataset.samples):
        jac_in = jacobians[i].layer(u - 1)  # (l_{u-1}, m)
        if variant == VARIANT_C_CORRECTED and u < spec.depth:
            interior = np.ones(1)
            for layer in range(spec.depth - 1, u - 1, -1):
                interior = np.multiply.outer(interior, traces[i].deriv[layer - 1]).ravel()
            for t in range(m):
                rows.append(np.outer(interior, jac_in[:, t]).ravel())
                meta.append((i + 1, t + 1))
        else:
            for t in range(m):
                rows.append(jac_in[:, t].copy())
                meta.append((i + 1, t + 1))
    return np.array(rows), meta


def _assemble(u, dataset, traces, jacobians, spec, variant) -> HomogeneousSystem:
    if dataset.size == 0:
        raise ValueError("empty dataset")
    if not 1 <= u <= spec.depth:
        raise ValueError(f"stage {u} out of range [1, {spec.depth}]")
    if len(traces) != dataset.size or len(jacobians) != dataset.size:
        raise ValueError("traces/jacobians must align with the dataset")
    widths = tuple(spec.size(j) for j in range(spec.depth, u - 2, -1))
    index = MonomialIndex(stage=u, layer_widths=widths, variant=variant)
    block, block_meta = _stage_block(u, dataset, traces, jacobians, spec, variant)

    n_cls = spec.n_classes
    bc = index.block_columns
    m = spec.input_dim
    full = np.zeros((dataset.size * n_cls * m, n_cls * bc))
    row_meta = []
    r = 0
    for i in range(dataset.size):
        for v in range(n_cls):
            for t in range(m):
                full[r, v * bc : (v + 1) * bc] = block[i * m + t]
                row_meta.append((i + 1, v + 1, t + 1))
                r += 1
    return HomogeneousSystem(
        stage=u,
        variant=variant,
        matrix=full,
        block=block,
        index=index,
        row_meta=row_meta,
        block_row_meta=block_meta,
    )


def assemble_stage_n(dataset: Dataset, traces, jacobians, spec: NetSpec) -> HomogeneousSystem:
    """Output-stage system: rows encode sum_k w_{v,k} * dh_k^[n-1]/dx_t = 0.

    The strictly positive outer factor c_v^[n] is divided out of every row.
    Both assembly variants coincide here (there are no interior factors).
    """
    return _assemble(spec.depth, dataset, traces, jacobians, spec, VARIANT_C_CORRECTED)


def assemble_stage_u(u: int, dataset: Dataset, traces, jacobians, spec: NetSpec,
                     variant: str = VARIANT_C_CORRECTED) -> HomogeneousSystem:
    """Deep-stage system in path-monomial unknowns; see module doc for variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not 1 <= u <= spec.depth - 1:
        raise ValueError(f"stage {u} out of range [1, {spec.depth - 1}]")
    return _assemble(u, dataset, traces, jacobians, spec, variant)


def dedup_rows(a: np.ndarray) -> np.ndarray:
    """Drop exactly duplicated rows, keeping first occurrences in order."""
    if a.shape[0] == 0:
        return a
    _, first = np.unique(a, axis=0, return_index=True)
    return a[np.sort(first)]


def rank_nullspace(a: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> NullSpaceBasis:
    """Numerical rank and orthonormal kernel basis via SVD.

    Rank counts singular values above tol * sigma_max.  Exactly duplicated
    rows are collapsed before factorization; the recorded residual is checked
    against the original matrix.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        raise ValueError("matrix must be non-empty")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    reduced = dedup_rows(a)
    _, sigma, vt = np.linalg.svd(reduced, full_matrices=True)
    if sigma.size and sigma[0] > 0:
        rank = int(np.sum(sigma > tol * sigma[0]))
    else:
        rank = 0
    basis = vt[rank:].T
    residual = float(np.max(np.abs(a @ basis))) if basis.shape[1] else 0.0
    return NullSpaceBasis(rank=rank, tolerance=tol, vectors=basis, residual=residual)


def general_solution_sample(basis: NullSpaceBasis, coeffs) -> np.ndarray:
    """Linear combination of kernel basis vectors; stays a system solution."""
    coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
    if coeffs.shape[0] != basis.nullity:
        raise ValueError(
            f"expected {basis.nullity} coefficients, got {coeffs.shape[0]}"
        )
    if basis.nullity == 0:
        return np.zeros(basis.vectors.shape[0])
    return basis.vectors @ coeffs
