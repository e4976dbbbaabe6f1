"""Particular-solution selection from a null-space general solution.

Any kernel element keeps every training sample stationary for every output
unit; this module picks one that additionally drives class-matching outputs
toward 1 and the rest toward 0 (polarization).  Three termination conditions
are supported: ideal (outputs within eps of the 0/1 limits), weakened (correct
side of the 0.5 midpoint by a margin delta), and the softmax-style ratio
condition with tolerances alpha and beta.

The search strategy, since homogeneity makes signs scale-invariant, factors
the problem: seeded random draws of basis coefficients are hill-climbed on the
count of correctly signed output pre-activations, and only then is a scalar
scale applied to amplify margins.  Deep-stage (u < n) candidates are realized
as weight chains and always followed by a stage-n re-solve on refreshed
Jacobians before success is reported, which restores exact stationarity that
the monomial treatment of deeper layers cannot guarantee on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .calculus import batch_jacobians
from .linsys import (
    DEFAULT_RANK_TOL,
    VARIANT_AGGREGATE,
    HomogeneousSystem,
    MonomialIndex,
    NullSpaceBasis,
    rank_nullspace,
)
from .network import Dataset, NetSpec, WeightSet, forward_batch

LOWER_LIMIT = 0.0
UPPER_LIMIT = 1.0
MIDPOINT = 0.5

# A monomial tensor whose slices deviate from rank-1 structure by more than
# this (relative, after reproduction) cannot be split into a weight chain.
REALIZE_TOL = 1e-6


class InfeasibleRealization(ValueError):
    """Monomial vector is not consistent with any weight-chain factorization."""


@dataclass(frozen=True)
class TerminationMode:
    """Termination condition: ideal(eps), weakened(delta) or softmax(alpha, beta)."""

    kind: str
    epsilon: float = 1e-3
    delta: float = 0.05
    alpha: float = 0.1
    beta: float = 0.1

    @staticmethod
    def ideal(epsilon: float = 1e-3) -> "TerminationMode":
        if not 0.0 < epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        return TerminationMode(kind="ideal", epsilon=epsilon)

    @staticmethod
    def weakened(delta: float = 0.05) -> "TerminationMode":
        if not 0.0 <= delta < 0.5:
            raise ValueError("delta must lie in [0, 0.5)")
        return TerminationMode(kind="weakened", delta=delta)

    @staticmethod
    def softmax(alpha: float = 0.1, beta: float = 0.1) -> "TerminationMode":
        if not (0.0 < alpha < 1.0 and 0.0 < beta < 1.0):
            raise ValueError("alpha and beta must lie in (0, 1)")
        return TerminationMode(kind="softmax", alpha=alpha, beta=beta)

    def describe(self) -> str:
        if self.kind == "ideal":
            return f"ideal(eps={self.epsilon})"
        if self.kind == "weakened":
            return f"weakened(delta={self.delta})"
        return f"softmax(alpha={self.alpha}, beta={self.beta})"


@dataclass(frozen=True)
class SearchBudget:
    """Independent seeded draws, each refined by coordinate hill-climbing."""

    draws: int = 10_000
    climb_steps: int = 100


def margin_matrix(outputs: np.ndarray, essences: np.ndarray, mode: TerminationMode) -> np.ndarray:
    """Per-sample per-class signed margins; a constraint holds iff its margin
    clears zero (>= for ideal, > for the strict weakened/softmax forms)."""
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    essences = np.atleast_1d(np.asarray(essences, dtype=int))
    if np.any(outputs <= LOWER_LIMIT) or np.any(outputs >= UPPER_LIMIT):
        raise ValueError("outputs must lie strictly inside (0, 1)")
    if np.any(essences < 1) or np.any(essences > outputs.shape[1]):
        raise ValueError("essence label out of range")
    rows = np.arange(outputs.shape[0])
    lab = essences - 1
    if mode.kind == "ideal":
        target = np.zeros_like(outputs)
        target[rows, lab] = UPPER_LIMIT
        return mode.epsilon - np.abs(outputs - target)
    if mode.kind == "weakened":
        m = (MIDPOINT - mode.delta) - outputs
        m[rows, lab] = outputs[rows, lab] - (MIDPOINT + mode.delta)
        return m
    ratios = outputs / outputs.sum(axis=1, keepdims=True)
    m = mode.beta - ratios
    m[rows, lab] = mode.alpha - (1.0 - ratios[rows, lab])
    return m


def _passes(margins: np.ndarray, mode: TerminationMode) -> np.ndarray:
    per_sample = margins.min(axis=1)
    return per_sample >= 0.0 if mode.kind == "ideal" else per_sample > 0.0


def check_condition(outputs, label: int, mode: TerminationMode):
    """Check one sample's output vector; returns (passed, binding margin)."""
    margins = margin_matrix(outputs, np.array([label]), mode)
    margin = float(margins.min())
    passed = margin >= 0.0 if mode.kind == "ideal" else margin > 0.0
    return passed, margin


@dataclass
class ParticularSolution:
    """A realized, condition-checked member of the general solution.

    ``tail`` holds the realized weight matrices for layers u..n (ascending,
    scale already applied); margins and outputs always come from a fresh
    forward pass over the full weight set.
    """

    stage: int
    variant: str
    coefficients: np.ndarray
    scale: float
    tail: list
    monomials: np.ndarray
    outputs: np.ndarray
    margins: np.ndarray            # (phi, l_n) per-class margins
    sample_margins: np.ndarray     # (phi,) binding margin per sample
    feasible: bool
    mode: TerminationMode
    realization_residual: float
    system_residual: float
    stationarity_residuals: np.ndarray  # (phi,) max |dh_v/dx_t| per sample

    @property
    def min_margin(self) -> float:
        return float(self.sample_margins.min())


# ---------------------------------------------------------------------------
# realization: monomial vectors -> weight chains


def _aggregate_chain(s: np.ndarray, widths) -> list:
    """Exact block factorization of the aggregate matrix through the chain."""
    top, bottom = widths[0], widths[-1]
    r = min(top, bottom)
    if any(w < r for w in widths[1:-1]):
        raise InfeasibleRealization(
            f"interior widths {widths[1:-1]} below min end dimension {r}"
        )
    if bottom <= top:
        b, c = s, np.eye(bottom)
    else:
        b, c = np.eye(top), s
    mats = []
    w = np.zeros((widths[0], widths[1]))
    w[:, :r] = b
    mats.append(w)
    for i in range(1, len(widths) - 2):
        w = np.zeros((widths[i], widths[i + 1]))
        w[:r, :r] = np.eye(r)
        mats.append(w)
    if len(widths) > 2:
        w = np.zeros((widths[-2], widths[-1]))
        w[:r, :] = c
        mats.append(w)
    return mats[::-1]  # ascending W[u]..W[n]


def _peel_chain(tensor: np.ndarray) -> list:
    """Split a per-path product tensor into its weight chain, slice by slice.

    For each node index k of the leading interior axis the slice must be (near)
    rank-1: an outer product of the column above and the remainder below.  The
    per-node scale split is fixed by balancing the singular value, the one
    freedom a product of two factors cannot determine.
    """
    mats = []
    t = tensor
    while t.ndim > 2:
        top, width, rest = t.shape[0], t.shape[1], t.shape[2:]
        w_top = np.zeros((top, width))
        rem = np.zeros((width,) + rest)
        for k in range(width):
            slab = t[:, k].reshape(top, -1)
            if not slab.any():
                continue
            u_, s_, vt_ = np.linalg.svd(slab, full_matrices=False)
            scale = np.sqrt(s_[0])
            sign = np.sign(u_[np.argmax(np.abs(u_[:, 0])), 0]) or 1.0
            w_top[:, k] = u_[:, 0] * scale * sign
            rem[k] = (vt_[0] * scale * sign).reshape(rest)
        mats.append(w_top)
        t = rem
    mats.append(np.array(t))
    return mats[::-1]


def _realize(monomials: np.ndarray, index: MonomialIndex):
    q = np.asarray(monomials, dtype=float).reshape(-1)
    if q.shape[0] != index.n_columns:
        raise ValueError(f"expected {index.n_columns} monomials, got {q.shape[0]}")
    widths = index.layer_widths
    if len(widths) == 2:
        return [q.reshape(widths)], 0.0
    if index.variant == VARIANT_AGGREGATE:
        tail = _aggregate_chain(q.reshape(widths[0], widths[-1]), widths)
    else:
        tail = _peel_chain(q.reshape((widths[0],) + index.block_shape))
    back = index.expand(tail)
    denom = max(float(np.max(np.abs(q))), 1e-30)
    residual = float(np.max(np.abs(back - q))) / denom
    return tail, residual


def realize_weights(monomials, index: MonomialIndex, spec: NetSpec = None):
    """Factor a monomial solution into actual layer matrices W[u]..W[n].

    Returns (chain, residual).  Aggregate solutions factor exactly whenever the
    interior widths admit it; per-path solutions must be rank-1-consistent and
    raise InfeasibleRealization beyond the tolerance.
    """
    if spec is not None:
        want = tuple(spec.size(j) for j in range(spec.depth, index.stage - 2, -1))
        if want != index.layer_widths:
            raise ValueError("index widths do not match spec")
    tail, residual = _realize(monomials, index)
    if residual > REALIZE_TOL:
        raise InfeasibleRealization(
            f"monomial tensor deviates from factorable structure by {residual:.3e}"
        )
    return tail, residual


def apply_scale_splits(tail, log_scales) -> list:
    """Rescale interior nodes (row up, column down) without changing monomials."""
    mats = [np.array(w) for w in tail]
    log_scales = np.asarray(log_scales, dtype=float).reshape(-1)
    pos = 0
    for b in range(len(mats) - 1):
        width = mats[b].shape[0]
        g = np.exp(np.clip(log_scales[pos : pos + width], -20, 20))
        pos += width
        mats[b] = mats[b] * g[:, None]
        mats[b + 1] = mats[b + 1] / g[None, :]
    if pos != log_scales.shape[0]:
        raise ValueError("scale-split vector does not match interior widths")
    return mats


# ---------------------------------------------------------------------------
# sign-feasibility search


def _sign_score(p: np.ndarray, c: np.ndarray, tsign: np.ndarray):
    s = tsign * (p @ c)
    return int(np.sum(s > 0.0)), float(np.min(s))


def _climb(p, c, tsign, steps):
    score = _sign_score(p, c, tsign)
    n = p.shape[0]
    step = 1.0
    stale = 0
    for it in range(steps):
        if score[0] == n or step < 1e-4:
            break
        j = it % c.shape[0]
        improved = False
        for delta in (step, -step):
            cand = c.copy()
            cand[j] += delta
            cscore = _sign_score(p, cand, tsign)
            if cscore > score:
                c, score = cand, cscore
                improved = True
                break
        if improved:
            stale = 0
        else:
            stale += 1
            if stale >= c.shape[0]:
                step *= 0.5
                stale = 0
    return c, score


def _sign_search(p, tsign, budget: SearchBudget, rng):
    """Best coefficient vector for sign pattern tsign on pre-activations p @ c."""
    n, k = p.shape
    best_c, best = None, (-1, -np.inf)
    for _ in range(max(budget.draws, 1)):
        c = rng.standard_normal(k)
        c, score = _climb(p, c, tsign, budget.climb_steps)
        if score > best:
            best_c, best = c, score
        if best[0] == n:
            break
    return best_c, best[0], best[1]


# ---------------------------------------------------------------------------
# solution assembly and scale search


def _evaluate_tail(tail, base_weights, spec, dataset, mode):
    weights = base_weights.replace_tail(tail)
    xs = dataset.surfaces()
    acts, _ = forward_batch(spec, weights, xs)
    outputs = acts[-1]
    margins = margin_matrix(outputs, dataset.essences(), mode)
    jac_out = batch_jacobians(spec, weights, xs)[-1]
    residuals = np.max(np.abs(jac_out), axis=(1, 2))
    return weights, outputs, margins, residuals


def _finalize(stage, variant, coefficients, tail, index, system_matrix,
              dataset, spec, base_weights, mode, realization_residual):
    monomials = index.expand(tail)
    system_residual = (
        float(np.max(np.abs(system_matrix @ monomials))) if system_matrix is not None else 0.0
    )
    _, outputs, margins, residuals = _evaluate_tail(tail, base_weights, spec, dataset, mode)
    sample_margins = margins.min(axis=1)
    feasible = bool(np.all(_passes(margins, mode)))
    return ParticularSolution(
        stage=stage,
        variant=variant,
        coefficients=np.asarray(coefficients, dtype=float),
        scale=1.0,
        tail=[np.array(w) for w in tail],
        monomials=monomials,
        outputs=outputs,
        margins=margins,
        sample_margins=sample_margins,
        feasible=feasible,
        mode=mode,
        realization_residual=realization_residual,
        system_residual=system_residual,
        stationarity_residuals=residuals,
    )


def scale_search(solution: ParticularSolution, dataset: Dataset, spec: NetSpec,
                 base_weights: WeightSet, mode: TerminationMode = None,
                 max_exponent: int = 20) -> ParticularSolution:
    """Pick the top-layer scale maximizing the minimum margin.

    The homogeneous system is closed under scaling, so stationarity is
    preserved for every scale in the doubling sweep {2^0 .. 2^max_exponent};
    the smallest scale achieving the best margin wins.
    """
    mode = mode or solution.mode
    top = solution.tail[-1] / solution.scale
    xs = dataset.surfaces()
    essences = dataset.essences()
    best_lam, best_margin = None, -np.inf
    for e in range(max_exponent + 1):
        lam = float(2.0**e)
        tail = solution.tail[:-1] + [top * lam]
        _, outputs, margins, _ = _evaluate_tail(tail, base_weights, spec, dataset, mode)
        worst = float(margins.min())
        if worst > best_margin:
            best_lam, best_margin = lam, worst
    tail = solution.tail[:-1] + [top * best_lam]
    weights, outputs, margins, residuals = _evaluate_tail(tail, base_weights, spec, dataset, mode)
    sample_margins = margins.min(axis=1)
    # every monomial contains exactly one top-layer factor, so all scale by lam
    return replace(
        solution,
        scale=best_lam,
        tail=[np.array(w) for w in tail],
        monomials=solution.monomials * (best_lam / solution.scale),
        outputs=outputs,
        margins=margins,
        sample_margins=sample_margins,
        feasible=bool(np.all(_passes(margins, mode))),
        stationarity_residuals=residuals,
    )


def _stage_n_block_matrix(spec: NetSpec, weights: WeightSet, xs: np.ndarray) -> np.ndarray:
    """Stacked layer-(n-1) Jacobian transposes, rows ordered (sample, coordinate)."""
    n_pts, m = xs.shape
    if spec.depth == 1:
        jac = np.broadcast_to(np.eye(m), (n_pts, m, m))
    else:
        jac = batch_jacobians(spec, weights, xs)[spec.depth - 2]
    return jac.transpose(0, 2, 1).reshape(n_pts * m, -1)


def _stage_n_rows(spec, base_weights, xs, essences, basis, budget, rng):
    """Per-class sign searches on the shared kernel; returns (W[n], coeffs, #correct)."""
    acts, _ = forward_batch(spec, base_weights, xs)
    hidden = acts[spec.depth - 1]
    p = hidden @ basis.vectors
    rows, coeffs, total = [], [], 0
    for v in range(1, spec.n_classes + 1):
        tsign = np.where(essences == v, 1.0, -1.0)
        c, ncorr, _ = _sign_search(p, tsign, budget, rng)
        norm = np.linalg.norm(c)
        if norm > 0:
            c = c / norm
        rows.append(basis.vectors @ c)
        coeffs.append(c)
        total += ncorr
    return np.array(rows), np.array(coeffs), total


def polarize(system: HomogeneousSystem, basis: NullSpaceBasis, dataset: Dataset,
             spec: NetSpec, base_weights: WeightSet, mode: TerminationMode,
             budget: SearchBudget = None, seed: int = 0,
             repair_budget: SearchBudget = None,
             rank_tol: float = DEFAULT_RANK_TOL):
    """Search the general solution for a particular solution meeting ``mode``.

    Returns a feasible ParticularSolution or None when the budget is exhausted
    (or the kernel is trivial, in which case only the all-zero solution
    exists).  Identical seed and budget give identical outcomes.
    """
    budget = budget or SearchBudget()
    if basis.nullity == 0:
        return None
    rng = np.random.default_rng(seed)
    if system.stage == spec.depth:
        return _polarize_stage_n(system, basis, dataset, spec, base_weights,
                                 mode, budget, rng)
    return _polarize_deep(system, basis, dataset, spec, base_weights, mode,
                          budget, rng, repair_budget or SearchBudget(16, 32),
                          rank_tol)


def _polarize_stage_n(system, basis, dataset, spec, base_weights, mode, budget, rng):
    xs = dataset.surfaces()
    essences = dataset.essences()
    w_n, coeffs, total = _stage_n_rows(spec, base_weights, xs, essences, basis,
                                       budget, rng)
    if total < dataset.size * spec.n_classes:
        return None
    sol = _finalize(system.stage, system.variant, coeffs, [w_n], system.index,
                    system.matrix, dataset, spec, base_weights, mode, 0.0)
    sol = scale_search(sol, dataset, spec, base_weights, mode)
    return sol if sol.feasible else None


def _polarize_deep(system, basis, dataset, spec, base_weights, mode, budget,
                   rng, repair_budget, rank_tol):
    index = system.index
    widths = index.layer_widths
    if index.variant == VARIANT_AGGREGATE and any(
        w < min(widths[0], widths[-1]) for w in widths[1:-1]
    ):
        return None  # no aggregate matrix factors through these interiors
    l_n = spec.n_classes
    k = basis.nullity
    n_theta = l_n * k
    n_splits = int(sum(widths[1:-1]))
    xs = dataset.surfaces()
    essences = dataset.essences()
    goal = dataset.size * l_n

    def evaluate(vec):
        """Realize, repair, and score one coefficient/split vector."""
        theta = vec[:n_theta].reshape(l_n, k)
        q = (theta @ basis.vectors.T).ravel()
        tail, rres = _realize(q, index)
        if n_splits:
            tail = apply_scale_splits(tail, vec[n_theta:])
        cand = base_weights.replace_tail(tail)
        block = _stage_n_block_matrix(spec, cand, xs)
        kernel = rank_nullspace(block, rank_tol)
        if kernel.nullity == 0:
            return None, (-1, -np.inf)
        w_n, _, ncorr = _stage_n_rows(spec, cand, xs, essences, kernel,
                                      repair_budget, rng)
        repaired = tail[:-1] + [w_n]
        if ncorr < goal:
            return None, (ncorr, -np.inf)
        sol = _finalize(system.stage, system.variant, theta, repaired, index,
                        system.matrix, dataset, spec, base_weights, mode, rres)
        sol = scale_search(sol, dataset, spec, base_weights, mode)
        return (sol if sol.feasible else None), (ncorr, sol.min_margin)

    dim = n_theta + n_splits
    for _ in range(max(budget.draws, 1)):
        vec = rng.standard_normal(dim)
        if n_splits:
            vec[n_theta:] *= 0.5
        sol, score = evaluate(vec)
        if sol is not None:
            return sol
        step = 0.5
        stale = 0
        for it in range(budget.climb_steps):
            if step < 1e-3:
                break
            j = it % dim
            moved = False
            for delta in (step, -step):
                cand_vec = vec.copy()
                cand_vec[j] += delta
                cand_sol, cand_score = evaluate(cand_vec)
                if cand_sol is not None:
                    return cand_sol
                if cand_score > score:
                    vec, score = cand_vec, cand_score
                    moved = True
                    break
            if moved:
                stale = 0
            else:
                stale += 1
                if stale >= dim:
                    step *= 0.5
                    stale = 0
    return None
