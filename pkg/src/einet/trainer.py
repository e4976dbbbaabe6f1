"""Staged extremum-increment fitting and the probes built on top of it.

Fitting walks stages from the output layer downward: assemble the stationarity
system for stage u, take its null space, and search it for a polarized
particular solution.  The first success updates exactly layers u..n and stops;
exhausting every stage down to the floor is an error (grow the network).  The
probes are read-only checks over a finished fit: layer freezing, capacity
curves, stationary-point verification and census, noise sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .calculus import batch_jacobians, input_hessian, input_jacobians
from .linsys import (
    DEFAULT_RANK_TOL,
    VARIANT_C_CORRECTED,
    VARIANTS,
    assemble_stage_n,
    assemble_stage_u,
    rank_nullspace,
)
from .network import Dataset, NetSpec, Sample, WeightSet, forward, forward_batch
from .polarize import (
    ParticularSolution,
    SearchBudget,
    TerminationMode,
    check_condition,
    polarize,
)

HESSIAN_EIG_TOL = 1e-6
DEFAULT_HESSIAN_STEP = 1e-4
CENSUS_GRAD_TOL = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: TerminationMode = field(default_factory=TerminationMode.weakened)
    stage_floor: int = 1
    variant: str = VARIANT_C_CORRECTED
    budget: SearchBudget = field(default_factory=SearchBudget)
    repair_budget: SearchBudget = SearchBudget(draws=16, climb_steps=32)
    seed: int = 0
    rank_tol: float = DEFAULT_RANK_TOL

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.stage_floor < 1:
            raise ValueError("stage floor must be >= 1")


@dataclass
class TrainReport:
    """Outcome of one training run, EI or baseline, in a single schema."""

    outcome: str                 # "success" | "error-exhausted" | "diverged"
    stage: int | None            # stage u* that succeeded (None for baseline)
    nullity_history: list        # [(stage, full-system nullity), ...]
    updated_layers: list         # 1-based layer indices that were rewritten
    sample_margins: list         # binding margin per sample, fresh forward
    outputs: list                # (phi, l_n) fresh output values
    stationarity_residuals: list # per sample max |dh_v/dx_t|
    mode: str
    variant: str
    seed: int
    weights: WeightSet
    solution: ParticularSolution | None = None
    probes: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.outcome == "success"


@dataclass
class StationaryPointReport:
    location: np.ndarray
    class_index: int
    gradient_residual: float
    hessian_eigenvalues: np.ndarray
    classification: str          # local-max | local-min | saddle | degenerate
    occupancy: int | None = None # 1-based index of a training sample within gamma


def _evaluate_weights(spec, weights, dataset, mode):
    xs = dataset.surfaces()
    acts, _ = forward_batch(spec, weights, xs)
    outputs = acts[-1]
    margins = []
    for i, s in enumerate(dataset.samples):
        _, margin = check_condition(outputs[i], s.essence, mode)
        margins.append(margin)
    jac_out = batch_jacobians(spec, weights, xs)[-1]
    residuals = np.max(np.abs(jac_out), axis=(1, 2))
    return outputs, np.array(margins), residuals


def fit(dataset: Dataset, spec: NetSpec, weights: WeightSet, config: TrainConfig = None) -> TrainReport:
    """Descending-stage fitting loop.

    For u = n down to the stage floor: assemble the stage system under the
    initial weights, solve its general solution, and polarize.  The first
    feasible particular solution updates exactly W[u..n]; everything below
    keeps its initial values bitwise.  Exhaustion of all stages reports an
    error so the caller can grow the architecture.
    """
    config = config or TrainConfig()
    if dataset.size == 0:
        raise ValueError("empty dataset")
    dataset.validate(spec)
    weights.check_shapes(spec)

    traces = [forward(spec, weights, s.surface) for s in dataset.samples]
    jacobians = [input_jacobians(spec, weights, t) for t in traces]
    nullity_history = []
    for u in range(spec.depth, config.stage_floor - 1, -1):
        if u == spec.depth:
            system = assemble_stage_n(dataset, traces, jacobians, spec)
        else:
            system = assemble_stage_u(u, dataset, traces, jacobians, spec, config.variant)
        basis = system.nullspace(config.rank_tol)
        nullity_history.append((u, spec.n_classes * basis.nullity))
        if basis.nullity == 0:
            continue
        solution = polarize(
            system, basis, dataset, spec, weights, config.mode,
            budget=config.budget, seed=config.seed,
            repair_budget=config.repair_budget, rank_tol=config.rank_tol,
        )
        if solution is None:
            continue
        final = weights.replace_tail(solution.tail)
        outputs, margins, residuals = _evaluate_weights(spec, final, dataset, config.mode)
        return TrainReport(
            outcome="success",
            stage=u,
            nullity_history=nullity_history,
            updated_layers=list(range(u, spec.depth + 1)),
            sample_margins=margins.tolist(),
            outputs=outputs.tolist(),
            stationarity_residuals=residuals.tolist(),
            mode=config.mode.describe(),
            variant=config.variant,
            seed=config.seed,
            weights=final,
            solution=solution,
        )
    outputs, margins, residuals = _evaluate_weights(spec, weights, dataset, config.mode)
    return TrainReport(
        outcome="error-exhausted",
        stage=None,
        nullity_history=nullity_history,
        updated_layers=[],
        sample_margins=margins.tolist(),
        outputs=outputs.tolist(),
        stationarity_residuals=residuals.tolist(),
        mode=config.mode.describe(),
        variant=config.variant,
        seed=config.seed,
        weights=weights,
        solution=None,
    )


def vanishing_probe(report: TrainReport, initial: WeightSet, final: WeightSet) -> bool:
    """True iff every layer below the success stage kept its initial bits."""
    if not report.succeeded:
        raise ValueError("vanishing probe needs a successful report")
    for u in range(1, report.stage):
        a, b = initial.layer(u), final.layer(u)
        if a.shape != b.shape or a.tobytes() != b.tobytes():
            return False
    return True


@dataclass
class CapacityCurve:
    nullities: list              # full-system nullity of the stage-n system at k = 1..
    saturation_at: int | None    # first k with nullity 0, None if never reached

    def as_rows(self):
        return list(enumerate(self.nullities, start=1))


def capacity_probe(spec: NetSpec, weights: WeightSet, sample_stream, max_count: int,
                   rank_tol: float = DEFAULT_RANK_TOL) -> CapacityCurve:
    """Nullity of the output-stage system as samples accumulate.

    The curve is non-increasing; where it hits zero the net is out of spare
    solution space at stage n, the moment usually blamed on overfitting.
    """
    samples = []
    nullities = []
    saturation = None
    for k, sample in enumerate(sample_stream, start=1):
        if k > max_count:
            break
        samples.append(sample)
        ds = Dataset(samples)
        traces = [forward(spec, weights, s.surface) for s in ds.samples]
        jacobians = [input_jacobians(spec, weights, t) for t in traces]
        system = assemble_stage_n(ds, traces, jacobians, spec)
        nullity = system.full_nullity(rank_tol)
        nullities.append(nullity)
        if saturation is None and nullity == 0:
            saturation = k
    return CapacityCurve(nullities=nullities, saturation_at=saturation)


def size_rule(m: int, phi: int, n_classes: int) -> int:
    """Smallest single-hidden-layer width whose parameter count m*l1 + l1*l_n
    strictly exceeds phi * m * l_n."""
    if m < 1 or phi < 1 or n_classes < 1:
        raise ValueError("all sizing inputs must be >= 1")
    return (phi * m * n_classes) // (m + n_classes) + 1


def classify_hessian(eigenvalues: np.ndarray, tol: float = HESSIAN_EIG_TOL) -> str:
    if np.all(eigenvalues < -tol):
        return "local-max"
    if np.all(eigenvalues > tol):
        return "local-min"
    if np.any(eigenvalues > tol) and np.any(eigenvalues < -tol):
        return "saddle"
    return "degenerate"


def verify_extremum(spec: NetSpec, weights: WeightSet, x, v: int,
                    hessian_step: float = DEFAULT_HESSIAN_STEP,
                    eig_tol: float = HESSIAN_EIG_TOL) -> StationaryPointReport:
    """Gradient residual (analytic) and Hessian class of output unit v at x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    trace = forward(spec, weights, x)
    jac = input_jacobians(spec, weights, trace).output
    residual = float(np.max(np.abs(jac[v - 1])))
    hess = input_hessian(spec, weights, v, x, step=hessian_step)
    eigs = np.linalg.eigvalsh(hess)
    return StationaryPointReport(
        location=x,
        class_index=v,
        gradient_residual=residual,
        hessian_eigenvalues=eigs,
        classification=classify_hessian(eigs, eig_tol),
    )


def _refine_1d(spec, weights, v, lo, hi, grad_fn, iters=80):
    """Sign-change bisection on the scalar gradient."""
    glo, ghi = grad_fn(lo), grad_fn(hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        gm = grad_fn(mid)
        if abs(gm) <= CENSUS_GRAD_TOL:
            return mid
        if (glo < 0) != (gm < 0):
            hi, ghi = mid, gm
        else:
            lo, glo = mid, gm
    return 0.5 * (lo + hi)


def _refine_nd(grad_fn, center, half, iters=60):
    """Shrinking 3^m stencil descent on the gradient max-norm."""
    center = np.array(center, dtype=float)
    half = np.array(half, dtype=float)
    best = float(np.max(np.abs(grad_fn(center))))
    for _ in range(iters):
        if best <= CENSUS_GRAD_TOL:
            break
        moved = False
        for offs in product((-1.0, 0.0, 1.0), repeat=center.shape[0]):
            cand = center + half * np.array(offs)
            val = float(np.max(np.abs(grad_fn(cand))))
            if val < best:
                center, best, moved = cand, val, True
        half *= 0.5
        if np.max(half) < 1e-14 and not moved:
            break
    return center, best


def extrema_census(spec: NetSpec, weights: WeightSet, v: int, box, resolution: int,
                   dataset: Dataset = None, gamma: float = None,
                   hessian_step: float = DEFAULT_HESSIAN_STEP) -> list:
    """Grid scan for stationary points of output unit v inside a box.

    ``box`` is a list of (lo, hi) per input coordinate (m <= 3).  Cells where
    every gradient component strictly changes sign are refined; so are grid
    points whose gradient norm is an isolated dip below tolerance.  Refined
    points are classified via the Hessian; if a dataset is supplied, each
    point records the nearest training sample within gamma (occupancy).  The
    census reports unoccupied stationary points too; it never asserts they
    should not exist.
    """
    m = spec.input_dim
    if m > 3:
        raise ValueError("census limited to m <= 3 inputs")
    box = [(float(lo), float(hi)) for lo, hi in box]
    if len(box) != m:
        raise ValueError(f"box must have {m} coordinate ranges")
    if resolution < 4:
        raise ValueError("resolution too coarse: need at least 3 cells per axis")

    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    grads = batch_jacobians(spec, weights, points)[-1][:, v - 1, :]
    grid_shape = tuple(resolution for _ in range(m))
    grad_grid = grads.reshape(grid_shape + (m,))

    def grad_at(x):
        return batch_jacobians(spec, weights, np.atleast_2d(x))[-1][0, v - 1, :]

    candidates = []
    for cell in product(*(range(resolution - 1) for _ in range(m))):
        corners = np.array(list(product(*((c, c + 1) for c in cell))))
        vals = np.array([grad_grid[tuple(idx)] for idx in corners])
        if np.all(vals.min(axis=0) < 0.0) and np.all(vals.max(axis=0) > 0.0):
            lo = np.array([axes[d][cell[d]] for d in range(m)])
            hi = np.array([axes[d][cell[d] + 1] for d in range(m)])
            candidates.append((lo, hi))

    # isolated norm dips: strict local minima of the gridded gradient norm
    norm_grid = np.max(np.abs(grad_grid), axis=-1)
    it = np.ndindex(grid_shape)
    for idx in it:
        val = norm_grid[idx]
        if val > CENSUS_GRAD_TOL:
            continue
        strict = True
        for d in range(m):
            for off in (-1, 1):
                j = idx[d] + off
                if 0 <= j < resolution:
                    nidx = list(idx)
                    nidx[d] = j
                    if norm_grid[tuple(nidx)] <= val:
                        strict = False
        if strict:
            pt = np.array([axes[d][idx[d]] for d in range(m)])
            h = np.array([(axes[d][1] - axes[d][0]) * 0.5 for d in range(m)])
            candidates.append((pt - h, pt + h))

    found = []
    cell_diag = np.array([(hi - lo) / (resolution - 1) for lo, hi in box])
    for lo, hi in candidates:
        if m == 1:
            root = _refine_1d(spec, weights, v, lo[0], hi[0],
                              lambda t: float(grad_at(np.array([t]))[0]))
            point = np.array([root])
            gnorm = float(np.max(np.abs(grad_at(point))))
        else:
            point, gnorm = _refine_nd(grad_at, 0.5 * (lo + hi), 0.5 * (hi - lo))
        if gnorm > 1e-6:
            continue
        if any(np.all(np.abs(point - p.location) <= cell_diag) for p in found):
            continue
        rep = verify_extremum(spec, weights, point, v, hessian_step=hessian_step)
        rep.gradient_residual = gnorm
        if dataset is not None and gamma is not None:
            dists = np.linalg.norm(dataset.surfaces() - point, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] < gamma:
                rep.occupancy = nearest + 1
        found.append(rep)
    return found


@dataclass
class NoiseReport:
    distance: float
    within_gamma_of_same_essence: bool
    prediction_changed: bool
    clean_sides: list            # per class, True if output > 0.5
    noisy_sides: list


def noise_probe(sample: Sample, noise, gamma: float, spec: NetSpec,
                weights: WeightSet, dataset: Dataset = None) -> NoiseReport:
    """Euclidean displacement of a noisy sample and its effect on prediction."""
    noise = np.asarray(noise, dtype=float).reshape(-1)
    if noise.shape != sample.surface.shape:
        raise ValueError("noise dimension must match the surface dimension")
    noisy = sample.surface + noise
    distance = float(np.linalg.norm(noise))
    clean_out = forward(spec, weights, sample.surface).outputs
    noisy_out = forward(spec, weights, noisy).outputs
    clean_sides = (clean_out > 0.5).tolist()
    noisy_sides = (noisy_out > 0.5).tolist()
    within = False
    if dataset is not None:
        for other in dataset.samples:
            if other.essence == sample.essence:
                if float(np.linalg.norm(noisy - other.surface)) < gamma:
                    within = True
                    break
    return NoiseReport(
        distance=distance,
        within_gamma_of_same_essence=within,
        prediction_changed=clean_sides != noisy_sides,
        clean_sides=clean_sides,
        noisy_sides=noisy_sides,
    )
