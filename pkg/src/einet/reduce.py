"""Neighborhood-based sample reduction: train centers, verify the rest.

Samples of one essence that sit within gamma of each other carry nearly the
same function value, so only a representative needs the full treatment.  Each
class is clustered, cluster centers (actual dataset members) are trained, and
every non-central sample is verified against the same termination condition
used for training; failures get promoted to centers and the loop repeats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Dataset, NetSpec, Sample, WeightSet, forward
from .polarize import check_condition
from .trainer import TrainConfig, TrainReport, fit


@dataclass(frozen=True)
class NeighborhoodConfig:
    gamma: float
    max_clusters: int | None = None  # per-class cap; None lets coverage decide

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class ReductionState:
    central: list                 # dataset indices (0-based), sorted
    non_central: list
    rounds: int
    history: list = field(default_factory=list)  # per round: dict of outcomes


def distance(a: Sample, b: Sample) -> float:
    """Euclidean distance between two sample surfaces."""
    if a.surface.shape != b.surface.shape:
        raise ValueError("samples have different surface dimensions")
    return float(np.linalg.norm(a.surface - b.surface))


def _kmeans(points: np.ndarray, k: int, iters: int = 100) -> np.ndarray:
    """Deterministic Lloyd iteration with greedy farthest-point seeding."""
    centers = [points[0]]
    for _ in range(1, k):
        d = np.min(
            [np.linalg.norm(points - c, axis=1) for c in centers], axis=0
        )
        centers.append(points[int(np.argmax(d))])
    centers = np.array(centers)
    for _ in range(iters):
        d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        assign = np.argmin(d, axis=1)
        new = centers.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new[j] = points[mask].mean(axis=0)
        if np.allclose(new, centers):
            break
        centers = new
    return centers


def cluster_centers(dataset: Dataset, config: NeighborhoodConfig) -> dict:
    """Central samples per class: {essence: sorted list of dataset indices}.

    Within each class, the cluster count grows from 1 until every member lies
    within gamma of its center; centers snap to the nearest actual sample so
    only dataset members are ever trained.
    """
    by_class = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.essence, []).append(i)
    out = {}
    for essence, idxs in sorted(by_class.items()):
        pts = np.array([dataset.samples[i].surface for i in idxs])
        cap = config.max_clusters or len(idxs)
        chosen = None
        for k in range(1, min(cap, len(idxs)) + 1):
            centers = _kmeans(pts, k)
            snap = [int(np.argmin(np.linalg.norm(pts - c, axis=1))) for c in centers]
            snapped = pts[snap]
            d = np.linalg.norm(pts[:, None, :] - snapped[None, :, :], axis=2)
            if np.max(d.min(axis=1)) < config.gamma:
                chosen = snap
                break
        if chosen is None:
            chosen = list(range(len(idxs)))  # cap reached: everyone is central
        out[essence] = sorted({idxs[j] for j in chosen})
    return out


def reduction_loop(dataset: Dataset, spec: NetSpec, weights: WeightSet,
                   train_config: TrainConfig, neigh_config: NeighborhoodConfig):
    """Train on centers, verify the rest, promote failures; returns the final
    TrainReport plus the ReductionState.  Verification uses exactly the same
    condition check as training, and the central set only ever grows, so the
    loop ends after at most one promotion round per sample."""
    dataset.validate(spec)
    centers = cluster_centers(dataset, neigh_config)
    central = sorted(i for idxs in centers.values() for i in idxs)
    state = ReductionState(central=central, non_central=[], rounds=0)
    report = None
    for _ in range(dataset.size + 1):
        state.rounds += 1
        subset = Dataset([dataset.samples[i] for i in state.central])
        report = fit(subset, spec, weights, train_config)
        if not report.succeeded:
            state.non_central = [i for i in range(dataset.size) if i not in state.central]
            state.history.append({"round": state.rounds, "outcome": report.outcome})
            return report, state
        failures = []
        verified = 0
        for i in range(dataset.size):
            if i in state.central:
                continue
            s = dataset.samples[i]
            out = forward(spec, report.weights, s.surface).outputs
            passed, _ = check_condition(out, s.essence, train_config.mode)
            if passed:
                verified += 1
            else:
                failures.append(i)
        state.history.append(
            {"round": state.rounds, "outcome": "success",
             "centers": len(state.central), "verified": verified,
             "promoted": list(failures)}
        )
        if not failures:
            break
        state.central = sorted(set(state.central) | set(failures))
        if len(state.central) == dataset.size:
            subset = Dataset(dataset.samples)
            state.rounds += 1
            report = fit(subset, spec, weights, train_config)
            state.history.append({"round": state.rounds, "outcome": report.outcome,
                                  "centers": dataset.size, "verified": 0,
                                  "promoted": []})
            break
    state.non_central = [i for i in range(dataset.size) if i not in state.central]
    return report, state
