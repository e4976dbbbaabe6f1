"""Minimal full-batch back-propagation trainer, used only as a comparison foil.

Same network family (bias-free, sigmoid everywhere), squared error against
one-hot essence targets, every layer updated every epoch - the deliberate
contrast with staged updates.  Reports come out in the identical schema.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Dataset, NetSpec, WeightSet, forward_batch
from .calculus import batch_jacobians
from .polarize import TerminationMode, check_condition
from .trainer import TrainReport


@dataclass(frozen=True)
class BpConfig:
    learning_rate: float = 2.0
    epochs: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def one_hot_targets(dataset: Dataset, n_classes: int) -> np.ndarray:
    t = np.zeros((dataset.size, n_classes))
    t[np.arange(dataset.size), dataset.essences() - 1] = 1.0
    return t


def loss_and_gradients(spec: NetSpec, weights: WeightSet, xs: np.ndarray,
                       targets: np.ndarray):
    """Mean-per-sample squared error and its weight gradients (full batch)."""
    acts, derivs = forward_batch(spec, weights, xs)
    out = acts[-1]
    diff = out - targets
    loss = float(np.sum(diff**2) / xs.shape[0])
    delta = (2.0 / xs.shape[0]) * diff * derivs[-1]
    grads = [None] * spec.depth
    for u in range(spec.depth, 0, -1):
        grads[u - 1] = delta.T @ acts[u - 1]
        if u > 1:
            delta = (delta @ weights.layer(u)) * derivs[u - 2]
    return loss, grads


def bp_fit(dataset: Dataset, spec: NetSpec, weights: WeightSet,
           config: BpConfig = None, mode: TerminationMode = None) -> TrainReport:
    """Full-batch gradient descent; margins are reported under the same
    termination condition as the staged trainer.  Divergence (non-finite
    loss) is reported in the outcome, never raised."""
    config = config or BpConfig()
    mode = mode or TerminationMode.weakened()
    dataset.validate(spec)
    weights.check_shapes(spec)
    xs = dataset.surfaces()
    targets = one_hot_targets(dataset, spec.n_classes)
    mats = [np.array(w) for w in weights.matrices]
    outcome = "success"
    loss_curve = []
    for _ in range(config.epochs):
        current = WeightSet(mats)
        loss, grads = loss_and_gradients(spec, current, xs, targets)
        loss_curve.append(loss)
        if not np.isfinite(loss):
            outcome = "diverged"
            break
        mats = [w - config.learning_rate * g for w, g in zip(mats, grads)]
    final = WeightSet(mats)
    acts, _ = forward_batch(spec, final, xs)
    outputs = acts[-1]
    margins = []
    for i, s in enumerate(dataset.samples):
        _, margin = check_condition(outputs[i], s.essence, mode)
        margins.append(margin)
    jac_out = batch_jacobians(spec, final, xs)[-1]
    residuals = np.max(np.abs(jac_out), axis=(1, 2)).tolist()
    return TrainReport(
        outcome=outcome,
        stage=None,
        nullity_history=[],
        updated_layers=list(range(1, spec.depth + 1)) if config.epochs else [],
        sample_margins=margins,
        outputs=outputs.tolist(),
        stationarity_residuals=residuals,
        mode=mode.describe(),
        variant="backprop",
        seed=config.seed,
        weights=final,
        solution=None,
        extra={"loss_curve": loss_curve, "learning_rate": config.learning_rate,
               "epochs": config.epochs},
    )
