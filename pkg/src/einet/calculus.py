"""Analytic input-derivatives of every layer, plus finite-difference oracles.

The layer Jacobians J^[u][v,t] = dh_v^[u]/dx_t are the coefficient source for
every stationarity system; they follow the recursion
J^[u] = diag(c^[u]) @ W[u] @ J^[u-1] with J^[0] the identity on inputs.
Finite differences are kept deliberately independent of the analytic path so
either side can check the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ActivationTrace, NetSpec, WeightSet, forward

DEFAULT_FD_STEP = 1e-5


@dataclass
class JacobianStack:
    """J^[u] for u = 1..n; each J^[u] has shape (l_u, m)."""

    jacobians: list

    def layer(self, u: int) -> np.ndarray:
        """J^[u]; u = 0 returns the identity on inputs."""
        if u == 0:
            m = self.jacobians[0].shape[1]
            return np.eye(m)
        return self.jacobians[u - 1]

    @property
    def output(self) -> np.ndarray:
        """Jacobian of the output layer, shape (l_n, m)."""
        return self.jacobians[-1]


def input_jacobians(spec: NetSpec, weights: WeightSet, trace: ActivationTrace) -> JacobianStack:
    """All layers' Jacobians with respect to the input, at the traced point."""
    weights.check_shapes(spec)
    if trace.x.shape != (spec.input_dim,):
        raise ValueError("trace does not match spec input dimension")
    if len(trace.act) != spec.depth:
        raise ValueError("trace does not match spec depth")
    jac = np.eye(spec.input_dim)
    stack = []
    for u in range(1, spec.depth + 1):
        c = trace.deriv[u - 1]
        if c.shape != (spec.size(u),):
            raise ValueError(f"trace layer {u} width does not match spec")
        jac = c[:, None] * (weights.layer(u) @ jac)
        stack.append(jac)
    return JacobianStack(stack)


def batch_jacobians(spec: NetSpec, weights: WeightSet, xs):
    """Per-layer input Jacobians for many inputs at once.

    Returns a list over layers u = 1..n of arrays with shape (N, l_u, m),
    following the same recursion as :func:`input_jacobians`.
    """
    from .network import forward_batch

    _, derivs = forward_batch(spec, weights, xs)
    n_pts = np.asarray(xs).shape[0]
    jac = np.broadcast_to(np.eye(spec.input_dim), (n_pts, spec.input_dim, spec.input_dim))
    out = []
    for u in range(1, spec.depth + 1):
        jac = derivs[u - 1][:, :, None] * np.einsum(
            "vk,nkm->nvm", weights.layer(u), jac
        )
        out.append(jac)
    return out


def fd_gradient(spec: NetSpec, weights: WeightSet, v: int, x, step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of output unit v at x (verification oracle)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    grad = np.empty(spec.input_dim)
    for t in range(spec.input_dim):
        e = np.zeros_like(x)
        e[t] = step
        hi = forward(spec, weights, x + e).outputs[v - 1]
        lo = forward(spec, weights, x - e).outputs[v - 1]
        grad[t] = (hi - lo) / (2.0 * step)
    return grad


def input_hessian(spec: NetSpec, weights: WeightSet, v: int, x, step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Symmetrized central-difference Hessian of output unit v at x.

    Second derivatives come from function values only; used for post-hoc
    classification of stationary points where O(m^2) evaluations are cheap.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    m = spec.input_dim

    def f(p):
        return forward(spec, weights, p).outputs[v - 1]

    h = np.empty((m, m))
    f0 = f(x)
    for t in range(m):
        et = np.zeros(m)
        et[t] = step
        h[t, t] = (f(x + et) - 2.0 * f0 + f(x - et)) / step**2
        for s in range(m):
            if s == t:
                continue
            es = np.zeros(m)
            es[s] = step
            h[t, s] = (
                f(x + et + es) - f(x + et - es) - f(x - et + es) + f(x - et - es)
            ) / (4.0 * step**2)
    return 0.5 * (h + h.T)


def relative_deviation(a, b, floor: float = 1e-8) -> float:
    """Max entrywise |a-b| / max(|a|, |b|, floor); the comparison rule used
    everywhere analytic and finite-difference derivatives are matched."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
