"""Bias-free fully connected sigmoid network: architecture, weights, forward traces.

The network is a stack of layers u = 1..n (layer 0 is the input), every unit
computing h = S(z) with z the weighted sum of the previous layer and S the
sigmoid.  There are no biases and no softmax; the output layer is sigmoid like
everything else, so each output unit is a standalone binary classifier for one
essence class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Pre-activations beyond this magnitude are flagged as saturated; the sigmoid
# value is clamped to the nearest double strictly inside (0, 1) so that the
# derivative factor c = h*(1-h) never collapses to exactly zero.
SATURATION_LIMIT = 500.0

_H_LO = np.nextafter(0.0, 1.0)
_H_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class NetSpec:
    """Architecture sizes: input dimension m and layer widths (l_1 .. l_n)."""

    input_dim: int
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.layer_sizes) < 1:
            raise ValueError("need at least one layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be >= 1, got {self.layer_sizes}")

    @property
    def depth(self) -> int:
        """Number of layers n (hidden layers 1..n-1 plus the output layer n)."""
        return len(self.layer_sizes)

    @property
    def n_classes(self) -> int:
        """Width of the output layer l_n = number of essence classes."""
        return self.layer_sizes[-1]

    def size(self, u: int) -> int:
        """Width l_u of layer u, with l_0 = input_dim."""
        if not 0 <= u <= self.depth:
            raise ValueError(f"layer index {u} out of range [0, {self.depth}]")
        return self.input_dim if u == 0 else self.layer_sizes[u - 1]


class WeightSet:
    """Per-layer weight matrices W[u] of shape l_u x l_{u-1} (l_0 = m).

    Matrices are stored read-only so that layers left untouched by a staged
    update can be checked bitwise against their initial values.
    """

    def __init__(self, matrices):
        mats = []
        for w in matrices:
            a = np.array(w, dtype=float)
            if a.ndim != 2:
                raise ValueError("each weight matrix must be 2-D")
            if not np.all(np.isfinite(a)):
                raise ValueError("weight entries must be finite")
            a.flags.writeable = False
            mats.append(a)
        self.matrices: tuple[np.ndarray, ...] = tuple(mats)

    def layer(self, u: int) -> np.ndarray:
        """Matrix W[u], u in [1, n]."""
        if not 1 <= u <= len(self.matrices):
            raise ValueError(f"layer index {u} out of range [1, {len(self.matrices)}]")
        return self.matrices[u - 1]

    def check_shapes(self, spec: NetSpec) -> None:
        if len(self.matrices) != spec.depth:
            raise ValueError(
                f"expected {spec.depth} weight matrices, got {len(self.matrices)}"
            )
        for u, w in enumerate(self.matrices, start=1):
            want = (spec.size(u), spec.size(u - 1))
            if w.shape != want:
                raise ValueError(f"W[{u}] has shape {w.shape}, expected {want}")

    def replace_tail(self, new_tail) -> "WeightSet":
        """New WeightSet with the last len(new_tail) layers replaced.

        Earlier layers are shared, not copied, so they stay bitwise identical.
        """
        new_tail = [np.asarray(w, dtype=float) for w in new_tail]
        keep = self.matrices[: len(self.matrices) - len(new_tail)]
        return WeightSet(list(keep) + new_tail)

    def __eq__(self, other):
        if not isinstance(other, WeightSet):
            return NotImplemented
        return len(self.matrices) == len(other.matrices) and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.matrices, other.matrices)
        )

    def __len__(self):
        return len(self.matrices)


@dataclass(frozen=True)
class Sample:
    """A training sample: surface x (m-vector) and essence label y in [1, l_n]."""

    surface: np.ndarray
    essence: int

    def __post_init__(self):
        object.__setattr__(
            self, "surface", np.asarray(self.surface, dtype=float).reshape(-1)
        )
        object.__setattr__(self, "essence", int(self.essence))


@dataclass
class Dataset:
    """Ordered sample list; size() is the paper count phi of spec-speak."""

    samples: list

    def __post_init__(self):
        self.samples = list(self.samples)

    @property
    def size(self) -> int:
        return len(self.samples)

    def surfaces(self) -> np.ndarray:
        return np.array([s.surface for s in self.samples], dtype=float)

    def essences(self) -> np.ndarray:
        return np.array([s.essence for s in self.samples], dtype=int)

    def validate(self, spec: NetSpec) -> None:
        for i, s in enumerate(self.samples):
            if s.surface.shape != (spec.input_dim,):
                raise ValueError(
                    f"sample {i}: surface has dimension {s.surface.shape[0]}, "
                    f"expected {spec.input_dim}"
                )
            if not 1 <= s.essence <= spec.n_classes:
                raise ValueError(
                    f"sample {i}: essence {s.essence} out of range [1, {spec.n_classes}]"
                )


@dataclass
class ActivationTrace:
    """All per-layer values for one input: z, h = S(z), and c = h*(1-h)."""

    x: np.ndarray                      # layer-0 activations, i.e. the input
    pre: list = field(default_factory=list)    # pre[u-1] = z^[u]
    act: list = field(default_factory=list)    # act[u-1] = h^[u]
    deriv: list = field(default_factory=list)  # deriv[u-1] = c^[u]
    saturated: bool = False

    @property
    def outputs(self) -> np.ndarray:
        """Output-layer activations (h_1^[n] .. h_{l_n}^[n])."""
        return self.act[-1]

    def activations(self, u: int) -> np.ndarray:
        """h^[u], with h^[0] = x."""
        return self.x if u == 0 else self.act[u - 1]


def sigmoid(theta):
    """Numerically stable sigmoid 1/(1 + exp(-theta)), strictly inside (0, 1).

    Evaluated branch-wise on the sign of theta and clamped to the nearest
    representable double inside (0, 1), so h*(1-h) stays positive even deep in
    the saturated tails.  Raises on non-finite input.
    """
    t = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("sigmoid requires finite input")
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    out = np.clip(out, _H_LO, _H_HI)
    if np.isscalar(theta) or np.ndim(theta) == 0:
        return float(out)
    return out


def forward(spec: NetSpec, weights: WeightSet, x) -> ActivationTrace:
    """Evaluate the network at x, recording z, h and c for every layer."""
    weights.check_shapes(spec)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"input has dimension {x.shape[0]}, expected {spec.input_dim}")
    trace = ActivationTrace(x=x)
    h = x
    for w in weights.matrices:
        z = w @ h
        h = sigmoid(z)
        h = np.atleast_1d(np.asarray(h))
        trace.pre.append(z)
        trace.act.append(h)
        trace.deriv.append(h * (1.0 - h))
        if np.any(np.abs(z) > SATURATION_LIMIT):
            trace.saturated = True
    return trace


def forward_batch(spec: NetSpec, weights: WeightSet, xs):
    """Vectorized forward pass over rows of xs; returns (acts, derivs).

    acts[u] is the (N, l_u) activation matrix of layer u with acts[0] = xs;
    derivs[u-1] holds c^[u] = h*(1-h).  Used by searches and grid sampling
    where per-sample traces would be needlessly slow.
    """
    weights.check_shapes(spec)
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != spec.input_dim:
        raise ValueError(f"expected (N, {spec.input_dim}) inputs, got {xs.shape}")
    acts = [xs]
    derivs = []
    h = xs
    for w in weights.matrices:
        h = sigmoid(h @ w.T)
        h = np.atleast_2d(h)
        acts.append(h)
        derivs.append(h * (1.0 - h))
    return acts, derivs


def output_unit(trace: ActivationTrace, v: int) -> float:
    """Value of output unit v (1-based class index)."""
    out = trace.outputs
    if not 1 <= v <= out.shape[0]:
        raise ValueError(f"class index {v} out of range [1, {out.shape[0]}]")
    return float(out[v - 1])


def init_weights(spec: NetSpec, seed=None, rng=None) -> WeightSet:
    """Seeded initial weights, uniform on [-1, -0.1] union [0.1, 1].

    Magnitudes at least 0.1 keep every entry away from zero, and at most 1 keep
    initial pre-activations out of the saturated regime at desk scale.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    mats = []
    for u in range(1, spec.depth + 1):
        shape = (spec.size(u), spec.size(u - 1))
        mag = rng.uniform(0.1, 1.0, size=shape)
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        mats.append(mag * sign)
    return WeightSet(mats)
