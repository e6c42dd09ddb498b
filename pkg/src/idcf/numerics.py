"""Dense numerical core: small MLPs with hand-written backprop, Adam,
diagonal Gaussians and seeded random streams.

Everything works in float64. Batched inputs are 2-D arrays with one row per
example; single examples may be passed as 1-D vectors.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, NumericError

LEAKY_SLOPE = 0.01
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
PROB_EPS = 1e-7


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


class RngStream:
    """A reproducible random stream addressed by (seed, label, counter).

    The underlying bit generator is PCG64 seeded through a SeedSequence built
    from the three coordinates, so the sequence is identical on every
    platform numpy supports.
    """

    def __init__(self, seed: int, label: str = "", counter: int = 0):
        if seed < 0:
            raise DomainError("seed must be non-negative")
        self.seed = int(seed)
        self.label = label
        self.counter = int(counter)
        self.reset()

    def reset(self) -> None:
        entropy = [self.seed, zlib.crc32(self.label.encode("utf-8")), self.counter]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def substream(self, label: str, counter: int = 0) -> "RngStream":
        full = f"{self.label}/{label}" if self.label else label
        return RngStream(self.seed, full, counter)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Layer weights stored as (fan_in, fan_out) matrices plus bias vectors.

    Hidden layers use a leaky rectifier; the output layer is affine.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        if self.slope <= 0:
            raise DomainError("activation slope must be positive")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k}: input width {w.shape[0]} != previous output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope)


def init_mlp(sizes: list[int], rng: RngStream, slope: float = LEAKY_SLOPE) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, slope)


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} does not match first layer ({params.in_dim})")
    return x, single


def mlp_forward(params: MlpParams, x, return_cache: bool = False):
    """Evaluate the network. With ``return_cache`` also return the
    per-layer (input, pre-activation) pairs needed by :func:`mlp_backward`."""
    h, single = _as_batch(params, x)
    cache = []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        cache.append((h, pre))
        h = pre if k == last else np.where(pre > 0, pre, params.slope * pre)
    out = h[0] if single else h
    return (out, cache) if return_cache else out


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def mlp_backward(params: MlpParams, x, upstream, cache=None) -> tuple[MlpGrads, np.ndarray]:
    """Backpropagate ``upstream`` (dL/d output) through the network.

    Parameter gradients are summed over the batch. Returns the gradient
    with respect to the input in the same shape as ``x``.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.out_dim):
        raise DimensionError(f"upstream gradient shape {g.shape} != output shape {(xb.shape[0], params.out_dim)}")
    if cache is None:
        _, cache = mlp_forward(params, xb, return_cache=True)
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        h_in, pre = cache[k]
        if k != n_layers - 1:
            g = np.where(pre > 0, g, params.slope * g)
        gw[k] = h_in.T @ g
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return MlpGrads(gw, gb), (g[0] if single else g)


def clamp_logvar(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp a log-variance head; the mask is the derivative of the clamp."""
    mask = (raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX)
    return np.clip(raw, LOGVAR_MIN, LOGVAR_MAX), mask.astype(np.float64)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0, lr)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


class Adam:
    """In-place Adam over a list of arrays, with L2 weight decay folded into
    the gradient (the coupled form used by most deep-learning libraries)."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, weight_decay: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay
        self.states = [AdamState.zeros_like(p, lr) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionError("one gradient per parameter array required")
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            new, self.states[k] = adam_step(self.states[k], p, g)
            p[...] = new


# ---------------------------------------------------------------------------
# Diagonal Gaussians
# ---------------------------------------------------------------------------


@dataclass
class DiagonalGaussian:
    mean: np.ndarray
    var: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise DimensionError(f"mean {self.mean.shape} and variance {self.var.shape} differ")
        if not np.all(self.var > 0):
            raise DomainError("variance must be strictly positive")

    @classmethod
    def from_logvar(cls, mean, logvar) -> "DiagonalGaussian":
        return cls(mean, np.exp(logvar))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def sample_reparam(g: DiagonalGaussian, rng: RngStream, return_noise: bool = False):
    """Draw ``mean + sqrt(var) * eps`` with ``eps ~ N(0, I)``."""
    if not np.all(g.var > 0):
        raise DomainError("variance must be strictly positive")
    eps = rng.normal(g.mean.shape)
    z = g.mean + np.sqrt(g.var) * eps
    return (z, eps) if return_noise else z


def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian):
    """Closed-form KL(q || p), summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise DimensionError("KL between Gaussians of different dimension")
    if not (np.all(q.var > 0) and np.all(p.var > 0)):
        raise DomainError("variance must be strictly positive")
    diff = q.mean - p.mean
    terms = q.var / p.var + diff * diff / p.var - 1.0 + np.log(p.var) - np.log(q.var)
    return 0.5 * terms.sum(axis=-1)


def kl_diag_gaussians_grad(q_mean, q_logvar, p_mean, p_logvar):
    """Gradients of KL(q || p) w.r.t. (q_mean, q_logvar, p_mean, p_logvar),
    elementwise; the KL itself is summed over the last axis."""
    vq = np.exp(q_logvar)
    vp = np.exp(p_logvar)
    diff = q_mean - p_mean
    ratio = vq / vp
    d_qm = diff / vp
    d_qlv = 0.5 * (ratio - 1.0)
    d_pm = -d_qm
    d_plv = 0.5 * (1.0 - ratio - diff * diff / vp)
    return d_qm, d_qlv, d_pm, d_plv


def bernoulli_log_likelihood(probabilities, targets):
    """Sum over the last axis of ``a log p + (1 - a) log(1 - p)`` with ``p``
    clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(probabilities, dtype=np.float64)
    a = np.asarray(targets, dtype=np.float64)
    if p.shape != a.shape:
        raise DimensionError(f"probabilities {p.shape} and targets {a.shape} differ")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return (a * np.log(p) + (1.0 - a) * np.log1p(-p)).sum(axis=-1)
