"""Minimal fully-differentiable MLP substrate for learned velocity fields.

Everything is plain float64 numpy: a stack of dense layers with a smooth
activation, a sinusoidal embedding of the time coordinate concatenated to
the spatial input, hand-written reverse-mode gradients, Adam with bias
correction, and EMA parameter shadowing with the warm-up schedule
``min((1 + step) / (10 + step), decay)``.

Parameter flattening order (used by :func:`flatten_params`,
:func:`per_sample_grads` and :func:`jacobian`): layer 0 weight (C order),
layer 0 bias, layer 1 weight, layer 1 bias, ...
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteGradError


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_deriv(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _tanh(z):
    return np.tanh(z)


def _tanh_deriv(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    "silu": (_silu, _silu_deriv),
    "tanh": (_tanh, _tanh_deriv),
}


@dataclass
class MlpParams:
    """Dense-layer weights/biases plus the fixed embedding configuration.

    ``weights[l]`` has shape ``(fan_in, fan_out)`` and ``biases[l]`` shape
    ``(fan_out,)``. The first fan_in must equal ``data_dim + 2 * n_freqs``
    and the last fan_out equals ``data_dim``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_freqs: int = 16
    activation: str = "silu"

    @property
    def data_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def validate(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases layer counts differ")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match weight {w.shape}")
            if l + 1 < len(self.weights) and self.weights[l + 1].shape[0] != w.shape[1]:
                raise ValueError(f"layers {l}/{l + 1}: inner dimensions do not conform")
        expected_in = self.data_dim + 2 * self.n_freqs
        if self.weights[0].shape[0] != expected_in:
            raise ValueError(
                f"input width {self.weights[0].shape[0]} != data dim + embedding width {expected_in}"
            )
        for arrs in (self.weights, self.biases):
            for a in arrs:
                if not np.all(np.isfinite(a)):
                    raise ValueError("non-finite parameter value")

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.n_freqs,
            self.activation,
        )


def init_mlp(data_dim, hidden=(64, 64), n_freqs=16, activation="silu", rng=None):
    """Fan-in scaled Gaussian weights, zero biases, zero-initialized final layer.

    The zero final layer makes the initial field identically zero, which is a
    stable starting point for velocity regression.
    """
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng() if rng is None else rng
    widths = [data_dim + 2 * n_freqs] + list(hidden) + [data_dim]
    weights, biases = [], []
    for l in range(len(widths) - 1):
        fan_in, fan_out = widths[l], widths[l + 1]
        if l == len(widths) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, n_freqs=n_freqs, activation=activation)


def time_embedding(t, n_freqs, n_points=None):
    """Sinusoidal features [sin(pi k t), cos(pi k t)] for k = 1..n_freqs.

    Half-period frequencies keep the map injective on [0, 1]: with integer
    cycles the embedding would be 1-periodic and force v(x, 0) == v(x, 1),
    which corrupts training targets at the interval endpoints.

    ``t`` may be a scalar (shared time stamp) or a per-point array.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n_points, float(t))
    angles = np.pi * np.outer(t, np.arange(1, n_freqs + 1, dtype=np.float64))
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _forward_cached(params: MlpParams, x, t):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.data_dim:
        raise ValueError(f"input dim {x.shape[1]} != model data dim {params.data_dim}")
    emb = time_embedding(t, params.n_freqs, n_points=x.shape[0])
    if emb.shape[0] != x.shape[0]:
        raise ValueError(f"t has {emb.shape[0]} entries for {x.shape[0]} points")
    act, _ = ACTIVATIONS[params.activation]
    h = np.concatenate([x, emb], axis=1)
    activations = [h]
    pre = []
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w + b
        pre.append(z)
        activations.append(act(z) if l < n_layers - 1 else z)
    return activations, pre


def forward(params: MlpParams, x, t):
    """Evaluate the field: (n, D) points and scalar or per-point t -> (n, D)."""
    activations, _ = _forward_cached(params, x, t)
    return activations[-1]


def backward(params: MlpParams, x, t, upstream):
    """Gradients of sum(upstream * forward(params, x, t)) w.r.t. all params.

    Returns a list of (dW, db) pairs, one per layer.
    """
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    activations, pre = _forward_cached(params, x, t)
    if upstream.shape != activations[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {activations[-1].shape}")
    _, dact = ACTIVATIONS[params.activation]
    grads = [None] * len(params.weights)
    delta = upstream
    for l in range(len(params.weights) - 1, -1, -1):
        grads[l] = (activations[l].T @ delta, delta.sum(axis=0))
        if l > 0:
            delta = (delta @ params.weights[l].T) * dact(pre[l - 1])
    return grads


def per_sample_grads(params: MlpParams, x, t, upstream):
    """Per-point flattened gradients of <upstream_i, forward(x_i, t_i)>.

    Returns an (n, n_params) array in the canonical flattening order. Used
    by the Monte-Carlo gradient diagnostics; training uses :func:`backward`.
    """
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    activations, pre = _forward_cached(params, x, t)
    if upstream.shape != activations[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {activations[-1].shape}")
    _, dact = ACTIVATIONS[params.activation]
    n = upstream.shape[0]
    pieces = [None] * len(params.weights)
    delta = upstream
    for l in range(len(params.weights) - 1, -1, -1):
        dw = np.einsum("bi,bj->bij", activations[l], delta)
        pieces[l] = (dw.reshape(n, -1), delta)
        if l > 0:
            delta = (delta @ params.weights[l].T) * dact(pre[l - 1])
    return np.concatenate([arr for pair in pieces for arr in pair], axis=1)


def jacobian(params: MlpParams, x_point, t):
    """Jacobian d v(x, t) / d theta at one point: shape (D, n_params)."""
    d = params.data_dim
    x_rep = np.tile(np.asarray(x_point, dtype=np.float64).reshape(1, d), (d, 1))
    return per_sample_grads(params, x_rep, float(t), np.eye(d))


def flatten_params(params: MlpParams):
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def flatten_grads(grads):
    parts = []
    for dw, db in grads:
        parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


def grad_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for pair in grads for g in pair)))


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
        return cls(zeros(), zeros(), 0, lr, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        cp = lambda tree: [(w.copy(), b.copy()) for w, b in tree]
        return AdamState(cp(self.m), cp(self.v), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: MlpParams, grads, state: AdamState):
    """One bias-corrected Adam update. Returns (new params, new state).

    Rejects non-finite gradients with :class:`NonFiniteGradError`; the
    training loop decides whether to skip the batch or abort.
    """
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteGradError("non-finite gradient; update rejected")
    out = params.copy()
    st = state.copy()
    st.step += 1
    bc1 = 1.0 - st.beta1 ** st.step
    bc2 = 1.0 - st.beta2 ** st.step
    for l, (dw, db) in enumerate(grads):
        for which, g in ((0, dw), (1, db)):
            m = st.m[l][which]
            v = st.v[l][which]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            target = out.weights[l] if which == 0 else out.biases[l]
            target -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
    return out, st


@dataclass
class EmaState:
    """Exponential moving average shadow of the parameters.

    The shadow is itself an :class:`MlpParams`, so it can be evaluated
    directly; all sampling and metrics use the shadow.
    """

    shadow: MlpParams
    decay: float
    warmup: bool = True

    def __post_init__(self):
        if not (0.0 <= self.decay < 1.0):
            raise ConfigError(f"EMA decay must be in [0, 1), got {self.decay}")

    @classmethod
    def fresh(cls, params: MlpParams, decay, warmup=True):
        return cls(params.copy(), decay, warmup)

    def copy(self) -> "EmaState":
        return EmaState(self.shadow.copy(), self.decay, self.warmup)


def ema_rate(step: int, decay: float, warmup: bool) -> float:
    """Effective shadow retention rate at a given training step."""
    if step < 0:
        raise ConfigError("EMA step must be >= 0")
    if not warmup:
        return decay
    return min((1.0 + step) / (10.0 + step), decay)


def ema_update(ema: EmaState, params: MlpParams, step: int) -> EmaState:
    """shadow <- r * shadow + (1 - r) * params with the warm-up rate r."""
    r = ema_rate(step, ema.decay, ema.warmup)
    out = ema.copy()
    for l in range(len(params.weights)):
        out.shadow.weights[l] *= r
        out.shadow.weights[l] += (1.0 - r) * params.weights[l]
        out.shadow.biases[l] *= r
        out.shadow.biases[l] += (1.0 - r) * params.biases[l]
    return out
