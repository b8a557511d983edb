"""Learned proximal operator and (accelerated) learned proximal gradient descent.

The network acts on mesh vectors ordered by element index.  Each layer is
a zero-padded width-3 1D convolution followed by a PReLU with one
negative-slope parameter per layer.  Inputs are two channels (the current
estimate ``z`` and the gradient of the coupling term), the output is a
single channel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anderson import solve_alpha

KERNEL_WIDTH = 3
CHECKPOINT_FORMAT = "aahqsnet-proxnet"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ProxNetParams:
    """Weights of the proximal network.

    ``weights[l]`` has shape ``(c_out, c_in, 3)``, ``biases[l]`` shape
    ``(c_out,)`` and ``slopes[l]`` is the PReLU negative slope of layer ``l``.
    """

    weights: list
    biases: list
    slopes: list

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        self.biases = [np.array(b, dtype=float) for b in self.biases]
        self.slopes = [float(a) for a in self.slopes]
        self.validate()

    def validate(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.slopes) >= 1):
            raise ValueError("weights, biases and slopes must have one entry per layer")
        prev = 2
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 3 or w.shape[2] != KERNEL_WIDTH:
                raise ValueError(f"layer {l}: kernel must have shape (c_out, c_in, 3), got {w.shape}")
            if w.shape[1] != prev:
                raise ValueError(f"layer {l}: expected {prev} input channels, got {w.shape[1]}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match {w.shape[0]} outputs")
            prev = w.shape[0]
        if prev != 1:
            raise ValueError("last layer must have one output channel")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("parameters must be finite")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> int:
        return self.weights[0].shape[0] if self.n_layers > 1 else 1

    @property
    def size(self) -> int:
        return sum(w.size + b.size + 1 for w, b in zip(self.weights, self.biases))

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b, a in zip(self.weights, self.biases, self.slopes):
            parts += [w.ravel(), b, [a]]
        return np.concatenate(parts)

    def with_vector(self, theta) -> "ProxNetParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"parameter vector must have length {self.size}")
        ws, bs, ss, i = [], [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[i:i + w.size].reshape(w.shape)); i += w.size
            bs.append(theta[i:i + b.size].copy()); i += b.size
            ss.append(float(theta[i])); i += 1
        return ProxNetParams(ws, bs, ss)

    def copy(self) -> "ProxNetParams":
        return self.with_vector(self.to_vector())

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "n_layers": self.n_layers,
            "width": self.width,
            "kernel_width": KERNEL_WIDTH,
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist(), "slope": a}
                for w, b, a in zip(self.weights, self.biases, self.slopes)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProxNetParams":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a proximal-network checkpoint (format={d.get('format')!r})")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
        try:
            layers = d["layers"]
            params = cls([l["weight"] for l in layers], [l["bias"] for l in layers],
                         [l["slope"] for l in layers])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        if params.n_layers != d.get("n_layers"):
            raise CheckpointError("layer count does not match the stored metadata")
        return params

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ProxNetParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


INIT_SCHEMES = ("he", "passthrough")


def init_params(n_layers: int = 4, width: int = 32, seed=0, slope: float = 0.25,
                scheme: str = "he", gain: float = 0.1, step: float = 1.0) -> ProxNetParams:
    """Random initialisation with zero biases.

    ``scheme="he"`` draws weights with variance ``2 / fan_in``.
    ``scheme="passthrough"`` scales those weights by ``gain`` and adds a
    centre tap so that channel 0 starts as a gradient step: the first
    layer computes ``z − step · grad`` and later layers pass it on.  Set
    ``step = 1 / μ`` to start from the unregularised z-update.
    """
    if n_layers < 1 or width < 1:
        raise ValueError("n_layers and width must be >= 1")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    chans = [2] + [width] * (n_layers - 1) + [1]
    ws, bs = [], []
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        fan_in = c_in * KERNEL_WIDTH
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, KERNEL_WIDTH)))
        bs.append(np.zeros(c_out))
    if scheme == "passthrough":
        ws = [w * gain for w in ws]
        ws[0][0, 0, 1] += 1.0
        ws[0][0, 1, 1] -= step
        for w in ws[1:]:
            w[0, 0, 1] += 1.0
    return ProxNetParams(ws, bs, [slope] * n_layers)


def identity_params(n_layers: int = 1, width: int = 1) -> ProxNetParams:
    """Network that returns the ``z`` channel unchanged.

    Every layer passes channel 0 through its centre tap with slope 1.
    """
    chans = [2] + [width] * (n_layers - 1) + [1]
    ws, bs = [], []
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        w = np.zeros((c_out, c_in, KERNEL_WIDTH))
        w[0, 0, 1] = 1.0
        ws.append(w)
        bs.append(np.zeros(c_out))
    return ProxNetParams(ws, bs, [1.0] * n_layers)


# -- convolution primitives ----------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    c, n = x.shape
    xp = np.zeros((c, n + 2))
    xp[:, 1:-1] = x
    cols = np.empty((c, KERNEL_WIDTH, n))
    for j in range(KERNEL_WIDTH):
        cols[:, j] = xp[:, j:j + n]
    return cols.reshape(c * KERNEL_WIDTH, n)


def _col2im(cols: np.ndarray, c: int, n: int) -> np.ndarray:
    cols = cols.reshape(c, KERNEL_WIDTH, n)
    xp = np.zeros((c, n + 2))
    for j in range(KERNEL_WIDTH):
        xp[:, j:j + n] += cols[:, j]
    return xp[:, 1:-1]


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded width-3 cross-correlation, ``x`` of shape ``(c_in, n)``."""
    return w.reshape(w.shape[0], -1) @ _im2col(x) + b[:, None]


@dataclass
class ProxGradCache:
    """Layer inputs (as im2col matrices) and pre-activations of one forward pass."""

    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    n: int = 0


def _stack_input(z, grad) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if z.ndim != 1 or z.shape != grad.shape:
        raise ValueError(f"z and grad must be equal-length vectors, got {z.shape} and {grad.shape}")
    return np.stack([z, grad])


def prox_apply(params: ProxNetParams, y: np.ndarray):
    """Apply the network to a 2-channel input ``y`` of shape ``(2, n)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] != 2:
        raise ValueError(f"network input must have shape (2, n), got {y.shape}")
    cache = ProxGradCache(n=y.shape[1])
    h = y
    for w, b, a in zip(params.weights, params.biases, params.slopes):
        cols = _im2col(h)
        pre = w.reshape(w.shape[0], -1) @ cols + b[:, None]
        cache.cols.append(cols)
        cache.pre.append(pre)
        h = np.where(pre > 0, pre, a * pre)
    return h[0], cache


def prox_forward(params: ProxNetParams, z, grad):
    """``Φ_θ(c(z, grad))``; returns ``(z_out, cache)``."""
    return prox_apply(params, _stack_input(z, grad))


@dataclass
class ProxGrads:
    weights: list
    biases: list
    slopes: list

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b, a in zip(self.weights, self.biases, self.slopes):
            parts += [w.ravel(), b, [a]]
        return np.concatenate(parts)


def prox_backward(params: ProxNetParams, cache: ProxGradCache, upstream):
    """Reverse-mode gradients of ``<upstream, z_out>``.

    Returns ``(param_grads, input_grad)`` where ``input_grad`` has shape
    ``(2, n)``: row 0 for the ``z`` channel and row 1 for the gradient
    channel.
    """
    upstream = np.asarray(upstream, dtype=float)
    if len(cache.pre) != params.n_layers or upstream.shape != (cache.n,):
        raise ValueError("cache does not match these parameters or upstream gradient shape")
    n = cache.n
    gw, gb, ga = [None] * params.n_layers, [None] * params.n_layers, [0.0] * params.n_layers
    g = upstream[None, :]
    for l in range(params.n_layers - 1, -1, -1):
        w, a, pre = params.weights[l], params.slopes[l], cache.pre[l]
        neg = pre <= 0
        ga[l] = float(np.sum(g * np.where(neg, pre, 0.0)))
        g = np.where(neg, a * g, g)
        gw[l] = (g @ cache.cols[l].T).reshape(w.shape)
        gb[l] = g.sum(axis=1)
        g = _col2im(w.reshape(w.shape[0], -1).T @ g, w.shape[1], n)
    return ProxGrads(gw, gb, ga), g


# -- LPGD ----------------------------------------------------------------------

def grad_L(z, sigma, mu: float) -> np.ndarray:
    """Gradient of ``½μ‖σ − z‖²`` with respect to ``z``."""
    z = np.asarray(z, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if z.shape != sigma.shape:
        raise ValueError("z and sigma must have equal lengths")
    return mu * (z - sigma)


def lift(z, sigma, mu: float) -> np.ndarray:
    """Two-channel point ``c(z, ∇𝓛(z))`` of shape ``(2, n)``."""
    return np.stack([np.asarray(z, dtype=float), grad_L(z, sigma, mu)])


def lpgd_step(params: ProxNetParams, z_prev, sigma, mu: float) -> np.ndarray:
    return prox_apply(params, lift(z_prev, sigma, mu))[0]


@dataclass(frozen=True)
class LpgdConfig:
    mu: float = 1.0
    m: int = 2
    K: int = 2

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class LpgdTrace:
    """Iterates of AA-LPGD.

    ``zs`` has ``K + 1`` entries.  ``alphas[k]`` are the weights on the
    lifted points ``c(z_{k-i}, ∇𝓛(z_{k-i}))`` that formed the network input
    for ``zs[k + 1]``; ``caches[k]`` is the network cache of that forward.
    """

    zs: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def z(self) -> np.ndarray:
        return self.zs[-1]


def aa_lpgd(params: ProxNetParams, z0, sigma, config: LpgdConfig = LpgdConfig(),
            ridge: float = 1e-10, prox=None) -> LpgdTrace:
    """Anderson-accelerated learned proximal gradient descent.

    Accelerates the auxiliary sequence ``y_{k+1} = g(y_k)`` with
    ``g(y) = c(Φ(y), ∇𝓛(Φ(y)))`` and reads off ``z_k = Φ(y_k)``.  The
    starting point is ``y_0 = c(z_0, 0)``, so ``r_0 = g_0 − y_0`` carries
    the initial coupling gradient.  With ``m = 0`` this is plain LPGD.

    ``prox`` optionally replaces the network by any callable mapping a
    ``(2, n)`` input to a vector (no caches are recorded then).
    """
    sigma = np.asarray(sigma, dtype=float)
    z = np.asarray(z0, dtype=float)
    if z.shape != sigma.shape:
        raise ValueError("z0 and sigma must have equal lengths")
    mu, m = config.mu, config.m

    def phi(y):
        if prox is not None:
            return np.asarray(prox(y), dtype=float), None
        return prox_apply(params, y)

    trace = LpgdTrace(zs=[z])
    y_prev = np.stack([z, np.zeros_like(z)])
    g = lift(z, sigma, mu)
    g_hist = [g]
    r_hist = [(g - y_prev).ravel()]
    trace.residual_norms.append(float(np.linalg.norm(r_hist[0])))
    y = g
    z, cache = phi(y)
    trace.alphas.append(np.ones(1))
    trace.caches.append(cache)
    trace.zs.append(z)
    for k in range(1, config.K):
        g = lift(z, sigma, mu)
        r = (g - y).ravel()
        g_hist.append(g)
        r_hist.append(r)
        trace.residual_norms.append(float(np.linalg.norm(r)))
        mk = min(m, k)
        if mk == 0:
            alpha = np.ones(1)
            y = g
        else:
            R = np.column_stack(r_hist[::-1][:mk + 1])
            alpha, ok = solve_alpha(R, ridge)
            if not ok:
                trace.fallbacks += 1
                alpha = np.ones(1)
            y = sum(a * gi for a, gi in zip(alpha, g_hist[::-1]))
        z, cache = phi(y)
        trace.alphas.append(alpha)
        trace.caches.append(cache)
        trace.zs.append(z)
    return trace
