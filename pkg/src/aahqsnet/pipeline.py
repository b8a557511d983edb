"""Unrolled half-quadratic splitting reconstructors and their trainer.

Each fold runs a Gauss-Newton(-AA) solve of the σ-subproblem followed by
learned proximal gradient descent (optionally Anderson-accelerated) on the
z-subproblem.  One network is shared by all folds.

Reverse pass conventions: the Jacobian is held fixed inside each
Gauss-Newton step, and all Anderson mixing weights are treated as
constants.  For a linear forward operator and no acceleration the
gradient is exact.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .newton import GnConfig, GnTrace, gauss_newton_aa
from .proxnet import LpgdConfig, LpgdTrace, ProxNetParams, aa_lpgd, prox_backward


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    """Unrolling hyperparameters.

    ``floor`` clips conductivities from below before each forward
    evaluation so that intermediate iterates stay admissible.
    """

    K: int = 8
    K1: int = 2
    K2: int = 2
    m1: int = 2
    m2: int = 2
    mu: float = 1.0
    beta: float = 1.0
    aa_enabled_gn: bool = True
    aa_enabled_lpgd: bool = True
    reuse_jacobian: bool = False
    floor: float = 1e-2
    ridge: float = 1e-10

    def __post_init__(self):
        if min(self.K, self.K1, self.K2) < 1:
            raise ValueError("K, K1 and K2 must be >= 1")
        if min(self.m1, self.m2) < 0:
            raise ValueError("m1 and m2 must be >= 0")
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.floor < 0 or self.ridge < 0:
            raise ValueError("floor and ridge must be >= 0")

    @property
    def eff_m1(self) -> int:
        return self.m1 if self.aa_enabled_gn else 0

    @property
    def eff_m2(self) -> int:
        return self.m2 if self.aa_enabled_lpgd else 0

    def without_aa(self) -> "ReconConfig":
        return replace(self, aa_enabled_gn=False, aa_enabled_lpgd=False)


VARIANTS = {
    "hqsnet": (False, False),
    "aa_gn": (True, False),
    "aa_lpgd": (False, True),
    "aa-hqsnet": (True, True),
}


def variant_config(name: str, base: ReconConfig = ReconConfig()) -> ReconConfig:
    """Ablation variant by name: hqsnet, aa_gn, aa_lpgd or aa-hqsnet."""
    try:
        gn, lp = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
    return replace(base, aa_enabled_gn=gn, aa_enabled_lpgd=lp)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")


class LinearForward:
    """Synthetic forward operator ``F(σ) = Aσ`` with constant Jacobian."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.n_T = self.A.shape[1]

    def forward(self, sigma):
        return self.A @ np.asarray(sigma, dtype=float)

    def linearize(self, sigma, floor=None):
        return self.forward(sigma), self.A


@dataclass
class ReconResult:
    sigma: np.ndarray
    sigmas: list
    zs: list
    gn_traces: list = field(default_factory=list)
    lpgd_traces: list = field(default_factory=list)
    config: ReconConfig | None = None


def _linearizer(model, floor: float):
    return lambda s: model.linearize(s, floor=floor)


def aa_hqsnet_reconstruct(model, v, params: ProxNetParams, config: ReconConfig = ReconConfig(),
                          sigma0=None, record: bool = False) -> ReconResult:
    """Reconstruct σ from measurements ``v``.

    ``sigma0`` defaults to the unit background; ``z0 = sigma0``.  With
    ``record=True`` the per-fold traces needed by :func:`backward` are
    kept.
    """
    v = np.asarray(getattr(v, "v", v), dtype=float)
    sigma = np.ones(model.n_T) if sigma0 is None else np.array(sigma0, dtype=float)
    z = sigma.copy()
    lin = _linearizer(model, config.floor)
    gn_cfg = GnConfig(mu=config.mu, beta=config.beta, iters=config.K1)
    lp_cfg = LpgdConfig(mu=config.mu, m=config.eff_m2, K=config.K2)
    result = ReconResult(sigma, [sigma], [z], config=config)
    for _ in range(config.K):
        gtr = gauss_newton_aa(sigma, z, v, lin, config=gn_cfg, m=config.eff_m1, ridge=config.ridge,
                              keep_factors=record, reuse_jacobian=config.reuse_jacobian)
        sigma = gtr.sigma
        ltr = aa_lpgd(params, z, sigma, lp_cfg, ridge=config.ridge)
        z = ltr.z
        result.sigmas.append(sigma)
        result.zs.append(z)
        if record:
            result.gn_traces.append(gtr)
            result.lpgd_traces.append(ltr)
    result.sigma = sigma
    return result


def hqsnet_reconstruct(model, v, params: ProxNetParams, config: ReconConfig = ReconConfig(),
                       sigma0=None, record: bool = False) -> ReconResult:
    """Unaccelerated reconstructor: plain Gauss-Newton and plain LPGD."""
    return aa_hqsnet_reconstruct(model, v, params, config.without_aa(), sigma0, record)


# -- reverse pass --------------------------------------------------------------

def _gn_backward(tr: GnTrace, sigma_bar: np.ndarray, beta: float, mu: float):
    """Adjoint of one Gauss-Newton(-AA) solve; returns ``(σ_in_bar, z_bar)``."""
    K = len(tr.steps)
    s_bar = [np.zeros_like(sigma_bar) for _ in range(K + 1)]
    g_bar = [np.zeros_like(sigma_bar) for _ in range(K)]
    s_bar[K] = sigma_bar.copy()
    z_bar = np.zeros_like(sigma_bar)
    for j in range(K - 1, -1, -1):
        # sigma_{j+1} = sum_i alpha_i (sigma_{j-i} + beta w_{j-i+1})
        for i, a in enumerate(tr.alphas[j]):
            g_bar[j - i] += a * s_bar[j + 1]
        s_bar[j] += (1.0 - beta) * g_bar[j]
        z_bar += beta * mu * tr.factors[j].solve_unchecked(g_bar[j])
    return s_bar[0], z_bar


def _lpgd_backward(params: ProxNetParams, tr: LpgdTrace, z_bar_out: np.ndarray, mu: float,
                   theta_bar: np.ndarray):
    """Adjoint of one LPGD(-AA) solve; returns ``(z_in_bar, σ_bar)``."""
    K = len(tr.caches)
    z_bar = [np.zeros_like(z_bar_out) for _ in range(K + 1)]
    G_bar = [np.zeros((2, z_bar_out.size)) for _ in range(K)]
    z_bar[K] = z_bar_out.copy()
    sigma_bar = np.zeros_like(z_bar_out)
    for j in range(K, 0, -1):
        pg, y_bar = prox_backward(params, tr.caches[j - 1], z_bar[j])
        theta_bar += pg.to_vector()
        for i, a in enumerate(tr.alphas[j - 1]):
            G_bar[j - 1 - i] += a * y_bar
        G = G_bar[j - 1]
        z_bar[j - 1] += G[0] + mu * G[1]
        sigma_bar -= mu * G[1]
    return z_bar[0], sigma_bar


def backward(params: ProxNetParams, result: ReconResult, sigma_bar) -> np.ndarray:
    """Gradient of ``<sigma_bar, σ̂>`` with respect to the flat parameters."""
    cfg = result.config
    if not result.gn_traces or len(result.gn_traces) != cfg.K:
        raise ValueError("reconstruction was not recorded; call with record=True")
    theta_bar = np.zeros(params.size)
    s_bar = np.asarray(sigma_bar, dtype=float).copy()
    z_bar = np.zeros_like(s_bar)
    for i in range(cfg.K - 1, -1, -1):
        if np.any(z_bar):
            z_in_bar, s_extra = _lpgd_backward(params, result.lpgd_traces[i], z_bar, cfg.mu, theta_bar)
            s_bar = s_bar + s_extra
        else:
            z_in_bar = np.zeros_like(z_bar)
        s_bar, z_from_gn = _gn_backward(result.gn_traces[i], s_bar, cfg.beta, cfg.mu)
        z_bar = z_in_bar + z_from_gn
    return theta_bar


def sample_loss_and_grad(model, v, sigma_true, params: ProxNetParams, config: ReconConfig,
                         sigma0=None):
    """Squared error ``‖σ̂ − σ‖²`` of one sample and its parameter gradient."""
    res = aa_hqsnet_reconstruct(model, v, params, config, sigma0, record=True)
    diff = res.sigma - sigma_true
    loss = float(diff @ diff)
    if not math.isfinite(loss):
        return loss, None
    return loss, backward(params, res, 2.0 * diff)


def dataset_loss(model, vs, sigmas, params, config, threads: int = 1) -> float:
    """Mean squared reconstruction error over samples."""
    def one(i):
        s = aa_hqsnet_reconstruct(model, vs[i], params, config).sigma
        return float(np.sum((s - sigmas[i]) ** 2))
    if len(vs) == 0:
        return 0.0
    return float(np.mean(_ordered_map(one, range(len(vs)), threads)))


def _ordered_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Adam:
    """Adam optimiser on a flat parameter vector."""

    def __init__(self, n: int, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: ProxNetParams
    losses: list
    recon_config: ReconConfig
    train_config: TrainConfig

    def manifest(self) -> dict:
        return {
            "recon_config": asdict(self.recon_config),
            "train_config": asdict(self.train_config),
            "epoch_losses": list(self.losses),
        }


def train(model, vs, sigmas, params: ProxNetParams, recon_config: ReconConfig = ReconConfig(),
          train_config: TrainConfig = TrainConfig(), sample_ids=None, callback=None) -> TrainResult:
    """Fit the shared network by minibatch Adam on the mean squared error.

    ``losses[e]`` is the mean per-sample loss seen during epoch ``e``
    (each evaluated before that minibatch's update).  Shuffling is driven
    by ``train_config.seed``; gradients within a batch are summed in
    sample order, so results do not depend on ``threads``.
    """
    vs = [np.asarray(getattr(v, "v", v), dtype=float) for v in vs]
    sigmas = [np.asarray(s, dtype=float) for s in sigmas]
    n = len(vs)
    if n == 0 or n != len(sigmas):
        raise ValueError("need a non-empty, equal number of measurements and ground truths")
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    tc = train_config
    rng = np.random.default_rng(tc.seed)
    theta = params.to_vector()
    opt = Adam(theta.size, tc.lr, tc.betas, tc.eps)
    losses = []
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            batch = order[start:start + tc.batch_size]
            current = params.with_vector(theta)
            outs = _ordered_map(
                lambda i: sample_loss_and_grad(model, vs[i], sigmas[i], current, recon_config),
                batch, tc.threads)
            grad = np.zeros_like(theta)
            for i, (loss, g) in zip(batch, outs):
                if not math.isfinite(loss) or g is None or not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite loss or gradient at sample {ids[i]} (epoch {epoch})")
                total += loss
                grad += g
            theta = opt.step(theta, grad / len(batch))
        losses.append(total / n)
        if callback is not None:
            callback(epoch, losses[-1])
    return TrainResult(params.with_vector(theta), losses, recon_config, tc)


def end_to_end_gradcheck(A, vs, sigmas, params: ProxNetParams, config: ReconConfig,
                         h: float = 1e-6, n_checks: int | None = None, seed: int = 0) -> float:
    """Normwise relative discrepancy between trainer and FD gradients.

    The loss is the mean squared error over the given samples with
    ``F(σ) = Aσ``.  Returns ``‖g − fd‖ / ‖g‖`` over the checked entries,
    with central differences of step ``h``.  ``n_checks`` limits the
    number of randomly chosen parameters.
    """
    model = LinearForward(A)
    theta = params.to_vector()
    N = len(vs)

    def loss_at(t):
        p = params.with_vector(t)
        return sum(float(np.sum((aa_hqsnet_reconstruct(model, v, p, config).sigma - s) ** 2))
                   for v, s in zip(vs, sigmas)) / N

    grad = np.zeros_like(theta)
    for v, s in zip(vs, sigmas):
        grad += sample_loss_and_grad(model, v, s, params, config)[1] / N
    idx = np.arange(theta.size)
    if n_checks is not None and n_checks < theta.size:
        idx = np.random.default_rng(seed).choice(theta.size, n_checks, replace=False)
    fd = np.empty(idx.size)
    for k, i in enumerate(idx):
        e = np.zeros_like(theta)
        e[i] = h
        fd[k] = (loss_at(theta + e) - loss_at(theta - e)) / (2 * h)
    scale = np.linalg.norm(grad[idx])
    diff = np.linalg.norm(grad[idx] - fd)
    if scale == 0:
        return float(diff)
    return float(diff / scale)
