"""Anderson acceleration for fixed-point iterations ``x = g(x)``."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class AaConfig:
    m: int = 2
    ridge: float = 1e-10

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("history depth m must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


def solve_alpha(R: np.ndarray, ridge: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Affinely constrained least squares ``min ||R a||`` s.t. ``sum(a) = 1``.

    Solves ``(R^T R + ridge * ||R^T R||_F I) x = 1`` and normalises
    ``a = x / sum(x)``.  Returns ``(alpha, ok)``; when the normal equations
    are singular or ``sum(x)`` vanishes the latest-iterate weights
    ``e_1`` are returned with ``ok=False``.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    k = R.shape[1]
    if k == 0:
        raise ValueError("residual matrix needs at least one column")
    if not np.all(np.isfinite(R)):
        raise ValueError("residual matrix has non-finite entries")
    fallback = np.zeros(k)
    fallback[0] = 1.0
    if k == 1:
        return np.ones(1), True
    G = R.T @ R
    G = G + ridge * np.linalg.norm(G) * np.eye(k)
    try:
        x = np.linalg.solve(G, np.ones(k))
    except np.linalg.LinAlgError:
        return fallback, False
    s = x.sum()
    if not np.isfinite(s) or abs(s) <= np.finfo(float).tiny or not np.all(np.isfinite(x)):
        return fallback, False
    return x / s, True


def aa_objectives(g: Callable, xs, alpha) -> tuple[float, float]:
    """Both AA objectives for a given combination of iterates.

    Returns ``||g(xbar) - xbar||`` and ``||sum a_i g(x_i) - sum a_i x_i||``,
    which coincide when ``g`` is affine and the weights sum to one.
    """
    xs = [np.asarray(x, float) for x in xs]
    xbar = sum(a * x for a, x in zip(alpha, xs))
    exact = np.linalg.norm(g(xbar) - xbar)
    mixed = np.linalg.norm(sum(a * g(x) for a, x in zip(alpha, xs)) - xbar)
    return float(exact), float(mixed)


@dataclass
class AaTrace:
    iterates: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    fallbacks: int = 0
    converged: bool = False

    @property
    def x(self) -> np.ndarray:
        return self.iterates[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual_norm"])
            for k, r in enumerate(self.residual_norms):
                w.writerow([k, repr(float(r))])


def aa_iterate(g: Callable, x0, config: AaConfig = AaConfig(), max_iters: int = 100,
               tol: float = 0.0) -> AaTrace:
    """Run Anderson-accelerated fixed-point iteration.

    ``x_1 = g(x_0)``; afterwards ``x_{k+1} = sum_i alpha_i g(x_{k-i})`` over
    the ``min(m, k) + 1`` most recent iterates.  ``residual_norms[k]`` is
    ``||g(x_k) - x_k||``; iteration stops once it drops to ``tol`` or after
    ``max_iters`` updates.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = np.array(x0, dtype=float)
    gx_hist: deque = deque(maxlen=config.m + 1)
    r_hist: deque = deque(maxlen=config.m + 1)
    trace = AaTrace()

    def evaluate(x):
        gx = np.asarray(g(x), dtype=float)
        if not np.all(np.isfinite(gx)):
            raise FloatingPointError(
                f"g returned non-finite values at iteration {len(trace.iterates) - 1}; "
                f"||x|| = {np.linalg.norm(x):.3e}"
            )
        return gx

    trace.iterates.append(x)
    gx = evaluate(x)
    for k in range(max_iters + 1):
        r = gx - x
        gx_hist.appendleft(gx)
        r_hist.appendleft(r)
        rn = float(np.linalg.norm(r))
        trace.residual_norms.append(rn)
        if rn <= tol:
            trace.converged = True
            break
        if k == max_iters:
            break
        if k == 0:
            x = gx
        else:
            alpha, ok = solve_alpha(np.column_stack(r_hist), config.ridge)
            trace.fallbacks += not ok
            trace.alphas.append(alpha)
            x = sum(a * gi for a, gi in zip(alpha, gx_hist))
        trace.iterates.append(x)
        gx = evaluate(x)
    return trace


def alpha_from_gamma(gamma) -> np.ndarray:
    """Weights on past iterates from difference-form coefficients.

    ``alpha_0 = 1 - gamma_0``, ``alpha_i = gamma_{i-1} - gamma_i`` and
    ``alpha_m = gamma_{m-1}``; the result always sums to one.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        return np.ones(1)
    return np.concatenate([[1.0 - gamma[0]], gamma[:-1] - gamma[1:], [gamma[-1]]])


def solve_gamma(w: np.ndarray, F: np.ndarray, ridge: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Unconstrained ``min ||w - F gamma||`` with the same relative ridge."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    G = F.T @ F
    scale = np.linalg.norm(G)
    if scale == 0 or not np.isfinite(scale):
        return np.zeros(F.shape[1]), False
    try:
        gamma = np.linalg.solve(G + ridge * scale * np.eye(F.shape[1]), F.T @ w)
    except np.linalg.LinAlgError:
        return np.zeros(F.shape[1]), False
    if not np.all(np.isfinite(gamma)):
        return np.zeros(F.shape[1]), False
    return gamma, True
