"""Gauss-Newton steps, Anderson-accelerated Gauss-Newton, and baselines.

The σ-subproblem solved here is

    f(σ) = ½‖v − F(σ)‖² + ½μ‖z − σ‖²

with the Gauss-Newton Hessian ``H = JᵀJ + μI``.  Forward operators are
passed as a single ``linearize(sigma) -> (F(sigma), J(sigma))`` callable, or
as separate ``forward_map`` / ``jacobian`` callables.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .anderson import alpha_from_gamma, solve_gamma

LINEAR_RTOL = 1e-10
EXAMPLE_BENCH_MS = (1, 2, 5, 10, 15)
# Start points for the toy benchmark.  The Jacobian is singular wherever
# x1 = x2, so (1, 1) defeats the Newton direction; the others do not.
EXAMPLE_BENCH_X0S = ((1.0, 1.0), (0.5, 2.0), (0.1, 5.0), (1e-3, 9.0))
# A benchmark run counts as converged once ``‖f‖`` drops below this.
BENCH_CONVERGED = 1e-8


@dataclass(frozen=True)
class GnConfig:
    """Penalty μ, damping β and iteration count for Gauss-Newton."""

    mu: float = 1.0
    beta: float = 1.0
    iters: int = 2

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")


def _as_linearizer(forward_map: Callable, jacobian: Callable | None) -> Callable:
    if jacobian is None:
        return forward_map
    return lambda s: (np.asarray(forward_map(s), float), np.asarray(jacobian(s), float))


class GnFactor:
    """Cholesky factor of ``JᵀJ + μI`` kept for repeated solves."""

    def __init__(self, J: np.ndarray, mu: float):
        n = J.shape[1]
        H = J.T @ J
        H[np.diag_indices(n)] += mu
        self.H = H
        self.cho = cho_factor(H, lower=False, check_finite=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        x = cho_solve(self.cho, b, check_finite=False)
        res = np.linalg.norm(self.H @ x - b)
        if not np.isfinite(res) or res > LINEAR_RTOL * np.linalg.norm(b):
            raise np.linalg.LinAlgError(f"Gauss-Newton solve residual {res:.3e} too large")
        return x

    def solve_unchecked(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self.cho, b, check_finite=False)


def _check_finite(**arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite values")


def gn_step(sigma, z_prev, J, r, mu: float, factor: GnFactor | None = None) -> np.ndarray:
    """Regularised Gauss-Newton direction.

    Solves ``(JᵀJ + μI) Δσ = −Jᵀr − μ(σ − z_prev)`` by Cholesky, where
    ``r = F(σ) − v``.

    Examples
    --------
    >>> gn_step(np.zeros(2), np.zeros(2), np.eye(2), -np.ones(2), 1.0)
    array([0.5, 0.5])
    """
    sigma = np.asarray(sigma, float)
    z_prev = np.asarray(z_prev, float)
    J = np.asarray(J, float)
    r = np.asarray(r, float)
    _check_finite(sigma=sigma, z_prev=z_prev, J=J, r=r)
    if not mu > 0:
        raise ValueError("mu must be > 0")
    if J.shape != (r.size, sigma.size):
        raise ValueError(f"Jacobian shape {J.shape} does not match ({r.size}, {sigma.size})")
    factor = factor or GnFactor(J, mu)
    return factor.solve(-(J.T @ r) - mu * (sigma - z_prev))


def objective(sigma, z, v, F_sigma, mu: float) -> float:
    """Value of ``½‖v − F(σ)‖² + ½μ‖z − σ‖²`` for a precomputed ``F(σ)``."""
    return 0.5 * float(np.sum((v - F_sigma) ** 2)) + 0.5 * mu * float(np.sum((z - sigma) ** 2))


@dataclass
class GnTrace:
    """Iterates of a (possibly accelerated) Gauss-Newton run.

    ``sigmas`` holds ``iters + 1`` entries including the start point.  For
    AA runs ``alphas[k]`` are the weights on the generic iterates
    ``σ_{k-i} + β w_{k-i+1}`` that produced ``sigmas[k + 1]``; they are
    what the reverse pass needs.
    """

    sigmas: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return self.sigmas[-1]


def _aa_newton_core(x0, step: Callable, beta: float, m: int, iters: int, ridge: float,
                    trace: GnTrace | None = None) -> GnTrace:
    """Shared Anderson-accelerated Newton-type iteration.

    ``step(x)`` returns the undamped direction ``w`` at ``x``.  The update
    ``x_{k+1} = x_k + βw_{k+1} − (E_k + βF_k)γ`` uses difference matrices
    of directions (``F_k``) and iterates (``E_k``) over the last
    ``min(m, k)`` increments.  ``m = 0`` reduces to ``x_k + βw_{k+1}``
    exactly.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    if iters < 1:
        raise ValueError("iteration count must be >= 1")
    trace = trace if trace is not None else GnTrace()
    x = np.array(x0, dtype=float)
    trace.sigmas.append(x)
    w = step(x)
    trace.steps.append(w)
    x = x + beta * w
    trace.alphas.append(np.ones(1))
    trace.sigmas.append(x)
    for k in range(1, iters):
        w = step(x)
        trace.steps.append(w)
        mk = min(m, k)
        if mk == 0:
            x_new = x + beta * w
            alpha = np.ones(1)
        else:
            ws, xs = trace.steps, trace.sigmas
            F = np.column_stack([ws[k - i] - ws[k - i - 1] for i in range(mk)])
            E = np.column_stack([xs[k - i] - xs[k - i - 1] for i in range(mk)])
            gamma, ok = solve_gamma(w, F, ridge)
            if ok:
                x_new = x + beta * w - (E + beta * F) @ gamma
                alpha = alpha_from_gamma(gamma)
            else:
                trace.fallbacks += 1
                x_new = x + beta * w
                alpha = np.ones(1)
            trace.gammas.append(gamma)
        trace.alphas.append(alpha)
        trace.sigmas.append(x_new)
        x = x_new
    return trace


def _eit_stepper(z, v, lin: Callable, fwd: Callable, mu: float, trace: GnTrace,
                 keep_factors: bool, reuse_jacobian: bool = False):
    z = np.asarray(z, float)
    v = np.asarray(v, float)
    cache: dict = {}

    def step(sigma):
        if reuse_jacobian and cache:
            Fs, J, fac = fwd(sigma), cache["J"], cache["factor"]
        else:
            Fs, J = lin(sigma)
            fac = GnFactor(J, mu)
            cache.update(J=J, factor=fac)
        trace.objectives.append(objective(sigma, z, v, Fs, mu))
        if keep_factors:
            trace.factors.append(fac)
        return gn_step(sigma, z, J, Fs - v, mu, fac)

    return step


def _forward_only(forward_map: Callable, jacobian: Callable | None) -> Callable:
    if jacobian is None:
        return lambda s: forward_map(s)[0]
    return lambda s: np.asarray(forward_map(s), float)


def gauss_newton_solve(sigma0, z, v, forward_map: Callable, jacobian: Callable | None = None,
                       config: GnConfig = GnConfig(), keep_factors: bool = False,
                       reuse_jacobian: bool = False) -> GnTrace:
    """Regularised Gauss-Newton with step ``σ_k = σ_{k-1} + βΔσ_{k-1}``.

    The Jacobian is recomputed at every iterate unless ``reuse_jacobian``
    is set.  Returns a trace with ``config.iters + 1`` iterates.
    ``objectives[k]`` is the objective at ``sigmas[k]`` for ``k < iters``.
    """
    lin = _as_linearizer(forward_map, jacobian)
    trace = GnTrace()
    step = _eit_stepper(z, v, lin, _forward_only(forward_map, jacobian), config.mu, trace,
                        keep_factors, reuse_jacobian)
    x = np.array(sigma0, dtype=float)
    trace.sigmas.append(x)
    for _ in range(config.iters):
        d = step(x)
        trace.steps.append(d)
        trace.alphas.append(np.ones(1))
        x = x + config.beta * d
        trace.sigmas.append(x)
    return trace


def gauss_newton_aa(sigma0, z, v, forward_map: Callable, jacobian: Callable | None = None,
                    config: GnConfig = GnConfig(), m: int = 2, ridge: float = 1e-10,
                    keep_factors: bool = False, reuse_jacobian: bool = False) -> GnTrace:
    """Gauss-Newton with Anderson acceleration on the σ-subproblem.

    Uses ``config.iters`` as the inner iteration count.  Degenerate
    coefficient solves fall back to the plain damped step and increment
    ``trace.fallbacks``.
    """
    lin = _as_linearizer(forward_map, jacobian)
    trace = GnTrace()
    step = _eit_stepper(z, v, lin, _forward_only(forward_map, jacobian), config.mu, trace,
                        keep_factors, reuse_jacobian)
    return _aa_newton_core(sigma0, step, config.beta, m, config.iters, ridge, trace=trace)


# -- toy 2D system -------------------------------------------------------------

def example331_f(x) -> np.ndarray:
    """Badly scaled 2x2 test system ``(1e4 x1 x2 − 1, e^{−x1} + e^{−x2} − 1.0001)``."""
    x = np.asarray(x, float)
    if x.shape != (2,) or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite 2-vector")
    return np.array([1e4 * x[0] * x[1] - 1.0, np.exp(-x[0]) + np.exp(-x[1]) - 1.0001])


def example331_jacobian(x) -> np.ndarray:
    x = np.asarray(x, float)
    if x.shape != (2,) or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite 2-vector")
    return np.array([[1e4 * x[1], 1e4 * x[0]], [-np.exp(-x[0]), -np.exp(-x[1])]])


def _solve_or_lstsq(A, b) -> np.ndarray:
    # exact solve when A is nonsingular, minimum-norm least squares otherwise
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def newton_direction(f, J) -> np.ndarray:
    """``−J⁻¹f``; minimum-norm least squares if ``J`` is singular."""
    return -_solve_or_lstsq(J, f)


def gauss_newton_direction(f, J) -> np.ndarray:
    """``−(JᵀJ)⁻¹Jᵀf``; minimum-norm least squares if ``JᵀJ`` is singular."""
    return -_solve_or_lstsq(J.T @ J, J.T @ f)


_DIRECTIONS = {"NAA": newton_direction, "GNAA": gauss_newton_direction}


@dataclass
class BenchRun:
    method: str
    m: int
    x0_id: int
    f_norms: list
    beta: float
    status: str = "stalled"


def run_root_aa(x0, method: str = "GNAA", m: int = 2, beta: float = 1.0, max_iters: int = 100,
                tol: float = 0.0, ridge: float = 1e-10, f: Callable = example331_f,
                jac: Callable = example331_jacobian):
    """AA-accelerated Newton or Gauss-Newton root finding on ``f(x) = 0``.

    Returns ``(iterates, f_norms)``.  Stops after ``max_iters`` updates or
    once ``‖f‖ <= tol``.  Raises ``np.linalg.LinAlgError`` on a singular or
    non-finite direction.
    """
    direction = _DIRECTIONS[method]
    norms: list = []

    class _Converged(Exception):
        pass

    def step(x):
        fx = f(x)
        norms.append(float(np.linalg.norm(fx)))
        if norms[-1] <= tol:
            raise _Converged
        d = direction(fx, jac(x))
        if not np.all(np.isfinite(d)):
            raise np.linalg.LinAlgError("non-finite direction")
        return d

    trace = GnTrace()
    try:
        _aa_newton_core(x0, step, beta, m, max_iters, ridge, trace=trace)
        norms.append(float(np.linalg.norm(f(trace.sigmas[-1]))))
    except _Converged:
        pass
    return trace.sigmas, norms


def newton_aa_benchmark(x0s: Sequence, ms: Sequence[int] = EXAMPLE_BENCH_MS, max_iters: int = 100,
                        beta: float = 1.0, tol: float = 1e-14, max_retries: int = 10,
                        methods: Sequence[str] = ("NAA", "GNAA")) -> list[BenchRun]:
    """Convergence curves of Newton-AA and Gauss-Newton-AA on the toy system.

    A singular or non-finite direction triggers a rerun with β halved, up
    to ``max_retries`` times; after that the run is kept with status
    ``"aborted"`` and no norms.  Other runs are ``"converged"`` if the
    final ``‖f‖ < BENCH_CONVERGED`` and ``"stalled"`` otherwise.  Overflow inside ``f`` is silenced; it
    shows up as a non-finite direction and triggers the same rerun.
    """
    runs = []
    with np.errstate(over="ignore", invalid="ignore"):
        _benchmark_into(runs, x0s, ms, max_iters, beta, tol, max_retries, methods)
    return runs


def _benchmark_into(runs, x0s, ms, max_iters, beta, tol, max_retries, methods):
    for xi, x0 in enumerate(x0s):
        for m in ms:
            for method in methods:
                b = beta
                for attempt in range(max_retries + 1):
                    try:
                        _, norms = run_root_aa(x0, method, m, b, max_iters, tol)
                        done = bool(norms) and norms[-1] < BENCH_CONVERGED
                        runs.append(BenchRun(method, int(m), xi, norms, b, "converged" if done else "stalled"))
                        break
                    except (np.linalg.LinAlgError, FloatingPointError, OverflowError):
                        if attempt == max_retries:
                            runs.append(BenchRun(method, int(m), xi, [], b, "aborted"))
                        b *= 0.5


def write_benchmark_csv(runs: Sequence[BenchRun], path) -> None:
    """One row per update: ``iter = k`` holds ``‖f(x_k)‖`` for ``k >= 1``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "m", "x0_id", "iter", "f_norm"])
        for run in runs:
            for k, fn in enumerate(run.f_norms[1:], start=1):
                w.writerow([run.method, run.m, run.x0_id, k, repr(fn)])


# -- classical baseline --------------------------------------------------------

@dataclass
class LmTrace:
    sigmas: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    accepted: list = field(default_factory=list)

    @property
    def sigma(self) -> np.ndarray:
        return self.sigmas[-1]


def gn_lm_baseline(sigma0, v, forward_map: Callable, jacobian: Callable | None = None,
                   lm_lambda: float = 1.0, iters: int = 10, floor: float = 0.0) -> LmTrace:
    """Levenberg-Marquardt on ``½‖v − F(σ)‖²``.

    Each iteration proposes ``Δσ = −(JᵀJ + λI)⁻¹Jᵀ(F(σ) − v)``.  A proposal
    that lowers the objective is accepted and λ is divided by 10; otherwise
    it is rejected and λ is multiplied by 10.  Proposals with any entry
    ``<= floor`` count as rejections, since the forward model needs a
    positive conductivity.  ``sigmas`` holds the accepted iterates.
    """
    if not lm_lambda > 0:
        raise ValueError("lm_lambda must be > 0")
    lin = _as_linearizer(forward_map, jacobian)
    v = np.asarray(v, float)
    sigma = np.array(sigma0, dtype=float)
    Fs, J = lin(sigma)
    obj = 0.5 * float(np.sum((Fs - v) ** 2))
    trace = LmTrace([sigma], [obj], [lm_lambda], [])
    lam = lm_lambda
    for _ in range(iters):
        H = J.T @ J
        H[np.diag_indices_from(H)] += lam
        d = -cho_solve(cho_factor(H, check_finite=False), J.T @ (Fs - v), check_finite=False)
        cand = sigma + d
        ok = False
        if np.all(np.isfinite(cand)) and np.all(cand > floor):
            Fc, Jc = lin(cand)
            oc = 0.5 * float(np.sum((Fc - v) ** 2))
            ok = oc < obj
        if ok:
            sigma, Fs, J, obj = cand, Fc, Jc, oc
            lam /= 10.0
            trace.sigmas.append(sigma)
            trace.objectives.append(obj)
        else:
            lam *= 10.0
        trace.lambdas.append(lam)
        trace.accepted.append(ok)
    return trace
