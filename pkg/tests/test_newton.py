import math

import mpmath
import numpy as np
import pytest

from aahqsnet.newton import (
    BenchRun,
    GnConfig,
    GnFactor,
    example331_f,
    example331_jacobian,
    gauss_newton_aa,
    gauss_newton_direction,
    gauss_newton_solve,
    gn_lm_baseline,
    gn_step,
    newton_aa_benchmark,
    newton_direction,
    run_root_aa,
    write_benchmark_csv,
)

# root of the two-variable test system, from a 50-digit mpmath solve
ROOT = (1.098159329699817e-05, 9.106146739866524)


def _stacked_tikhonov(J, r, sigma, z, mu):
    # min ||J d + r||^2 + mu ||sigma + d - z||^2 as one least-squares problem
    n = J.shape[1]
    A = np.vstack([J, np.sqrt(mu) * np.eye(n)])
    b = np.concatenate([-r, -np.sqrt(mu) * (sigma - z)])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def test_gn_step_matches_stacked_least_squares(rng):
    J = rng.normal(size=(9, 5))
    r, sigma, z = rng.normal(size=9), rng.normal(size=5), rng.normal(size=5)
    for mu in (1e-3, 1.0, 10.0):
        np.testing.assert_allclose(gn_step(sigma, z, J, r, mu), _stacked_tikhonov(J, r, sigma, z, mu),
                                   rtol=1e-9, atol=1e-12)


def test_gn_step_doctest_value():
    np.testing.assert_allclose(gn_step(np.zeros(2), np.zeros(2), np.eye(2), -np.ones(2), 1.0), [0.5, 0.5])


def test_gn_step_validation(rng):
    J = rng.normal(size=(4, 3))
    with pytest.raises(ValueError):
        gn_step(np.zeros(3), np.zeros(3), J, np.zeros(4), 0.0)
    with pytest.raises(ValueError):
        gn_step(np.zeros(3), np.zeros(3), J, np.zeros(5), 1.0)
    with pytest.raises(ValueError):
        gn_step(np.full(3, np.nan), np.zeros(3), J, np.zeros(4), 1.0)


def test_factor_solve_is_accurate(rng):
    J = rng.normal(size=(6, 4))
    f = GnFactor(J, 0.5)
    b = rng.normal(size=4)
    np.testing.assert_allclose((J.T @ J + 0.5 * np.eye(4)) @ f.solve(b), b, atol=1e-12)
    np.testing.assert_array_equal(f.solve(b), f.solve_unchecked(b))


def _linear(A):
    return lambda s: (A @ s, A)


def test_gauss_newton_is_exact_in_one_step_for_linear_maps(rng):
    A = rng.normal(size=(8, 5))
    v, z = rng.normal(size=8), rng.normal(size=5)
    mu = 0.3
    oracle = np.linalg.solve(A.T @ A + mu * np.eye(5), A.T @ v + mu * z)
    tr = gauss_newton_solve(np.zeros(5), z, v, _linear(A), config=GnConfig(mu=mu, iters=3))
    for s in tr.sigmas[1:]:
        np.testing.assert_allclose(s, oracle, atol=1e-11)
    tr = gauss_newton_aa(np.zeros(5), z, v, _linear(A), config=GnConfig(mu=mu, iters=3), m=2)
    np.testing.assert_allclose(tr.sigma, oracle, atol=1e-10)


def test_separate_forward_and_jacobian_callables(rng):
    A = rng.normal(size=(8, 5))
    v, z = rng.normal(size=8), rng.normal(size=5)
    a = gauss_newton_solve(np.ones(5), z, v, lambda s: A @ s, lambda s: A)
    b = gauss_newton_solve(np.ones(5), z, v, _linear(A))
    np.testing.assert_array_equal(a.sigma, b.sigma)


def test_aa_with_m0_reproduces_gauss_newton_exactly(small_model, rng):
    sigma_true = rng.uniform(0.7, 1.5, small_model.n_T)
    v = small_model.forward(sigma_true)
    lin = small_model.linearize
    z = np.ones(small_model.n_T)
    for beta in (1.0, 0.6):
        cfg = GnConfig(mu=1e-3, beta=beta, iters=4)
        a = gauss_newton_solve(z, z, v, lin, config=cfg)
        b = gauss_newton_aa(z, z, v, lin, config=cfg, m=0)
        for x, y in zip(a.sigmas, b.sigmas):
            np.testing.assert_array_equal(x, y)


def test_gauss_newton_decreases_objective_on_eit(small_model, rng):
    sigma_true = rng.uniform(0.7, 1.5, small_model.n_T)
    v = small_model.forward(sigma_true)
    s0 = np.ones(small_model.n_T)
    tr = gauss_newton_aa(s0, s0, v, small_model.linearize, config=GnConfig(mu=1e-4, iters=4), m=2)
    assert tr.objectives[-1] < tr.objectives[0]
    assert len(tr.sigmas) == 5 and len(tr.alphas) == 4
    for a in tr.alphas:
        assert abs(a.sum() - 1.0) < 1e-12


def test_reuse_jacobian_keeps_first_linearisation(rng):
    calls = []

    def lin(s):
        calls.append(1)
        return np.tanh(s), np.diag(1 - np.tanh(s) ** 2)

    v = np.full(3, 0.3)
    gauss_newton_solve(np.zeros(3), np.zeros(3), v, lin, config=GnConfig(iters=3), reuse_jacobian=True)
    assert len(calls) == 3  # one full linearisation, then forward-only evaluations through lin
    assert GnConfig(iters=3).iters == 3


def test_config_validation():
    with pytest.raises(ValueError):
        GnConfig(mu=0)
    with pytest.raises(ValueError):
        GnConfig(beta=1.5)
    with pytest.raises(ValueError):
        GnConfig(iters=0)


# -- two-variable test system ----------------------------------------------------

def test_system_value_at_ones():
    np.testing.assert_allclose(example331_f([1.0, 1.0]), [9999.0, -0.26434111765711536], rtol=1e-15)
    np.testing.assert_allclose(example331_f([1.0, 1.0])[1], 2 * math.exp(-1) - 1.0001, rtol=1e-15)


def test_system_jacobian_matches_finite_differences(rng):
    for _ in range(3):
        x = rng.uniform(-1, 2, 2)
        J = example331_jacobian(x)
        h = 1e-6
        fd = np.column_stack([(example331_f(x + h * e) - example331_f(x - h * e)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(J, fd, rtol=1e-6)


def test_root_oracle():
    mpmath.mp.dps = 50
    f = lambda a, b: [10 ** 4 * a * b - 1, mpmath.exp(-a) + mpmath.exp(-b) - mpmath.mpf("1.0001")]
    r = mpmath.findroot(f, (mpmath.mpf("1.1e-5"), mpmath.mpf(9)))
    np.testing.assert_allclose([float(r[0]), float(r[1])], ROOT, rtol=1e-14)
    assert np.linalg.norm(example331_f(ROOT)) < 1e-8


def test_directions_on_square_jacobian(rng):
    J = rng.normal(size=(2, 2))
    f = rng.normal(size=2)
    np.testing.assert_allclose(newton_direction(f, J), gauss_newton_direction(f, J), rtol=1e-8)
    Js = np.array([[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(newton_direction(np.array([2.0, 2.0]), Js), [-1.0, -1.0])


def test_newton_converges_near_root():
    x0 = (ROOT[0] * 1.01, ROOT[1] * 0.99)
    xs, norms = run_root_aa(x0, "NAA", m=0, max_iters=30, tol=1e-12)
    assert norms[-1] <= 1e-12
    assert len(norms) == len(xs)


def test_run_lengths_without_tolerance():
    xs, norms = run_root_aa((1.0, 1.0), "GNAA", m=2, max_iters=5)
    assert len(xs) == 6 and len(norms) == 6


def test_benchmark_records_every_configuration(tmp_path):
    runs = newton_aa_benchmark([(1.0, 1.0), (2.0, 3.0)], ms=(1, 2), max_iters=20)
    assert len(runs) == 2 * 2 * 2
    assert {(r.method, r.m, r.x0_id) for r in runs} == {(a, m, x) for a in ("NAA", "GNAA") for m in (1, 2)
                                                        for x in (0, 1)}
    write_benchmark_csv(runs, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "method,m,x0_id,iter,f_norm"
    assert len(lines) == 1 + sum(max(len(r.f_norms) - 1, 0) for r in runs)


def test_single_iteration_csv_has_one_row(tmp_path):
    runs = newton_aa_benchmark([(1.0, 1.0)], ms=(1,), max_iters=1, methods=("NAA",))
    write_benchmark_csv(runs, tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 2


def test_benchmark_halves_beta_after_failures(monkeypatch):
    import aahqsnet.newton as nt

    calls = []

    def flaky(x0, method, m, beta, max_iters, tol):
        calls.append(beta)
        if beta > 0.3:
            raise np.linalg.LinAlgError("singular")
        return [np.zeros(2)], [1.0]

    monkeypatch.setattr(nt, "run_root_aa", flaky)
    runs = nt.newton_aa_benchmark([(0.0, 0.0)], ms=(1,), methods=("NAA",))
    assert calls == [1.0, 0.5, 0.25]
    assert runs[0].beta == 0.25 and runs[0].status == "stalled"
    calls.clear()
    runs = nt.newton_aa_benchmark([(0.0, 0.0)], ms=(1,), methods=("NAA",), beta=1.0, max_retries=1)
    assert runs[0].status == "aborted" and runs[0].f_norms == []
    assert isinstance(runs[0], BenchRun)


# -- Levenberg-Marquardt baseline -------------------------------------------------

def test_lm_converges_to_least_squares_for_linear_maps(rng):
    A = rng.normal(size=(10, 4))
    v = rng.normal(size=10)
    tr = gn_lm_baseline(np.zeros(4), v, _linear(A), lm_lambda=1.0, iters=40, floor=-np.inf)
    np.testing.assert_allclose(tr.sigma, np.linalg.lstsq(A, v, rcond=None)[0], atol=1e-8)
    assert tr.objectives[-1] <= tr.objectives[0]


def test_lm_objective_non_increasing_and_lambda_bookkeeping(small_model, rng):
    sigma_true = rng.uniform(0.7, 1.5, small_model.n_T)
    v = small_model.forward(sigma_true)
    tr = gn_lm_baseline(np.ones(small_model.n_T), v, small_model.linearize, lm_lambda=1.0, iters=6)
    assert np.all(np.diff(tr.objectives) < 0)
    assert len(tr.sigmas) == 1 + sum(tr.accepted)
    lam = 1.0
    for ok, nxt in zip(tr.accepted, tr.lambdas[1:]):
        lam = lam / 10 if ok else lam * 10
        assert nxt == pytest.approx(lam)


def test_lm_rejects_non_positive_proposals():
    lin = lambda s: (s.copy(), np.eye(2))
    tr = gn_lm_baseline(np.ones(2), np.array([-1.0, 2.0]), lin, lm_lambda=1e-6, iters=3, floor=0.0)
    for s in tr.sigmas:
        assert np.all(s > 0)
    assert not tr.accepted[0]


def test_lm_validation():
    with pytest.raises(ValueError):
        gn_lm_baseline(np.ones(2), np.ones(2), _linear(np.eye(2)), lm_lambda=0.0)
