import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aahqsnet.metrics import (
    ANOMALY, ARTIFACT, BACKGROUND, DegenerateRangeWarning, classify, dr, eiei, evaluate, locate_pixels, mse,
    rasterize_field, ssim_mesh,
)
from aahqsnet.simdata import Anomaly, Phantom, generate_phantom, rasterize_phantom

fields = st.lists(st.floats(0.1, 3.0), min_size=4, max_size=4)


@pytest.fixture(scope="module")
def owner(small_mesh):
    return locate_pixels(small_mesh)


@pytest.fixture(scope="module")
def truth(small_mesh):
    return rasterize_phantom(small_mesh, Phantom(1.0, (Anomaly(0.3, 0.2, 0.35, 1.8),)))


def test_mse_examples():
    assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


def test_dr_examples():
    t = np.array([1.0, 1.5, 2.0])
    assert dr(t, t) == 100.0
    assert dr(2 * t, t) == pytest.approx(200.0)
    with pytest.raises(ValueError):
        dr(t, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(fields, fields, st.floats(-5, 5))
def test_dr_shift_invariant(p, t, c):
    p, t = np.array(p), np.array(t)
    if np.ptp(t) < 1e-3:
        return
    np.testing.assert_allclose(dr(p + c, t + c), dr(p, t), rtol=1e-9)


def test_raster_mask_and_values(small_mesh, owner):
    assert owner.shape == (64, 64)
    c = (np.arange(64) + 0.5) / 32 - 1
    X, Y = np.meshgrid(c, c)
    np.testing.assert_array_equal(owner[np.hypot(X, Y) > 1], -1)
    # the polygonal mesh covers every pixel comfortably inside the disk
    assert np.all(owner[np.hypot(X, Y) < 0.95] >= 0)
    vals = np.arange(small_mesh.n_T, dtype=float)
    img, mask = rasterize_field(vals, small_mesh, owner=owner)
    np.testing.assert_array_equal(img[mask], owner[mask])


def test_raster_matches_point_sampling(small_mesh, owner):
    ph = Phantom(1.0, (Anomaly(-0.2, 0.1, 0.3, 2.0),))
    img, mask = rasterize_field(rasterize_phantom(small_mesh, ph), small_mesh, owner=owner)
    c = (np.arange(64) + 0.5) / 32 - 1
    X, Y = np.meshgrid(c, c)
    direct = np.where(ph.anomalies[0].contains(np.column_stack([X.ravel(), Y.ravel()])), 2.0, 1.0).reshape(64, 64)
    # disagreements only where a pixel and its element centroid straddle the circle
    h = np.sqrt(np.pi / small_mesh.n_T)
    dist = np.abs(np.hypot(X + 0.2, Y - 0.1) - 0.3)
    assert np.all(dist[mask & (img != direct)] < 2 * h)


def test_ssim_identity_and_bounds(small_mesh, owner, truth, rng):
    assert ssim_mesh(truth, truth, small_mesh, owner=owner) == pytest.approx(1.0, abs=1e-12)
    assert ssim_mesh(np.ones_like(truth), truth, small_mesh, owner=owner) < 1.0
    for _ in range(5):
        x = rng.uniform(0.2, 2, small_mesh.n_T)
        assert ssim_mesh(x, x, small_mesh, owner=owner) == pytest.approx(1.0, abs=1e-12)
        assert abs(ssim_mesh(x, truth, small_mesh, owner=owner)) <= 1.0


def test_ssim_constant_truth(small_mesh, owner):
    ones = np.ones(small_mesh.n_T)
    assert ssim_mesh(ones, ones, small_mesh, owner=owner) == 1.0
    with pytest.warns(DegenerateRangeWarning):
        val = ssim_mesh(ones * 1.1, ones, small_mesh, owner=owner)
    assert val < 1.0


def test_classify_rules():
    truth = np.array([1.0, 1.0, 2.0, 2.0])
    pred = np.array([1.0, 1.6, 1.1, 2.0])
    np.testing.assert_array_equal(classify(pred, truth), [BACKGROUND, ARTIFACT, BACKGROUND, ANOMALY])
    np.testing.assert_array_equal(classify(pred, np.ones(4)), [BACKGROUND, ARTIFACT, ARTIFACT, ARTIFACT])
    with pytest.raises(ValueError):
        classify(pred, truth, tau=1.0)


def test_eiei_hand_computed():
    truth = np.array([1.0, 1.0, 2.0, 2.0])
    pred = np.array([1.0, 1.6, 1.1, 2.0])
    b = eiei(pred, truth)
    assert (b.n1, b.n2, b.n3) == (2, 1, 1)
    assert b.w1 == pytest.approx(1.6)
    assert b.T1 == pytest.approx(0.75)
    assert b.delta1 == pytest.approx(0.05)
    assert b.w2 == pytest.approx((1.0 + 1.1 + 2.0) / 3)
    assert b.T2 == pytest.approx(1 - 0.05 * 2 / 4)
    assert b.value == pytest.approx(1.6 * 0.75 + 4.1 / 3 * 0.975)


def test_eiei_no_artifacts():
    b = eiei(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert b.n2 == 0 and b.w1 == 0.0 and b.T1 == 1.0


def test_eiei_perfect_single_magnitude(truth, small_mesh):
    b = eiei(truth, truth, small_mesh)
    assert b.n2 == 0 and b.delta1 == 0 and b.delta3 < 1e-14
    assert b.value == pytest.approx(truth.mean(), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_eiei_perfect_closed_form(small_mesh, seed):
    t = rasterize_phantom(small_mesh, generate_phantom([99, seed]))
    b = eiei(t, t, small_mesh)
    flagged = np.abs(t - 1) > 0.25 * np.abs(t - 1).max()
    bg, an = t[~flagged], t[flagged]
    spread = lambda a: np.mean(np.abs(a - a.mean())) if a.size else 0.0
    expected = t.mean() * (1 - (bg.size * spread(bg) + an.size * spread(an)) / t.size)
    assert b.n2 == 0
    assert b.value == pytest.approx(expected, rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_eiei_breakdown_consistent(seed, tau):
    r = np.random.default_rng(seed)
    truth = np.where(r.random(40) < 0.3, r.uniform(0.2, 2), 1.0)
    pred = truth + r.normal(0, 0.2, 40)
    b = eiei(pred, truth, tau=tau)
    assert b.n1 + b.n2 + b.n3 == b.n_T == 40
    assert b.T1 == 1 - b.n2 / 40
    assert b.value == b.recompute()


def test_evaluate_keys(small_mesh, truth, owner):
    out = evaluate(truth, truth, small_mesh, owner=owner)
    assert out["mse"] == 0.0 and out["dr"] == 100.0
    assert out["ssim"] == pytest.approx(1.0)
    with pytest.warns(DegenerateRangeWarning):
        flat = evaluate(truth, np.ones(small_mesh.n_T), small_mesh, owner=owner)
    assert np.isnan(flat["dr"])
