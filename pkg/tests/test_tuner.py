"""Trust-region Bayesian optimization loop and the Sobol baseline."""

import numpy as np
import pytest

from ampctune import gp, tuner
from ampctune.tuner import (
    TR_LENGTH_INIT,
    TR_LENGTH_MAX,
    TR_LENGTH_MIN,
    BoundsError,
    TrustRegionState,
    propose_next,
    run_bo,
    run_sobol_baseline,
    sobol_points,
    trust_region_box,
    trust_region_sides,
    update_trust_region,
)

QUAD_OPT = np.array([0.3, 0.7])


def _quadratic(theta, seed):
    return 1.0 - float(np.sum((theta - QUAD_OPT) ** 2))


def _star_discrepancy_1d(x):
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    i = np.arange(1, n + 1)
    return max(np.max(x - (i - 1) / n), np.max(i / n - x))


# ----------------------------------------------------------------- sobol ---

def test_sobol_stream_starts_at_the_midpoint():
    assert np.array_equal(sobol_points(1, 4).ravel(),
                          [0.5, 0.75, 0.25, 0.375])
    assert np.array_equal(sobol_points(5, 1).ravel(), np.full(5, 0.5))


def test_sobol_prefix_is_low_discrepancy():
    rng = np.random.default_rng(42)
    d4 = _star_discrepancy_1d(sobol_points(1, 4).ravel())
    assert d4 == 0.25
    wins4 = sum(d4 <= _star_discrepancy_1d(rng.uniform(size=4))
                for _ in range(100))
    assert wins4 >= 85  # true win rate measured at 90.7%
    d8 = _star_discrepancy_1d(sobol_points(1, 8).ravel())
    wins8 = sum(d8 <= _star_discrepancy_1d(rng.uniform(size=8))
                for _ in range(100))
    assert wins8 >= 95


# ------------------------------------------------------------ trust region ---

def test_side_product_equals_length_power_d():
    rng = np.random.default_rng(1234)
    for d in (2, 5, 11):
        for _ in range(100):
            lam = rng.uniform(0.005, 2.0, size=d)
            length = rng.uniform(TR_LENGTH_MIN, TR_LENGTH_MAX)
            sides = trust_region_sides(length, lam)
            assert abs(np.prod(sides) - length**d) <= 1e-12 * length**d


def test_side_examples():
    assert trust_region_sides(0.7, np.full(4, 1.3)) == pytest.approx(
        np.full(4, 0.7), rel=1e-12)
    sides = trust_region_sides(0.4, np.array([1.0, 4.0]))
    assert sides == pytest.approx([0.2, 0.8], rel=1e-12)
    assert np.prod(sides) == pytest.approx(0.16, rel=1e-12)


def test_box_is_clipped_to_the_unit_cube():
    tr = TrustRegionState(center=np.array([0.05, 0.95]), length=0.8)
    lo, hi = trust_region_box(tr, np.array([1.0, 1.0]))
    assert np.all(lo >= 0.0) and np.all(hi <= 1.0)
    assert np.all(hi > lo)
    assert lo[0] == 0.0 and hi[1] == 1.0  # clipped edges are exact
    assert lo == pytest.approx([0.0, 0.55], abs=1e-12)
    assert hi == pytest.approx([0.45, 1.0], abs=1e-12)


def test_box_invariant_under_lengthscale_rescaling():
    tr = TrustRegionState(center=np.array([0.4, 0.6, 0.5]), length=0.3)
    lam = np.array([0.2, 0.9, 1.7])
    lo1, hi1 = trust_region_box(tr, lam)
    lo2, hi2 = trust_region_box(tr, 7.3 * lam)
    assert lo1 == pytest.approx(lo2, abs=1e-12)
    assert hi1 == pytest.approx(hi2, abs=1e-12)


def test_trust_region_state_invariants():
    with pytest.raises(ValueError, match="at most one counter"):
        TrustRegionState(center=np.zeros(2), success_count=1, failure_count=2)
    with pytest.raises(ValueError, match="length"):
        TrustRegionState(center=np.zeros(2), length=TR_LENGTH_MIN / 4)
    with pytest.raises(ValueError, match="length"):
        TrustRegionState(center=np.zeros(2), length=2 * TR_LENGTH_MAX)
    with pytest.raises(ValueError, match="nonnegative"):
        TrustRegionState(center=np.zeros(2), success_count=-1)


def test_three_improvements_double_the_length():
    tr = TrustRegionState(center=np.zeros(2), length=0.4)
    tr, reset = update_trust_region(tr, True)
    assert (tr.success_count, tr.failure_count, tr.length) == (1, 0, 0.4)
    tr, _ = update_trust_region(tr, True)
    tr, reset = update_trust_region(tr, True)
    assert not reset
    assert tr.length == 0.8
    assert tr.success_count == 0 and tr.failure_count == 0


def test_doubling_is_capped_at_the_maximum():
    tr = TrustRegionState(center=np.zeros(2), length=1.0)
    for _ in range(3):
        tr, _ = update_trust_region(tr, True)
    assert tr.length == TR_LENGTH_MAX


def test_three_failures_halve_the_length():
    tr = TrustRegionState(center=np.zeros(2), length=0.4)
    tr, _ = update_trust_region(tr, False)
    tr, _ = update_trust_region(tr, False)
    assert (tr.success_count, tr.failure_count) == (0, 2)
    tr, reset = update_trust_region(tr, False)
    assert not reset and tr.length == 0.2


def test_success_and_failure_zero_each_other():
    tr = TrustRegionState(center=np.zeros(2))
    tr, _ = update_trust_region(tr, False)
    tr, _ = update_trust_region(tr, True)
    assert (tr.success_count, tr.failure_count) == (1, 0)
    tr, _ = update_trust_region(tr, False)
    assert (tr.success_count, tr.failure_count) == (0, 1)


def test_collapse_below_minimum_signals_reset():
    tr = TrustRegionState(center=np.zeros(2), length=TR_LENGTH_MIN)
    tr, reset = update_trust_region(tr, False)
    tr, reset = update_trust_region(tr, False)
    assert not reset
    tr, reset = update_trust_region(tr, False)
    assert reset
    assert tr.length == TR_LENGTH_INIT
    assert tr.success_count == 0 and tr.failure_count == 0


# ---------------------------------------------------------------- propose ---

def _dominant_model():
    x = np.array([[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]])
    y = np.array([1.0, -1.0, -1.0])
    model = gp.GpModel(lengthscales=np.array([0.01, 0.01]), signal_var=0.04,
                       noise_var=1e-10, mean=-1.0, x=x, y=y)
    tr = TrustRegionState(center=np.array([0.5, 0.5]), length=0.4)
    return model, tr


def test_single_candidate_is_returned_unconditionally():
    model, tr = _dominant_model()
    for seed in (0, 1, 99):
        prop = propose_next(model, tr, n_candidates=1, seed=seed)
        assert prop == pytest.approx([0.5, 0.5], abs=1e-12)


def test_dominating_training_point_wins_thompson_sampling():
    model, tr = _dominant_model()
    # Stipulation: every other candidate sits mu + 5*sigma below the best y.
    lo, hi = trust_region_box(tr, model.lengthscales)
    cands = lo + sobol_points(2, 64) * (hi - lo)
    mu, var = gp.posterior(model, cands)
    others = ~np.all(np.isclose(cands, [0.5, 0.5], atol=1e-9), axis=1)
    assert np.max(mu[others] + 5.0 * np.sqrt(var[others])) < 1.0
    wins = sum(
        np.allclose(propose_next(model, tr, 64, seed=s), [0.5, 0.5], atol=1e-9)
        for s in range(100))
    assert wins >= 99


def test_proposal_is_seed_deterministic():
    model, tr = _dominant_model()
    a = propose_next(model, tr, 256, seed=7)
    b = propose_next(model, tr, 256, seed=7)
    assert np.array_equal(a, b)


def test_proposal_invariant_under_monotone_draw_transform(monkeypatch):
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(6, 2))
    model = gp.GpModel(lengthscales=np.array([0.4, 0.3]), signal_var=1.0,
                       noise_var=0.05, mean=0.0, x=x, y=rng.normal(size=6))
    tr = TrustRegionState(center=np.array([0.5, 0.5]), length=0.6)
    baseline = propose_next(model, tr, 128, seed=11)
    orig = gp.sample_joint

    def warped(model, cands, seed):
        return np.exp(4.0 * orig(model, cands, seed))  # strictly increasing

    monkeypatch.setattr(tuner.gp, "sample_joint", warped)
    assert np.array_equal(propose_next(model, tr, 128, seed=11), baseline)


# ----------------------------------------------------------------- run_bo ---

def test_run_bo_starts_at_theta_init_then_perturbs_inside_region():
    res = run_bo(_quadratic, np.array([0.5, 0.5]), np.zeros(2), np.ones(2),
                 n_episodes=4, seed=0)
    assert np.array_equal(res.records[0].theta, [0.5, 0.5])
    for rec in res.records[1:3]:
        assert not np.array_equal(rec.theta, [0.5, 0.5])
        assert np.all(np.abs(rec.theta - 0.5) <= TR_LENGTH_INIT / 2 + 1e-12)
    episodes = [r.episode for r in res.records]
    assert episodes == [1, 2, 3, 4]


def test_run_bo_finds_the_quadratic_maximizer():
    hits = 0
    for seed in range(5):
        res = run_bo(_quadratic, np.array([0.5, 0.5]), np.zeros(2),
                     np.ones(2), n_episodes=30, seed=seed)
        hits += np.max(np.abs(res.best_theta - QUAD_OPT)) <= 0.1
    assert hits >= 4


def test_run_bo_constant_objective_shrinks_the_region():
    res = run_bo(lambda t, s: 0.5, np.array([0.5, 0.5]), np.zeros(2),
                 np.ones(2), n_episodes=14, seed=0)
    assert np.all(res.incumbent_rewards == 0.5)
    assert np.all(r.reward == 0.5 for r in res.records)
    expected_lengths = np.repeat([0.4, 0.2, 0.1, 0.05, 0.025], 3)[:14]
    assert np.array_equal(res.tr_lengths, expected_lengths)
    assert np.all(res.incumbent_thetas == 0.5)


def test_run_bo_incumbent_trace_is_non_decreasing_and_in_bounds():
    def noisy(theta, seed):
        return _quadratic(theta, seed) + 0.05 * np.random.default_rng(seed).normal()

    lower = np.array([-1.0, 0.0])
    upper = np.array([2.0, 3.0])
    res = run_bo(noisy, np.array([0.5, 1.5]), lower, upper,
                 n_episodes=12, seed=4)
    assert np.all(np.diff(res.incumbent_rewards) >= 0)
    for rec in res.records:
        assert np.all(rec.theta >= lower) and np.all(rec.theta <= upper)


def test_run_bo_is_deterministic_per_seed():
    args = (_quadratic, np.array([0.5, 0.5]), np.zeros(2), np.ones(2))
    a = run_bo(*args, n_episodes=8, seed=3)
    b = run_bo(*args, n_episodes=8, seed=3)
    for x, y in zip(a.records, b.records):
        assert np.array_equal(x.theta, y.theta)
        assert x.reward == y.reward and x.seed == y.seed
    assert np.array_equal(a.incumbent_rewards, b.incumbent_rewards)


def test_run_bo_objective_failures_become_zero_reward_records():
    def boom(theta, seed):
        raise RuntimeError("episode failed")

    res = run_bo(boom, np.array([0.5, 0.5]), np.zeros(2), np.ones(2),
                 n_episodes=5, seed=1)
    assert [r.reward for r in res.records] == [0.0] * 5
    assert res.best_reward == 0.0


def test_run_bo_validates_inputs():
    with pytest.raises(ValueError, match="inside the bounds"):
        run_bo(_quadratic, np.array([2.0, 0.5]), np.zeros(2), np.ones(2),
               n_episodes=4, seed=0)
    with pytest.raises(ValueError, match="at least 2"):
        run_bo(_quadratic, np.array([0.5, 0.5]), np.zeros(2), np.ones(2),
               n_episodes=1, seed=0)
    with pytest.raises(BoundsError):
        run_bo(_quadratic, np.array([0.5, 0.5]), np.zeros(2),
               np.array([1.0, 0.0]), n_episodes=4, seed=0)
    with pytest.raises(ValueError, match="dimension"):
        run_bo(_quadratic, np.array([0.5]), np.zeros(2), np.ones(2),
               n_episodes=4, seed=0)


# ------------------------------------------------------------------ sobol ---

def test_sobol_baseline_visits_the_fixed_stream():
    lower = np.array([1.0, -2.0])
    upper = np.array([3.0, 2.0])
    theta_nom = np.array([2.0, 0.0])  # box midpoint

    seen = {}

    def record(theta, seed):
        return -float(np.sum((theta - theta_nom) ** 2))

    a = run_sobol_baseline(record, theta_nom, lower, upper, n_episodes=6, seed=0)
    b = run_sobol_baseline(record, theta_nom, lower, upper, n_episodes=6, seed=0)
    assert np.array_equal(a.records[0].theta, theta_nom)  # midpoint first
    for x, y in zip(a.records, b.records):
        assert np.array_equal(x.theta, y.theta)
    for rec in a.records:
        assert np.all(rec.theta >= lower) and np.all(rec.theta <= upper)
    assert np.all(np.diff(a.incumbent_rewards) >= 0)
    assert a.best_reward == 0.0  # the midpoint itself is optimal here
