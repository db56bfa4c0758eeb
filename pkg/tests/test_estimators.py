import numpy as np
import pytest

from conftest import make_traj, random_dataset, random_policy
from opebench.core import Dataset, discounted_returns
from opebench.estimators import (
    Flag,
    SupportViolation,
    dr_backward,
    dr_estimate,
    importance_ratios,
    is_estimate,
    kish_ess,
    model_based_estimate,
    pdis_estimate,
    run_estimators,
    wdr_estimate,
    wis_estimate,
    wpdis_estimate,
)
from opebench.policies import QFunction, fit_mdp, greedy_policy, value_iteration
from opebench.simulator import SimConfig, build_ground_truth, exact_q, exact_value, optimal_policy, sample_dataset

PLAIN = (is_estimate, pdis_estimate, wis_estimate, wpdis_estimate)


def two_step(rewards=(5.0, 100.0)):
    tr = make_traj("x", [0, 1], [0, 1], n_vaso=2).replace(rewards=np.asarray(rewards))
    return Dataset((tr,), n_states=2, action_grid=(1, 2))


# rho = (2, 0.5) on the two-step trajectory
PI_E = np.array([[1.0, 0.0], [0.75, 0.25]])
PI_B = np.array([[0.5, 0.5], [0.5, 0.5]])


# --------------------------------------------------------------------------
# ratios

def test_ratio_examples(rng):
    ds = two_step()
    ws = importance_ratios(ds[0], PI_E, PI_B)
    assert ws.ratios.tolist() == [2.0, 0.5]
    assert ws.cumulative.tolist() == [2.0, 1.0]
    assert ws.weight == 1.0
    on = importance_ratios(ds[0], PI_B, PI_B)
    assert on.cumulative.tolist() == [1.0, 1.0]
    off = importance_ratios(ds[0], np.array([[0.0, 1.0], [1.0, 0.0]]), PI_B)
    assert off.cumulative.tolist() == [0.0, 0.0]


def test_support_violation():
    ds = two_step()
    pb = np.array([[0.0, 1.0], [0.5, 0.5]])
    with pytest.raises(SupportViolation, match="step 0"):
        importance_ratios(ds[0], PI_E, pb)
    for fn in PLAIN:
        with pytest.raises(SupportViolation):
            fn(ds, PI_E, pb)


def test_shape_checks(rng):
    ds = random_dataset(rng, n=4)
    with pytest.raises(ValueError):
        is_estimate(ds, np.ones((3, 2)) / 2, np.ones((3, 2)) / 2)
    with pytest.raises(ValueError):
        is_estimate(ds, np.ones((3, 4)) / 4, np.ones((3, 4)) / 4, gamma=0.0)


# --------------------------------------------------------------------------
# hand computations

def test_dense_reward_hand_computation():
    ds = two_step()
    g = 0.9
    assert pdis_estimate(ds, PI_E, PI_B, g).value == pytest.approx(2 * 5 + g * 1 * 100)
    assert is_estimate(ds, PI_E, PI_B, g).value == pytest.approx(1 * (5 + g * 100))
    # a single trajectory: both normalized forms return its own (discounted) rewards
    assert wis_estimate(ds, PI_E, PI_B, g).value == pytest.approx(5 + g * 100)
    assert wpdis_estimate(ds, PI_E, PI_B, g).value == pytest.approx(5 + g * 100)


def test_wpdis_carries_finished_weights_forward():
    short = make_traj("a", [0], [0], n_vaso=2)
    long = make_traj("b", [0, 1], [0, 1], died=True, n_vaso=2)
    ds = Dataset((short, long), n_states=2, action_grid=(1, 2))
    pe = np.array([[1.0, 0.0], [0.0, 1.0]])
    pb = np.full((2, 2), 0.5)
    # cumulative weights: short (2, 2 carried), long (2, 4)
    expected = 0.5 * 100.0 + 0.95 * (4 / 6) * -100.0
    assert wpdis_estimate(ds, pe, pb, 0.95).value == pytest.approx(expected, rel=1e-14)


def test_terminal_rewards_make_pdis_equal_is(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=15)
        pe, pb = random_policy(rng, 3, 4), random_policy(rng, 3, 4)
        a, b = is_estimate(ds, pe, pb).value, pdis_estimate(ds, pe, pb).value
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_on_policy_collapse_exact(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=12)
        pb = random_policy(rng, 3, 4)
        mean = discounted_returns(ds, 0.9).mean()
        for fn in PLAIN:
            assert fn(ds, pb, pb, 0.9).value == pytest.approx(mean, rel=1e-12)


# --------------------------------------------------------------------------
# flags and bounds

def test_all_weights_zero():
    ds = two_step()
    pe = np.array([[0.0, 1.0], [1.0, 0.0]])
    for fn in PLAIN:
        res = fn(ds, pe, PI_B)
        assert res.value == 0.0
        assert Flag.ALL_WEIGHTS_ZERO in res.flags and not res.trustworthy
        assert res.n_nonzero == 0


def test_low_ess_flag(rng):
    ds = random_dataset(rng, n=10)
    pb = random_policy(rng, 3, 4)
    assert Flag.LOW_ESS in is_estimate(ds, pb, pb).flags
    assert Flag.LOW_ESS not in is_estimate(ds, pb, pb, ess_floor=5).flags


def test_wis_is_convex_combination_and_ess_bounded(rng):
    for _ in range(20):
        ds = random_dataset(rng, n=20)
        pe, pb = random_policy(rng, 3, 4, zeros=True), random_policy(rng, 3, 4)
        res = wis_estimate(ds, pe, pb, 0.9)
        g = discounted_returns(ds, 0.9)[res.weights > 0]
        if g.size:
            assert g.min() - 1e-9 <= res.value <= g.max() + 1e-9
        assert res.ess <= res.n_nonzero + 1e-9 <= len(ds) + 1e-9


def test_kish_ess():
    assert kish_ess([1, 1, 1, 1]) == 4.0
    assert kish_ess([1, 0, 0, 0]) == 1.0
    assert kish_ess([0, 0]) == 0.0


# --------------------------------------------------------------------------
# doubly robust

def test_zero_critic_reduces_exactly(rng):
    for _ in range(30):
        ds = random_dataset(rng, n=int(rng.integers(3, 25)))
        pe, pb = random_policy(rng, 3, 4, zeros=True), random_policy(rng, 3, 4)
        zero = np.zeros((3, 4))
        assert dr_estimate(ds, pe, pb, zero).value == pdis_estimate(ds, pe, pb).value
        assert wdr_estimate(ds, pe, pb, zero).value == wpdis_estimate(ds, pe, pb).value


def test_dr_matches_backward_recursion(rng):
    ds = random_dataset(rng, n=20)
    pe, pb = random_policy(rng, 3, 4), random_policy(rng, 3, 4)
    q = rng.normal(0, 50, size=(3, 4))
    res = dr_estimate(ds, pe, pb, q, 0.9)
    ref = [dr_backward(tr, pe, pb, q, 0.9) for tr in ds]
    np.testing.assert_allclose(res.contributions, ref, rtol=1e-12, atol=1e-9)
    assert res.value == pytest.approx(np.mean(ref), rel=1e-12)


def test_exact_critic_reduces_variance_on_policy():
    gt = build_ground_truth(SimConfig(n_treat_levels=2, n_axes=1, horizon_max=200))
    ds = sample_dataset(gt, 3000, seed=2)
    pb = gt.behavior
    q = exact_q(gt, 0.95, policy=pb)
    dr = dr_estimate(ds, pb, pb, q, 0.95)
    pdis = pdis_estimate(ds, pb, pb, 0.95)
    assert dr.contributions.var() < pdis.contributions.var()


def test_dr_unbiased_with_wrong_critic():
    cfg = SimConfig(n_acuity_levels=3, n_axes=1, n_treat_levels=2, horizon_max=3, frailty_prevalence=0.0,
                    behavior_softmax_temp=0.3)
    gt = build_ground_truth(cfg)
    pe = 0.7 * optimal_policy(gt).probs + 0.15
    truth = exact_value(gt, pe)
    bad_q = exact_q(gt, policy=pe) * 0.3 + 40.0
    vals = np.array([dr_estimate(sample_dataset(gt, 50, seed=i), pe, gt.behavior, bad_q).value for i in range(2000)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - truth) < 3 * se


def test_critic_shape_and_leakage_flag(rng):
    ds = random_dataset(rng, n=10)
    pb = random_policy(rng, 3, 4)
    with pytest.raises(ValueError):
        dr_estimate(ds, pb, pb, np.zeros((2, 4)))
    leaky = QFunction(np.zeros((3, 4)), 0.95, frozenset(ds.ids[:1]))
    assert Flag.MODEL_BIAS_WARNING in dr_estimate(ds, pb, pb, leaky).flags
    clean = QFunction(np.zeros((3, 4)), 0.95, frozenset({"elsewhere"}))
    assert Flag.MODEL_BIAS_WARNING not in wdr_estimate(ds, pb, pb, clean).flags


# --------------------------------------------------------------------------
# model based

def test_model_based_consistency(rng):
    ds = random_dataset(rng, n=40)
    mdp = fit_mdp(ds)
    q = value_iteration(mdp, 0.95, tol=1e-12)
    v = model_based_estimate(mdp, greedy_policy(q), 0.95, tol=1e-12)
    assert v == pytest.approx(float(mdp.initial @ q.q.max(axis=1)), abs=1e-8)


def test_optimistic_model_not_below_pessimistic(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=8, n_states=4)
        pe = random_policy(rng, 4, 4)
        hi = model_based_estimate(fit_mdp(ds, "alive"), pe)
        lo = model_based_estimate(fit_mdp(ds, "dead"), pe)
        assert hi >= lo - 1e-9


def test_run_estimators_subset_and_flags(rng):
    ds = random_dataset(rng, n=12)
    pb = random_policy(rng, 3, 4)
    mdp = fit_mdp(ds)
    out = run_estimators(ds, pb, pb, estimators=("is", "wis", "mb"), model=mdp)
    assert set(out) == {"is", "wis", "mb"}
    assert Flag.MODEL_BIAS_WARNING in out["mb"].flags
    with pytest.raises(ValueError):
        run_estimators(ds, pb, pb, estimators=("dr",))
    with pytest.raises(ValueError):
        run_estimators(ds, pb, pb, estimators=("xyz",))


def test_repeat_calls_bit_identical(rng):
    ds = random_dataset(rng, n=30)
    pe, pb = random_policy(rng, 3, 4), random_policy(rng, 3, 4)
    q = rng.normal(size=(3, 4))
    for fn in PLAIN:
        assert fn(ds, pe, pb).value == fn(ds, pe, pb).value
    assert wdr_estimate(ds, pe, pb, q).value == wdr_estimate(ds, pe, pb, q).value
