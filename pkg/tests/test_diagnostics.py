import numpy as np
import pytest

from conftest import make_traj, random_dataset, random_policy
from opebench.core import Dataset, DatasetError, flat_action
from opebench.diagnostics import (
    audit_weights,
    dose_deviations,
    dose_histogram,
    matched_sequences,
    recommended_actions,
    u_curve,
    weight_series,
)
from opebench.estimators import Flag, WeightSeries
from opebench.harness import learn_policy
from opebench.policies import TabularPolicy, baseline_policy, estimate_behavior_policy
from opebench.representation import AxisBins, DoseBins, discretize, fit_dose_bins, fit_kmeans
from opebench.simulator import SimConfig, build_ground_truth, sample_dataset, scenario


def series(weights):
    return [WeightSeries(np.array([w]), np.array([w])) for w in weights]


# --------------------------------------------------------------------------
# weight audits

def test_audit_equal_and_single_weights():
    a = audit_weights(series([1.0] * 40))
    assert a.ess_kish == 40 and a.ess_count == 40 and a.n_total == 40
    assert not a.flags
    b = audit_weights(series([1.0, 0.0, 0.0, 0.0]))
    assert (b.ess_count, b.ess_kish) == (1, 1.0)
    assert Flag.LOW_ESS in b.flags
    c = audit_weights(series([0.0, 0.0]))
    assert Flag.ALL_WEIGHTS_ZERO in c.flags and np.isnan(c.mean_length_nonzero)
    with pytest.raises(ValueError):
        audit_weights([])


def test_audit_invariants(rng):
    for _ in range(20):
        w = rng.exponential(size=30) * (rng.random(30) < 0.6)
        a = audit_weights(series(w), ess_floor=5)
        assert a.ess_kish <= a.n_nonzero <= a.n_total
        assert a.hist_counts.sum() == a.n_nonzero
        assert a.max_weight == w.max()


def test_greedy_policy_has_few_long_matches():
    gt = build_ground_truth(scenario("ConfoundedNoTreat"))
    ds = sample_dataset(gt, 2000, seed=0)
    _, _, pol = learn_policy(ds, unvisited="dead")
    pb = estimate_behavior_policy(ds)
    a = audit_weights(weight_series(ds, pol, pb), ds.lengths)
    assert a.ess_count < 0.2 * a.n_total
    assert a.mean_length_nonzero < a.mean_length_total
    as_dict = a.as_dict()
    assert as_dict["ess_count"] == a.ess_count and isinstance(as_dict["flags"], list)


# --------------------------------------------------------------------------
# matched sequences

def test_matched_trivial_cases():
    trajs = (make_traj("a", [0, 1], [2, 3]), make_traj("b", [0, 0, 1], [2, 2, 3]))
    ds = Dataset(trajs, n_states=2, action_grid=(5, 5))
    pb = estimate_behavior_policy(ds)
    same = matched_sequences(ds, baseline_policy("mostcommon", behavior=pb))
    assert same.n_matching == same.n_total == 2
    assert same.mean_length_matching == 2.5
    none = matched_sequences(ds, TabularPolicy.from_actions([0, 0], 25))
    assert none.n_matching == 0 and np.isnan(none.mean_length_matching)
    with pytest.raises(ValueError):
        matched_sequences(ds, baseline_policy("random", 2, 25))


def test_matched_equals_nonzero_weights(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=30)
        pol = TabularPolicy.from_actions(rng.integers(0, 4, 3), 4)
        pb = random_policy(rng, 3, 4)
        ms = matched_sequences(ds, pol)
        assert ms.n_matching == audit_weights(weight_series(ds, pol, pb)).n_nonzero


def _exact_match_fraction(gt, actions):
    """P(every logged action equals ``actions[s]``) under the simulator, by DP."""
    cfg = gt.config
    P, pb = gt.model.transitions, gt.behavior.probs
    S = gt.n_true_states
    m = np.ones(S)  # beyond the last step nothing is left to match
    for _ in range(cfg.horizon_max):
        step = np.empty(S)
        for s in range(S):
            a = actions[s]
            cont = P[s, a, :S] @ m + P[s, a, S:].sum()
            step[s] = pb[s, a] * cont
        m = step
    return float(gt.model.initial @ m)


def test_matching_fraction_follows_exact_decay():
    base = SimConfig(n_treat_levels=3, behavior_softmax_temp=0.2)
    exact, seen = [], []
    for h in (2, 4, 8, 16):
        gt = build_ground_truth(SimConfig(**{**base.to_json(), "horizon_max": h}))
        acts = gt.behavior.greedy_actions()
        ds = sample_dataset(gt, 4000, seed=h)
        frac = matched_sequences(ds, TabularPolicy.from_actions(acts, gt.n_actions)).fraction
        p = _exact_match_fraction(gt, acts)
        assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / 4000) + 1e-3
        exact.append(p)
        seen.append(frac)
    # most stays end within a few steps, so only the early drop is resolvable by sampling
    assert np.all(np.diff(exact) < 0) and seen[0] > seen[1]


# --------------------------------------------------------------------------
# U-curves

def _replica_dataset(n=60):
    """Doses equal to their bin medians; state id equals the logged action."""
    rng = np.random.default_rng(1)
    levels = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    trajs = []
    for i in range(n):
        T = 3
        fb, vb = rng.integers(0, 5, T), rng.integers(0, 5, T)
        a = flat_action(fb, vb)
        trajs.append(make_traj(f"p{i}", a, a, died=i % 4 == 0, rng=rng, doses=(levels[fb], levels[vb])))
    return Dataset(tuple(trajs), n_states=25, action_grid=(5, 5))


LEVEL_BINS = DoseBins(*(AxisBins((1.5, 2.5, 3.5), (0.0, 1.0, 2.0, 3.0, 4.0)),) * 2)


def test_replica_policy_has_zero_deviation():
    ds = _replica_dataset()
    db = LEVEL_BINS
    replica = TabularPolicy.from_actions(np.arange(25), 25)
    for axis in ("fluid", "vaso"):
        dev, _ = dose_deviations(ds, replica, db, axis)
        assert np.all(dev == 0)
        curve = u_curve(ds, replica, db, axis)
        assert curve.counts.sum() == len(ds)


def test_u_curve_counts_rates_and_empty_bins():
    ds = _replica_dataset()
    db = LEVEL_BINS
    pol = baseline_policy("noaction", 25, 25)
    curve = u_curve(ds, pol, db, "vaso", n_dev_bins=6, dev_range=(-8.0, 4.0), trim=0.0)
    dev, died = dose_deviations(ds, pol, db, "vaso")
    assert curve.counts.sum() == len(ds)
    assert curve.deaths.sum() == died.sum()
    rate = curve.mortality
    # deviations are never positive for the no-treatment policy
    assert np.all(curve.counts[curve.edges[:-1] >= 0.0001] == 0)
    assert np.isnan(rate[-1])
    ok = ~np.isnan(rate)
    assert np.all((rate[ok] >= 0) & (rate[ok] <= 1))
    rows = curve.rows()
    assert rows[-1]["count"] == 0 and rows[-1]["mortality"] is None
    assert curve.to_csv().splitlines()[0] == "bin_low,bin_high,count,mortality"


def test_trim_clips_outliers_into_end_bins():
    ds = _replica_dataset()
    db = LEVEL_BINS
    pol = baseline_policy("random", 25, 25)
    full = u_curve(ds, pol, db, "fluid", trim=0.0)
    trimmed = u_curve(ds, pol, db, "fluid", trim=0.1)
    assert full.counts.sum() == trimmed.counts.sum() == len(ds)
    assert trimmed.edges[0] > full.edges[0] and trimmed.edges[-1] < full.edges[-1]
    with pytest.raises(ValueError):
        u_curve(ds, pol, db, "fluid", trim=0.5)
    with pytest.raises(ValueError):
        u_curve(ds, pol, db, "fluid", n_dev_bins=0)


def test_stochastic_recommendations_are_seeded():
    ds = _replica_dataset()
    pol = baseline_policy("random", 25, 25)
    a = recommended_actions(ds, pol, np.random.default_rng(3))
    b = recommended_actions(ds, pol, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_no_action_mortality_rises_with_negative_deviation():
    gt = build_ground_truth(scenario("ConfoundedNoTreat"))
    ds = sample_dataset(gt, 4000, seed=1)
    cm = fit_kmeans(ds.observations(), 8, seed=0)
    db = fit_dose_bins(ds)
    dd = discretize(ds, cm, db)
    curve = u_curve(dd, baseline_policy("noaction", 8, dd.n_actions), db, "vaso")
    rate = curve.mortality
    assert rate[0] > rate[curve.zero_bin]


def test_u_curve_needs_discretized_data():
    ds = Dataset(tuple(make_traj("a", [0], [0]).replace(state_ids=None, fluid_bins=None, vaso_bins=None,
                                                         actions=None) for _ in range(1)))
    with pytest.raises(DatasetError, match="discretized"):
        u_curve(ds, baseline_policy("noaction", 1, 25), None)


def test_u_shape_predicate():
    from opebench.diagnostics import UCurve
    edges = np.linspace(-3, 3, 4)
    assert UCurve("vaso", edges, np.array([10, 10, 10]), np.array([5, 1, 4])).is_u_shaped()
    assert not UCurve("vaso", edges, np.array([10, 10, 10]), np.array([5, 1, 1])).is_u_shaped()
    # empty outer bins are skipped; too few filled bins is never a U
    assert not UCurve("vaso", edges, np.array([0, 10, 10]), np.array([0, 1, 4])).is_u_shaped()


# --------------------------------------------------------------------------
# dose histograms

def test_histogram_all_zero():
    ds = Dataset((make_traj("a", [0, 0], [0, 0]),))
    h = dose_histogram(ds, "vaso")
    assert h.zero_count == 2 and h.counts.size == 0


def test_histogram_quartile_medians():
    doses = np.arange(1.0, 9.0)
    tr = make_traj("a", [0] * 8, [0] * 8, doses=(np.zeros(8), doses))
    h = dose_histogram(Dataset((tr,)), "vaso", n_bins=4)
    assert h.bin_medians == (1.5, 3.5, 5.5, 7.5)
    assert h.counts.sum() + h.zero_count == 8
    assert h.as_dict()["zero_count"] == 0


def test_histogram_exponential_medians_negligible(rng):
    doses = rng.exponential(1.0, 10_000)
    tr = make_traj("a", [0] * doses.size, [0] * doses.size, doses=(doses, np.zeros(doses.size)))
    h = dose_histogram(Dataset((tr,)), "fluid")
    assert h.bin_medians[0] < 0.1 * doses.max()
    with pytest.raises(ValueError):
        dose_histogram(Dataset((tr,)), "oxygen")
