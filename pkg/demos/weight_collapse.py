"""
Why importance weights collapse on long stays
=============================================

A greedy policy learned from logged data agrees with the clinician only on
some steps.  Every disagreement zeroes the importance weight of the whole
stay, so the patients that keep a nonzero weight are the ones with short
stays.  This script shows the effect on the confounded scenario.
"""

import numpy as np

from opebench import (
    audit_weights,
    build_ground_truth,
    estimate_behavior_policy,
    exact_value,
    matched_sequences,
    partition,
    sample_dataset,
    scenario,
    weight_series,
    wis_estimate,
)
from opebench.harness import learn_policy

GAMMA = 0.95

# frailty is hidden, so the logged state is acuity alone
gt = build_ground_truth(scenario("ConfoundedNoTreat"))
data = sample_dataset(gt, 5000, seed=0)
train, test = partition(data, 0.8, seed=0)
print(f"{len(train)} training stays, {len(test)} test stays")

# plan on a model fit to the training part
_, q, learned = learn_policy(train, GAMMA, unvisited="dead")
behavior = estimate_behavior_policy(test)

# the weights themselves
audit = audit_weights(weight_series(test, learned, behavior), test.lengths)
print(f"stays with nonzero weight: {audit.ess_count} of {audit.n_total}")
print(f"kish effective sample size: {audit.ess_kish:.1f}")
print(f"mean stay length, weighted stays: {audit.mean_length_nonzero:.2f}")
print(f"mean stay length, all stays:      {audit.mean_length_total:.2f}")

# matching stays are the same set, seen from the action side
ms = matched_sequences(test, learned)
print(f"stays where every action matches: {ms.n_matching} ({100 * ms.fraction:.1f}%)")

# what the normalized estimate says versus the truth
est = wis_estimate(test, learned, behavior, GAMMA)
print(f"WIS estimate:  {est.value:7.2f}  flags: {sorted(f.value for f in est.flags) or 'none'}")
print(f"true value:    {exact_value(gt, learned, GAMMA):7.2f}")
print(f"clinicians:    {exact_value(gt, gt.behavior, GAMMA):7.2f}")

# histogram of the nonzero weights on a log scale
print("\nweight histogram")
for lo, hi, n in zip(audit.hist_edges[:-1], audit.hist_edges[1:], audit.hist_counts):
    print(f"  [{lo:9.3g}, {hi:9.3g})  {'#' * int(n)}")
