"""
U-shaped mortality curves and what they do not prove
====================================================

Bin patients by how far the given dose strayed from the recommended one and
plot mortality per bin.  A dip at zero deviation is often read as evidence
that the recommendations are good.  Here a no-treatment policy and a random
policy produce the same picture on confounded data.
"""

import numpy as np

from opebench import (
    baseline_policy,
    build_ground_truth,
    discretize,
    fit_dose_bins,
    fit_kmeans,
    partition,
    sample_dataset,
    scenario,
    u_curve,
)
from opebench.harness import learn_policy

gt = build_ground_truth(scenario("ConfoundedNoTreat"))
data = sample_dataset(gt, 20000, seed=0)
train, test = partition(data, 0.8, seed=0)

# states from k-means on the training observations, doses binned by quartile
cm = fit_kmeans(train.observations(), 12, seed=0)
bins = fit_dose_bins(train)
train, test = discretize(train, cm, bins), discretize(test, cm, bins)

_, _, learned = learn_policy(train, unvisited="dead")
policies = {
    "learned": learned,
    "random": baseline_policy("random", cm.k, test.n_actions),
    "noaction": baseline_policy("noaction", cm.k, test.n_actions),
}


def show(name, curve):
    print(f"\n{name} ({curve.axis}); U-shaped: {curve.is_u_shaped()}")
    for lo, hi, n, m in zip(curve.edges[:-1], curve.edges[1:], curve.counts, curve.mortality):
        bar = "" if np.isnan(m) else "*" * int(round(40 * m))
        print(f"  {lo:9.3g} .. {hi:9.3g}  n={n:5d}  {bar}")


for axis in ("vaso", "fluid"):
    for name, pol in policies.items():
        show(name, u_curve(test, pol, bins, axis))

# the no-treatment curve has no positive side: its zero bin is the lowest dose,
# so every deviation is at most zero and the rising arm is on the left only
