"""Repeated train/test evaluation experiments and their reports.

One replicate: split the cohort by patient, fit the state clustering and
dose bins on the training part, fit a tabular model and plan on it, estimate
the clinician policy on the test part, then score every requested policy with
every requested estimator on the test part.  Replicates are independent and
run on a thread pool; results are merged in replicate order, so the report
does not depend on the number of threads.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import Dataset, load_dataset, partition
from .diagnostics import matched_sequences
from .estimators import DEFAULT_ESS_FLOOR, ESTIMATORS, run_estimators
from .policies import (
    TabularPolicy,
    baseline_policy,
    estimate_behavior_policy,
    evaluate_policy_q,
    fit_mdp,
    greedy_policy,
    value_iteration,
)
from .representation import ClusterModel, assign_states, discretize, fit_dose_bins, fit_kmeans, policy_agreement
from .simulator import GroundTruth, SimConfig, build_ground_truth, exact_value, sample_dataset, sample_observations, scenario

log = logging.getLogger(__name__)

POLICIES = ("learned", "behavior", "random", "noaction", "mostcommon")
THREADS_ENV = "OPEBENCH_THREADS"


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str | None = "ConfoundedNoTreat"
    sim_overrides: dict = field(default_factory=dict)
    dataset_path: str | None = None
    n_patients: int = 2000
    data_seed: int = 0
    representation: str = "kmeans"
    k_values: tuple[int, ...] = (12,)
    n_replicates: int = 50
    train_frac: float = 0.8
    estimators: tuple[str, ...] = ESTIMATORS
    policies: tuple[str, ...] = POLICIES
    gamma: float = 0.95
    seed: int = 0
    behavior_alpha: float = 0.01
    unvisited: str = "alive"
    kmeans_tol: float = 1e-6
    kmeans_max_iter: int = 300
    n_dose_bins: int = 5
    ess_floor: float = DEFAULT_ESS_FLOOR
    lift_samples: int = 2000

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie in (0, 1)")
        if (self.scenario is None) == (self.dataset_path is None):
            raise ValueError("give exactly one of scenario or dataset_path")
        if self.representation not in ("kmeans", "logged"):
            raise ValueError("representation must be 'kmeans' or 'logged'")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ValueError(f"unknown policies {sorted(unknown)}")
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "policies", tuple(self.policies))

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("k_values", "estimators", "policies"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown experiment settings: {sorted(unknown)}")
        return cls(**obj)

    def sim_config(self) -> SimConfig:
        return scenario(self.scenario, **self.sim_overrides)


@dataclass
class ExperimentReport:
    spec: dict
    records: list[dict] = field(default_factory=list)
    matched: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def values(self, policy: str, estimator: str, k: int | None = None) -> np.ndarray:
        return np.array([
            r["value"] for r in self.records
            if r["policy"] == policy and r["estimator"] == estimator and (k is None or r["k"] == k)
        ])

    def summary(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.records:
            groups.setdefault((r["k"], r["policy"], r["estimator"]), []).append(r["value"])
        out = []
        for (k, pol, est), vals in groups.items():
            q = quantile_summary(vals)
            out.append({"k": k, "policy": pol, "estimator": est, "n": len(vals), **q,
                        "mean": float(np.mean(vals))})
        return out

    def to_json(self) -> dict:
        return {"spec": self.spec, "records": self.records, "matched": self.matched,
                "skipped": self.skipped, "summary": self.summary()}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentReport":
        return cls(obj["spec"], obj["records"], obj["matched"], obj["skipped"])


def quantile_summary(values: Sequence[float]) -> dict:
    """Box-plot five-number summary with linear-interpolation quantiles."""
    v = np.asarray(values, dtype=np.float64)
    qs = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in qs)))


def iqr(values) -> float:
    q1, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 75], method="linear")
    return float(q3 - q1)


# --------------------------------------------------------------------------
# pipeline pieces

def _cluster_state_map(gt: GroundTruth, cm: ClusterModel, n_samples: int, seed: int) -> np.ndarray:
    """Monte Carlo estimate of P(cluster | true state) from fresh observation draws."""
    rng = np.random.default_rng(seed)
    S = gt.n_true_states
    M = np.zeros((S, cm.k))
    for s in range(S):
        obs = sample_observations(gt, np.full(n_samples, s), rng)
        M[s] = np.bincount(assign_states(cm, obs), minlength=cm.k) / n_samples
    return M


def learn_policy(
    train: Dataset,
    gamma: float = 0.95,
    unvisited: str = "alive",
):
    """Fit a tabular model on discretized training data and plan on it."""
    mdp = fit_mdp(train, unvisited)
    q = value_iteration(mdp, gamma)
    return mdp, q, greedy_policy(q)


def _policies(names, learned: TabularPolicy, behavior: TabularPolicy) -> dict[str, TabularPolicy]:
    S, A = behavior.n_states, behavior.n_actions
    table = {
        "learned": lambda: learned,
        "behavior": lambda: behavior,
        "random": lambda: baseline_policy("random", S, A),
        "noaction": lambda: baseline_policy("noaction", S, A),
        "mostcommon": lambda: baseline_policy("mostcommon", behavior=behavior),
    }
    return {name: table[name]() for name in names}


def run_replicate(spec: ExperimentSpec, data: Dataset, gt: GroundTruth | None, k: int, rep: int):
    part_seed, km_seed, lift_seed = (int(v) for v in np.random.SeedSequence([spec.seed, k, rep]).generate_state(3))
    train, test = partition(data, spec.train_frac, part_seed)
    cm = None
    if spec.representation == "kmeans":
        cm = fit_kmeans(train.observations(), k, km_seed, spec.kmeans_tol, spec.kmeans_max_iter)
        db = fit_dose_bins(train, spec.n_dose_bins)
        train, test = discretize(train, cm, db), discretize(test, cm, db)
    mdp, q_star, learned = learn_policy(train, spec.gamma, spec.unvisited)
    behavior = estimate_behavior_policy(test, spec.behavior_alpha)
    pols = _policies(spec.policies, learned, behavior)
    state_map = None
    if gt is not None and cm is not None:
        state_map = _cluster_state_map(gt, cm, spec.lift_samples, lift_seed)

    records, matched = [], []
    for name, pol in pols.items():
        critic = q_star if name == "learned" else evaluate_policy_q(mdp, pol, spec.gamma)
        results = run_estimators(test, pol, behavior, spec.gamma, spec.estimators, critic, mdp, spec.ess_floor)
        true_value = None
        if gt is not None:
            probs = pol.probs if state_map is None else state_map @ pol.probs
            true_value = exact_value(gt, probs, spec.gamma)
        for est in spec.estimators:
            res = results[est]
            records.append({
                "k": k,
                "replicate": rep,
                "policy": name,
                "estimator": est,
                "value": res.value,
                "ess_count": res.n_nonzero,
                "ess_kish": res.ess,
                "n_nonzero": res.n_nonzero,
                "flags": "|".join(sorted(f.value for f in res.flags)),
                "true_value": true_value,
            })
        if pol.deterministic:
            ms = matched_sequences(test, pol)
            matched.append({
                "k": k,
                "replicate": rep,
                "policy": name,
                "n_matching": ms.n_matching,
                "mean_length_matching": None if ms.n_matching == 0 else ms.mean_length_matching,
                "n_total": ms.n_total,
                "mean_length_total": ms.mean_length_total,
            })
    return records, matched


def _load_data(spec: ExperimentSpec) -> tuple[Dataset, GroundTruth | None]:
    if spec.dataset_path is not None:
        return load_dataset(spec.dataset_path), None
    gt = build_ground_truth(spec.sim_config())
    return sample_dataset(gt, spec.n_patients, spec.data_seed), gt


def _n_threads(n_threads: int | None) -> int:
    if n_threads is not None:
        return max(1, int(n_threads))
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def run_experiment(
    spec: ExperimentSpec,
    data: Dataset | None = None,
    gt: GroundTruth | None = None,
    n_threads: int | None = None,
) -> ExperimentReport:
    """Run every replicate of ``spec``; a failing replicate is recorded as skipped."""
    if data is None:
        data, gt = _load_data(spec)
    ks = spec.k_values if spec.representation == "kmeans" else (data.n_states,)
    jobs = [(k, r) for k in ks for r in range(spec.n_replicates)]

    def work(job):
        k, r = job
        try:
            return run_replicate(spec, data, gt, k, r), None
        except Exception as exc:  # recorded, not raised: one bad split must not sink the run
            log.warning("replicate %d (k=%s) skipped: %s", r, k, exc)
            return None, {"k": k, "replicate": r, "reason": f"{type(exc).__name__}: {exc}"}

    threads = _n_threads(n_threads)
    if threads == 1:
        outcomes = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, jobs))
    report = ExperimentReport(spec.to_json())
    for result, skip in outcomes:
        if skip is not None:
            report.skipped.append(skip)
            continue
        recs, matched = result
        report.records.extend(recs)
        report.matched.extend(matched)
    return report


# --------------------------------------------------------------------------
# representation agreement

def representation_agreement(
    data: Dataset,
    k_values: Sequence[int],
    seeds: Sequence[int],
    gamma: float = 0.95,
    unvisited: str = "alive",
    n_dose_bins: int = 5,
) -> dict[str, Any]:
    """Re-run the learning pipeline under several clusterings of the same data.

    Each run ``i`` uses ``k_values[i]`` (or the single value given) and
    ``seeds[i]``.  Agreement with run 0 is measured on every logged step of
    ``data``: each step is mapped to its state under both clusterings and
    the recommended actions compared.
    """
    ks = list(k_values) if len(k_values) > 1 else [k_values[0]] * len(seeds)
    if len(ks) != len(seeds):
        raise ValueError("need one k per seed, or a single k")
    obs = data.observations()
    db = fit_dose_bins(data, n_dose_bins)
    runs = []
    for k, seed in zip(ks, seeds):
        cm = fit_kmeans(obs, k, seed)
        dd = discretize(data, cm, db)
        _, _, pol = learn_policy(dd, gamma, unvisited)
        states = np.concatenate([tr.state_ids for tr in dd.trajectories])
        runs.append((pol, states))
    vs_first = [
        policy_agreement(runs[0][0], pol, states_a=runs[0][1], states_b=st) for pol, st in runs[1:]
    ]
    pairwise = [
        policy_agreement(runs[i][0], runs[j][0], states_a=runs[i][1], states_b=runs[j][1])
        for i in range(len(runs)) for j in range(i + 1, len(runs))
    ]
    return {"k": ks, "seeds": list(seeds), "vs_first": vs_first, "pairwise": pairwise}


# --------------------------------------------------------------------------
# output

RECORD_COLUMNS = ("k", "replicate", "policy", "estimator", "value", "ess_count", "ess_kish",
                  "n_nonzero", "flags", "true_value")
SUMMARY_COLUMNS = ("k", "policy", "estimator", "n", "min", "q1", "median", "q3", "max", "mean")
MATCHED_COLUMNS = ("k", "replicate", "policy", "n_matching", "mean_length_matching", "n_total",
                   "mean_length_total")
SKIPPED_COLUMNS = ("k", "replicate", "reason")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def emit_report(report: ExperimentReport, path: str | os.PathLike, fmt: str = "csv") -> list[Path]:
    """Write ``report`` into directory ``path``.

    ``csv`` writes ``records.csv`` (one row per replicate, policy and
    estimator), ``summary.csv`` (five-number summaries), ``matched.csv`` and
    ``skipped.csv``; ``json`` writes a single ``report.json``.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        p = out / "report.json"
        p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
        return [p]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    written = []
    for name, cols, rows in (
        ("records.csv", RECORD_COLUMNS, report.records),
        ("summary.csv", SUMMARY_COLUMNS, report.summary()),
        ("matched.csv", MATCHED_COLUMNS, report.matched),
        ("skipped.csv", SKIPPED_COLUMNS, report.skipped),
    ):
        _write_csv(out / name, cols, rows)
        written.append(out / name)
    return written
