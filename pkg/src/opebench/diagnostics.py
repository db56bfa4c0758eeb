"""Trust checks for importance-sampling evaluations and ad-hoc outcome curves.

The U-curve deviation is *recommended minus administered* dose, so a
positive deviation means the policy would have given more than the
clinician did.  The recommended dose of a bin is that bin's median raw dose.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, DatasetError, split_action
from .estimators import DEFAULT_ESS_FLOOR, Flag, WeightSeries, importance_ratios, kish_ess
from .policies import TabularPolicy, as_probs
from .representation import Axis, DoseBins, fit_axis_bins


@dataclass(frozen=True)
class WeightAudit:
    n_total: int
    n_nonzero: int
    ess_count: int
    ess_kish: float
    max_weight: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    mean_length_nonzero: float
    mean_length_total: float
    flags: frozenset

    def as_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_nonzero": self.n_nonzero,
            "ess_count": self.ess_count,
            "ess_kish": self.ess_kish,
            "max_weight": self.max_weight,
            "hist_edges": self.hist_edges.tolist(),
            "hist_counts": self.hist_counts.tolist(),
            "mean_length_nonzero": self.mean_length_nonzero,
            "mean_length_total": self.mean_length_total,
            "flags": sorted(f.value for f in self.flags),
        }


def audit_weights(
    series: Sequence[WeightSeries],
    lengths: Sequence[int] | None = None,
    ess_floor: float = DEFAULT_ESS_FLOOR,
    n_hist_bins: int = 10,
) -> WeightAudit:
    """Summarize the distribution of full-trajectory importance weights.

    ``ess_count`` is the number of trajectories with a nonzero weight;
    ``ess_kish`` is ``(sum w)**2 / sum w**2``.  The histogram uses
    log-spaced bins over the nonzero weights.
    """
    if len(series) == 0:
        raise ValueError("no weight series to audit")
    w = np.array([ws.weight for ws in series])
    L = np.asarray(lengths if lengths is not None else [len(ws) for ws in series], dtype=np.float64)
    nz = w > 0
    n_nonzero = int(nz.sum())
    if n_nonzero:
        lo, hi = np.log10(w[nz].min()), np.log10(w[nz].max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.logspace(lo, hi, n_hist_bins + 1)
        if w[nz].min() < w[nz].max():
            # logspace does not round-trip exactly; pin the ends to the data
            edges[0], edges[-1] = w[nz].min(), w[nz].max()
        counts, _ = np.histogram(w[nz], bins=edges)
    else:
        edges, counts = np.zeros(0), np.zeros(0, dtype=np.int64)
    flags = set()
    if n_nonzero == 0:
        flags.add(Flag.ALL_WEIGHTS_ZERO)
    if n_nonzero < ess_floor:
        flags.add(Flag.LOW_ESS)
    return WeightAudit(
        n_total=len(series),
        n_nonzero=n_nonzero,
        ess_count=n_nonzero,
        ess_kish=kish_ess(w),
        max_weight=float(w.max()),
        hist_edges=edges,
        hist_counts=counts,
        mean_length_nonzero=float(L[nz].mean()) if n_nonzero else float("nan"),
        mean_length_total=float(L.mean()),
        flags=frozenset(flags),
    )


def weight_series(dd: Dataset, pi_e, pi_b) -> list[WeightSeries]:
    return [importance_ratios(tr, pi_e, pi_b) for tr in dd.trajectories]


@dataclass(frozen=True)
class MatchedSequenceStats:
    n_matching: int
    mean_length_matching: float
    n_total: int
    mean_length_total: float

    @property
    def fraction(self) -> float:
        return self.n_matching / self.n_total


def matched_sequences(dd: Dataset, policy: TabularPolicy) -> MatchedSequenceStats:
    """Count logged trajectories whose every action equals the policy's choice."""
    if not policy.deterministic:
        raise ValueError("matched-sequence analysis needs a deterministic policy")
    arr = dd.step_arrays
    rec = policy.greedy_actions()[arr.states]
    ok = np.all((rec == arr.actions) | ~arr.mask, axis=1)
    L = arr.lengths.astype(np.float64)
    n = int(ok.sum())
    return MatchedSequenceStats(
        n,
        float(L[ok].mean()) if n else float("nan"),
        len(dd),
        float(L.mean()),
    )


# --------------------------------------------------------------------------
# U-curves

@dataclass(frozen=True)
class UCurve:
    axis: str
    edges: np.ndarray
    counts: np.ndarray
    deaths: np.ndarray

    @property
    def mortality(self) -> np.ndarray:
        """Per-bin death rate; NaN for empty bins."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.deaths / np.maximum(self.counts, 1), np.nan)

    @property
    def zero_bin(self) -> int:
        """Index of the bin containing a deviation of exactly zero."""
        j = int(np.searchsorted(self.edges, 0.0, side="right")) - 1
        return min(max(j, 0), len(self.counts) - 1)

    def is_u_shaped(self) -> bool:
        """Zero-deviation mortality strictly below both end-bin mortalities.

        The end bins are the outermost bins that contain patients.
        """
        rate = self.mortality
        filled = np.flatnonzero(self.counts > 0)
        if filled.size < 3:
            return False
        z = self.zero_bin
        if self.counts[z] == 0:
            return False
        lo, hi = filled[0], filled[-1]
        return bool(rate[z] < rate[lo] and rate[z] < rate[hi])

    def rows(self) -> list[dict]:
        rate = self.mortality
        return [
            {
                "bin_low": float(self.edges[j]),
                "bin_high": float(self.edges[j + 1]),
                "count": int(self.counts[j]),
                "mortality": None if np.isnan(rate[j]) else float(rate[j]),
            }
            for j in range(len(self.counts))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "mortality"])
        for r in self.rows():
            w.writerow([repr(r["bin_low"]), repr(r["bin_high"]), r["count"],
                        "" if r["mortality"] is None else repr(r["mortality"])])
        return buf.getvalue()


def recommended_actions(dd: Dataset, policy, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Per-trajectory recommended action indices.

    Deterministic policies give their argmax; stochastic ones are sampled.
    """
    probs = as_probs(policy)
    deterministic = bool(np.all((probs == 0) | (probs == 1)))
    if deterministic:
        greedy = np.argmax(probs, axis=1)
        return [greedy[tr.state_ids] for tr in dd.trajectories]
    rng = rng if rng is not None else np.random.default_rng(0)
    cdf = np.cumsum(probs, axis=1)
    out = []
    for tr in dd.trajectories:
        u = rng.random(len(tr))
        c = cdf[tr.state_ids]
        out.append(np.minimum((c < u[:, None]).sum(axis=1), probs.shape[1] - 1))
    return out


def dose_deviations(dd: Dataset, policy, db: DoseBins, axis: Axis = "vaso", per_step: bool = False,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deviations (recommended minus administered dose) and matching death indicators.

    Returns one value per patient (mean over steps) or, with ``per_step``,
    one per logged step carrying its patient's outcome.
    """
    if not dd.is_discretized:
        raise DatasetError("u-curves need a discretized dataset")
    bins = db.axis(axis)
    medians = np.asarray(bins.medians)
    n_vaso = dd.action_grid[1]
    recs = recommended_actions(dd, policy, np.random.default_rng(seed))
    devs, died = [], []
    for tr, rec in zip(dd.trajectories, recs):
        fb, vb = split_action(rec, n_vaso)
        b = fb if axis == "fluid" else vb
        given = tr.fluid_dose if axis == "fluid" else tr.vaso_dose
        d = medians[np.minimum(b, medians.size - 1)] - given
        if per_step:
            devs.append(d)
            died.append(np.full(d.shape, tr.died))
        else:
            devs.append(np.array([d.mean()]))
            died.append(np.array([tr.died]))
    return np.concatenate(devs), np.concatenate(died)


def u_curve(
    dd: Dataset,
    policy,
    db: DoseBins,
    axis: Axis = "vaso",
    n_dev_bins: int = 9,
    per_step: bool = False,
    dev_range: tuple[float, float] | None = None,
    seed: int = 0,
    trim: float = 0.01,
    clip: bool | None = None,
) -> UCurve:
    """Mortality as a function of the deviation between recommended and given dose.

    Patients (or steps, with ``per_step``) are bucketed into ``n_dev_bins``
    equal-width bins spanning the observed deviations, or ``dev_range``.
    With ``trim`` > 0 the span runs between the ``trim`` and ``1 - trim``
    quantiles instead, so a handful of outliers cannot leave the end bins
    nearly empty. ``clip`` folds out-of-range deviations into the end bins
    rather than dropping them; it defaults to on when ``trim`` is used.
    Empty bins carry a count of zero and an undefined rate.
    """
    if n_dev_bins < 1:
        raise ValueError("n_dev_bins must be positive")
    if not 0.0 <= trim < 0.5:
        raise ValueError("trim must lie in [0, 0.5)")
    dev, died = dose_deviations(dd, policy, db, axis, per_step, seed)
    if dev_range is not None:
        lo, hi = map(float, dev_range)
    elif trim > 0:
        lo, hi = (float(q) for q in np.quantile(dev, [trim, 1.0 - trim]))
    else:
        lo, hi = float(dev.min()), float(dev.max())
    if clip is None:
        clip = trim > 0
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_dev_bins + 1)
    if clip:
        dev = np.clip(dev, lo, hi)
    inside = (dev >= lo) & (dev <= hi)
    idx = np.clip(np.searchsorted(edges, dev[inside], side="right") - 1, 0, n_dev_bins - 1)
    counts = np.bincount(idx, minlength=n_dev_bins)
    deaths = np.bincount(idx, weights=died[inside].astype(np.float64), minlength=n_dev_bins)
    return UCurve(axis, edges, counts, deaths)


# --------------------------------------------------------------------------
# dose histograms

@dataclass(frozen=True)
class DoseHistogramReport:
    axis: str
    edges: np.ndarray
    counts: np.ndarray
    zero_count: int
    bin_medians: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "zero_count": self.zero_count,
            "bin_medians": list(self.bin_medians),
        }


def dose_histogram(ds: Dataset, axis: Axis = "vaso", n_bins: int = 20, n_dose_bins: int = 5) -> DoseHistogramReport:
    """Histogram of nonzero administered doses plus the per-bin median doses."""
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    if axis not in ("fluid", "vaso"):
        raise ValueError(f"unknown treatment axis {axis!r}")
    doses = np.concatenate([tr.fluid_dose if axis == "fluid" else tr.vaso_dose for tr in ds.trajectories])
    nz = doses[doses > 0]
    zero = int(doses.size - nz.size)
    if nz.size == 0:
        return DoseHistogramReport(axis, np.zeros(0), np.zeros(0, dtype=np.int64), zero, (0.0,))
    counts, edges = np.histogram(nz, bins=n_bins)
    bins = fit_axis_bins(doses, n_dose_bins, axis)
    return DoseHistogramReport(axis, edges, counts, zero, bins.medians[1:])
