"""State and action abstractions.

States come from seeded k-means (k-means++ start, Lloyd iterations) over
z-scored observations.  Each treatment axis is binned into a zero-dose bin
plus equal-mass bins over the nonzero doses (quartiles for the default five
bins), using linear-interpolation percentiles.  A dose lying exactly on an
edge goes to the lower bin.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .core import DEFAULT_N_BINS, Dataset, flat_action
from .policies import TabularPolicy, as_probs

Axis = Literal["fluid", "vaso"]
AXES: tuple[Axis, Axis] = ("fluid", "vaso")


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted k-means model.  ``centroids`` live in the standardized space."""

    centroids: np.ndarray
    feature_means: np.ndarray
    feature_scales: np.ndarray
    seed: int
    inertia: float
    inertia_history: tuple[float, ...] = ()
    n_iter: int = 0

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64)
        if c.ndim != 2 or not np.all(np.isfinite(c)):
            raise ValueError("centroids must be a finite 2-D array")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)
        for name in ("feature_means", "feature_scales"):
            v = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape[0] != c.shape[1]:
                raise ValueError(f"{name} must have one entry per feature")
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_features(self) -> int:
        return self.centroids.shape[1]

    @property
    def raw_centroids(self) -> np.ndarray:
        return self.centroids * self.feature_scales + self.feature_means

    def standardize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.feature_means) / self.feature_scales

    def to_json(self) -> dict:
        return {
            "kind": "cluster_model",
            "k": self.k,
            "seed": self.seed,
            "inertia": self.inertia,
            "centroids": self.centroids.tolist(),
            "feature_means": self.feature_means.tolist(),
            "feature_scales": self.feature_scales.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterModel":
        return cls(
            np.asarray(obj["centroids"]),
            np.asarray(obj["feature_means"]),
            np.asarray(obj["feature_scales"]),
            int(obj["seed"]),
            float(obj["inertia"]),
        )


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion, so
    # equal distances compare equal and the result does not depend on BLAS
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(x.shape[0], dtype=np.int64)
    dmin = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        d = _sq_distances(x[lo : lo + chunk], centroids)
        labels[lo : lo + chunk] = np.argmin(d, axis=1)
        dmin[lo : lo + chunk] = d[np.arange(d.shape[0]), labels[lo : lo + chunk]]
    return labels, dmin


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, _sq_distances(x, centers[j : j + 1])[:, 0])
    return centers


def fit_kmeans(
    observations,
    k: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 300,
) -> ClusterModel:
    """Cluster observations into ``k`` states.

    Features are z-scored first (constant features keep scale 1).  An empty
    cluster is re-seeded at the point farthest from its current centroid.
    Iteration stops once no centroid moves more than ``tol`` or after
    ``max_iter`` Lloyd sweeps.
    """
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("observations must be an (n, d) array")
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of observations ({n})")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.all(np.isfinite(x)):
        raise ValueError("observations must be finite")
    means = x.mean(axis=0)
    scales = x.std(axis=0)
    scales[scales == 0] = 1.0
    z = (x - means) / scales
    if k > 1 and np.all(z == z[0]):
        raise ValueError("all observations are identical; cannot form more than one cluster")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(z, k, rng)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, dmin = _assign(z, centroids)
        history.append(float(dmin.sum()))
        new = np.zeros_like(centroids)
        np.add.at(new, labels, z)
        sizes = np.bincount(labels, minlength=k)
        nonempty = sizes > 0
        new[nonempty] /= sizes[nonempty, None]
        if not np.all(nonempty):
            taken = set()
            order = np.argsort(-dmin, kind="stable")
            cursor = 0
            for j in np.flatnonzero(~nonempty):
                while int(order[cursor]) in taken:
                    cursor += 1
                idx = int(order[cursor])
                taken.add(idx)
                new[j] = z[idx]
        shift = float(np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if shift < tol:
            break
    _, dmin = _assign(z, centroids)
    inertia = float(dmin.sum())
    history.append(inertia)
    return ClusterModel(centroids, means, scales, seed, inertia, tuple(history), n_iter)


def assign_states(model: ClusterModel, observations) -> np.ndarray:
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if obs.shape[1] != model.n_features:
        raise ValueError(f"observation has {obs.shape[1]} features, model expects {model.n_features}")
    labels, _ = _assign(model.standardize(obs), model.centroids)
    return labels


def assign_state(model: ClusterModel, obs) -> int:
    """Index of the nearest centroid in standardized space (ties to the lowest index)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1:
        raise ValueError("assign_state takes a single observation vector")
    return int(assign_states(model, obs[None, :])[0])


# --------------------------------------------------------------------------
# dose binning

@dataclass(frozen=True)
class AxisBins:
    edges: tuple[float, ...]
    medians: tuple[float, ...]

    @property
    def n_bins(self) -> int:
        return len(self.medians)

    def bin(self, doses) -> np.ndarray:
        d = np.asarray(doses, dtype=np.float64)
        if np.any(d < 0):
            raise ValueError("doses must be non-negative")
        if self.n_bins == 1:
            return np.zeros(d.shape, dtype=np.int64)
        b = np.searchsorted(np.asarray(self.edges), d, side="left") + 1
        return np.where(d == 0, 0, b).astype(np.int64)


@dataclass(frozen=True)
class DoseBins:
    fluid: AxisBins
    vaso: AxisBins

    def axis(self, name: Axis) -> AxisBins:
        if name not in AXES:
            raise ValueError(f"unknown treatment axis {name!r}")
        return getattr(self, name)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.fluid.n_bins, self.vaso.n_bins)

    def to_json(self) -> dict:
        return {
            "kind": "dose_bins",
            **{ax: {"edges": list(self.axis(ax).edges), "medians": list(self.axis(ax).medians)} for ax in AXES},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DoseBins":
        return cls(*(AxisBins(tuple(obj[ax]["edges"]), tuple(obj[ax]["medians"])) for ax in AXES))


def fit_axis_bins(doses, n_bins: int = DEFAULT_N_BINS, axis_name: str = "dose") -> AxisBins:
    d = np.asarray(doses, dtype=np.float64).reshape(-1)
    if np.any(d < 0):
        raise ValueError("doses must be non-negative")
    nz = d[d > 0]
    n_nonzero_bins = n_bins - 1
    n_distinct = np.unique(nz).size
    if n_distinct == 0:
        warnings.warn(f"{axis_name}: no nonzero doses; using a single zero-dose bin", stacklevel=3)
        return AxisBins((), (0.0,))
    if n_distinct < n_nonzero_bins:
        warnings.warn(
            f"{axis_name}: only {n_distinct} distinct nonzero doses; collapsing to {n_distinct + 1} bins",
            stacklevel=3,
        )
        n_nonzero_bins = n_distinct
    qs = 100.0 * np.arange(1, n_nonzero_bins) / n_nonzero_bins
    edges = np.percentile(nz, qs, method="linear")
    uniq = np.unique(edges)
    if uniq.size < edges.size:
        warnings.warn(f"{axis_name}: tied percentile edges; collapsing to {uniq.size + 2} bins", stacklevel=3)
        edges = uniq
    # an edge equal to the largest dose would leave the top bin empty
    edges = edges[edges < nz.max()]
    partial = AxisBins(tuple(float(e) for e in edges), (0.0,) * (edges.size + 2))
    b = partial.bin(nz)
    medians = [0.0]
    for j in range(1, edges.size + 2):
        medians.append(float(np.median(nz[b == j])))
    return AxisBins(partial.edges, tuple(medians))


def fit_dose_bins(ds: Dataset, n_bins: int = DEFAULT_N_BINS) -> DoseBins:
    """Zero bin plus ``n_bins - 1`` percentile bins of the nonzero doses, per axis."""
    fluid = np.concatenate([tr.fluid_dose for tr in ds.trajectories])
    vaso = np.concatenate([tr.vaso_dose for tr in ds.trajectories])
    return DoseBins(fit_axis_bins(fluid, n_bins, "fluid"), fit_axis_bins(vaso, n_bins, "vaso"))


def discretize(ds: Dataset, cm: ClusterModel, db: DoseBins) -> Dataset:
    """Annotate every step with its cluster state and binned action."""
    n_vaso = db.vaso.n_bins
    out = []
    for tr in ds.trajectories:
        fb = db.fluid.bin(tr.fluid_dose)
        vb = db.vaso.bin(tr.vaso_dose)
        out.append(
            tr.replace(
                state_ids=assign_states(cm, tr.obs),
                fluid_bins=fb,
                vaso_bins=vb,
                actions=flat_action(fb, vb, n_vaso),
            )
        )
    meta = dict(ds.metadata)
    meta["representation"] = {"kind": "kmeans", "k": cm.k, "seed": cm.seed}
    return ds.with_trajectories(out, n_states=cm.k, action_grid=db.grid, metadata=meta)


# --------------------------------------------------------------------------
# policy agreement

def policy_agreement(
    a: TabularPolicy | np.ndarray,
    b: TabularPolicy | np.ndarray,
    visit_weights=None,
    *,
    states_a=None,
    states_b=None,
) -> float:
    """Fraction of states (or logged steps) on which two policies recommend
    the same action, comparing tie-broken argmax actions.

    Pass ``states_a``/``states_b`` (the state of each reference step under
    each policy's representation) to compare policies over different state
    spaces; the result is then the fraction of reference steps that agree.
    ``visit_weights`` weights states by visit counts instead.
    """
    pa, pb = as_probs(a), as_probs(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("policies have different action spaces")
    ga, gb = np.argmax(pa, axis=1), np.argmax(pb, axis=1)
    if states_a is not None or states_b is not None:
        if states_a is None or states_b is None:
            raise ValueError("give the reference states under both representations")
        sa, sb = np.asarray(states_a), np.asarray(states_b)
        if sa.shape != sb.shape or sa.size == 0:
            raise ValueError("reference state arrays must be non-empty and aligned")
        return float(np.mean(ga[sa] == gb[sb]))
    if pa.shape != pb.shape:
        raise ValueError("policies over different state spaces need reference states")
    match = (ga == gb).astype(np.float64)
    if visit_weights is None:
        return float(match.mean())
    w = np.asarray(visit_weights, dtype=np.float64)
    if w.shape != match.shape or np.any(w < 0) or w.sum() == 0:
        raise ValueError("visit_weights must be non-negative per-state counts with a positive total")
    return float(np.dot(w, match) / w.sum())


def save_model(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj.to_json()) + "\n")


def load_model(path: str | os.PathLike):
    obj = json.loads(Path(path).read_text())
    if obj.get("kind") == "cluster_model":
        return ClusterModel.from_json(obj)
    if obj.get("kind") == "dose_bins":
        return DoseBins.from_json(obj)
    raise ValueError(f"{path}: not a cluster model or dose-bin file")
