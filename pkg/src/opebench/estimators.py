"""Importance-sampling, doubly robust and model-based value estimators.

Conventions shared by every estimator here:

* returns are discounted, ``G = sum_t gamma**t r_t``; ``gamma = 1`` gives the
  undiscounted sum;
* the full-trajectory weight is the product of the per-step ratios over all
  logged decisions ``t = 0 .. T-1``;
* for the step-normalized (weighted per-decision) estimators a trajectory
  that has already ended keeps contributing its final cumulative weight to
  the normalizer of every later step, as if padded with zero-reward
  absorbing steps of ratio one.

Per-step terms are laid out on a padded ``(N, T_max)`` grid and summed in a
fixed order so repeated calls give bit-identical results.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, DatasetError, Trajectory, discount_vector
from .policies import MDPModel, QFunction, as_probs, ConvergenceError

DEFAULT_ESS_FLOOR = 30


class Flag(str, enum.Enum):
    ALL_WEIGHTS_ZERO = "AllWeightsZero"
    LOW_ESS = "LowESS"
    SUPPORT_VIOLATION = "SupportViolation"
    MODEL_BIAS_WARNING = "ModelBiasWarning"


class SupportViolation(ValueError):
    """The behavior policy gives zero probability to a logged action."""


@dataclass(frozen=True, eq=False)
class WeightSeries:
    ratios: np.ndarray
    cumulative: np.ndarray

    @property
    def weight(self) -> float:
        return float(self.cumulative[-1])

    def __len__(self) -> int:
        return self.ratios.shape[0]


@dataclass(frozen=True, eq=False)
class EstimatorResult:
    name: str
    value: float
    contributions: np.ndarray
    weights: np.ndarray
    n_nonzero: int
    ess: float
    flags: frozenset = field(default_factory=frozenset)

    @property
    def trustworthy(self) -> bool:
        return not (self.flags & {Flag.ALL_WEIGHTS_ZERO, Flag.LOW_ESS})

    def summary(self) -> dict:
        return {
            "value": self.value,
            "ess": self.ess,
            "n_nonzero": self.n_nonzero,
            "flags": sorted(f.value for f in self.flags),
        }


def kish_ess(weights) -> float:
    """``(sum w)**2 / sum w**2``; zero when every weight is zero."""
    w = np.asarray(weights, dtype=np.float64)
    s2 = float(np.sum(w * w))
    return 0.0 if s2 == 0 else float(np.sum(w)) ** 2 / s2


def _check_policies(ds: Dataset, pi_e, pi_b) -> tuple[np.ndarray, np.ndarray]:
    pe, pb = as_probs(pi_e), as_probs(pi_b)
    if pe.shape != pb.shape:
        raise ValueError(f"evaluation policy {pe.shape} and behavior policy {pb.shape} differ in shape")
    if ds.n_states is not None and pe.shape[0] != ds.n_states:
        raise ValueError(f"policies cover {pe.shape[0]} states, dataset has {ds.n_states}")
    if pe.shape[1] != ds.n_actions:
        raise ValueError(f"policies cover {pe.shape[1]} actions, dataset has {ds.n_actions}")
    return pe, pb


def importance_ratios(traj: Trajectory, pi_e, pi_b) -> WeightSeries:
    if not traj.is_discretized:
        raise DatasetError(f"trajectory {traj.id!r} is not discretized")
    pe, pb = as_probs(pi_e), as_probs(pi_b)
    num = pe[traj.state_ids, traj.actions]
    den = pb[traj.state_ids, traj.actions]
    if np.any(den == 0):
        t = int(np.flatnonzero(den == 0)[0])
        raise SupportViolation(
            f"trajectory {traj.id!r}, step {t}: behavior probability of the logged action is zero"
        )
    rho = num / den
    return WeightSeries(rho, np.cumprod(rho))


@dataclass(frozen=True)
class _Grid:
    """Padded per-step quantities for one (dataset, pi_e, pi_b, gamma)."""

    ratios: np.ndarray
    cum: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray
    disc: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.cum[:, -1]


def _grid(ds: Dataset, pi_e, pi_b, gamma: float) -> _Grid:
    if len(ds) == 0:
        raise DatasetError("cannot estimate a value from an empty dataset")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    pe, pb = _check_policies(ds, pi_e, pi_b)
    arr = ds.step_arrays
    den = pb[arr.states, arr.actions]
    bad = (den == 0) & arr.mask
    if np.any(bad):
        n, t = (int(v[0]) for v in np.nonzero(bad))
        raise SupportViolation(
            f"trajectory {ds[n].id!r}, step {t}: behavior probability of the logged action is zero"
        )
    num = pe[arr.states, arr.actions]
    ratios = np.where(arr.mask, num / np.where(arr.mask, den, 1.0), 1.0)
    cum = np.cumprod(ratios, axis=1)
    return _Grid(ratios, cum, arr.rewards, arr.mask, discount_vector(gamma, ratios.shape[1]),
                 arr.states, arr.actions)


def _flags(weights: np.ndarray, ess_floor: float, extra=()) -> frozenset:
    flags = set(extra)
    n_nonzero = int(np.count_nonzero(weights))
    if n_nonzero == 0:
        flags.add(Flag.ALL_WEIGHTS_ZERO)
    if n_nonzero < ess_floor:
        flags.add(Flag.LOW_ESS)
    return frozenset(flags)


def _result(name, value, contributions, weights, ess_floor, extra=()) -> EstimatorResult:
    return EstimatorResult(
        name,
        float(value),
        contributions,
        weights,
        int(np.count_nonzero(weights)),
        kish_ess(weights),
        _flags(weights, ess_floor, extra),
    )


def _step_normalized(cum: np.ndarray) -> np.ndarray:
    totals = cum.sum(axis=0)
    return np.divide(cum, totals, out=np.zeros_like(cum), where=totals > 0)


def is_estimate(ds: Dataset, pi_e, pi_b, gamma: float = 0.95, ess_floor: float = DEFAULT_ESS_FLOOR) -> EstimatorResult:
    """Trajectory-wise importance sampling, ``(1/N) sum_n w_n G_n``."""
    g = _grid(ds, pi_e, pi_b, gamma)
    returns = np.sum(g.disc * g.rewards, axis=1)
    contrib = g.weights * returns
    return _result("is", contrib.mean(), contrib, g.weights, ess_floor)


def pdis_estimate(ds: Dataset, pi_e, pi_b, gamma: float = 0.95, ess_floor: float = DEFAULT_ESS_FLOOR) -> EstimatorResult:
    """Per-decision IS: each reward is weighted by the ratios up to its own step."""
    g = _grid(ds, pi_e, pi_b, gamma)
    terms = g.disc * (g.cum * g.rewards)
    contrib = terms.sum(axis=1)
    return _result("pdis", contrib.mean(), contrib, g.weights, ess_floor)


def wis_estimate(ds: Dataset, pi_e, pi_b, gamma: float = 0.95, ess_floor: float = DEFAULT_ESS_FLOOR) -> EstimatorResult:
    """Self-normalized IS, ``sum_n w_n G_n / sum_n w_n``."""
    g = _grid(ds, pi_e, pi_b, gamma)
    w = g.weights
    total = w.sum()
    if total == 0:
        return _result("wis", 0.0, np.zeros_like(w), w, ess_floor)
    returns = np.sum(g.disc * g.rewards, axis=1)
    contrib = (w / total) * returns
    return _result("wis", contrib.sum(), contrib, w, ess_floor)


def wpdis_estimate(ds: Dataset, pi_e, pi_b, gamma: float = 0.95, ess_floor: float = DEFAULT_ESS_FLOOR) -> EstimatorResult:
    """Weighted per-decision IS: cumulative weights normalized across
    trajectories separately at every step."""
    g = _grid(ds, pi_e, pi_b, gamma)
    if not np.any(g.weights):
        return _result("wpdis", 0.0, np.zeros(len(ds)), g.weights, ess_floor)
    wbar = _step_normalized(g.cum)
    terms = g.disc * (wbar * g.rewards)
    contrib = terms.sum(axis=1)
    return _result("wpdis", contrib.sum(), contrib, g.weights, ess_floor)


def _critic_terms(ds: Dataset, g: _Grid, pi_e, critic: QFunction | np.ndarray):
    qv = critic.q if isinstance(critic, QFunction) else np.asarray(critic, dtype=np.float64)
    pe = as_probs(pi_e)
    if qv.shape != pe.shape:
        raise ValueError(f"critic shape {qv.shape} does not match policy shape {pe.shape}")
    v = np.sum(pe * qv, axis=1)
    q_sa = np.where(g.mask, qv[g.states, g.actions], 0.0)
    v_s = np.where(g.mask, v[g.states], 0.0)
    extra = ()
    if isinstance(critic, QFunction) and critic.fit_ids & set(ds.ids):
        extra = (Flag.MODEL_BIAS_WARNING,)
    return q_sa, v_s, extra


def dr_estimate(
    ds: Dataset,
    pi_e,
    pi_b,
    critic: QFunction | np.ndarray,
    gamma: float = 0.95,
    ess_floor: float = DEFAULT_ESS_FLOOR,
) -> EstimatorResult:
    """Doubly robust estimate with critic ``q``.

    Per trajectory this is the backward recursion
    ``DR_t = v(s_t) + rho_t (r_t + gamma DR_{t+1} - q(s_t, a_t))``, evaluated
    in its expanded form
    ``sum_t gamma**t [rho_{0:t} (r_t - q(s_t, a_t)) + rho_{0:t-1} v(s_t)]``.
    """
    g = _grid(ds, pi_e, pi_b, gamma)
    q_sa, v_s, extra = _critic_terms(ds, g, pi_e, critic)
    prev = np.concatenate([np.ones((g.cum.shape[0], 1)), g.cum[:, :-1]], axis=1)
    terms = g.disc * (g.cum * (g.rewards - q_sa)) + g.disc * (prev * v_s)
    contrib = terms.sum(axis=1)
    return _result("dr", contrib.mean(), contrib, g.weights, ess_floor, extra)


def wdr_estimate(
    ds: Dataset,
    pi_e,
    pi_b,
    critic: QFunction | np.ndarray,
    gamma: float = 0.95,
    ess_floor: float = DEFAULT_ESS_FLOOR,
) -> EstimatorResult:
    """Weighted doubly robust: the DR expansion with the cumulative ratios
    replaced by step-normalized weights (the weight before step 0 is 1/N)."""
    g = _grid(ds, pi_e, pi_b, gamma)
    q_sa, v_s, extra = _critic_terms(ds, g, pi_e, critic)
    if not np.any(g.weights):
        return _result("wdr", 0.0, np.zeros(len(ds)), g.weights, ess_floor, extra)
    wbar = _step_normalized(g.cum)
    n = wbar.shape[0]
    prev = np.concatenate([np.full((n, 1), 1.0 / n), wbar[:, :-1]], axis=1)
    terms = g.disc * (wbar * (g.rewards - q_sa)) + g.disc * (prev * v_s)
    contrib = terms.sum(axis=1)
    return _result("wdr", contrib.sum(), contrib, g.weights, ess_floor, extra)


def dr_backward(traj: Trajectory, pi_e, pi_b, critic, gamma: float = 0.95) -> float:
    """Literal backward recursion for one trajectory; reference for :func:`dr_estimate`."""
    qv = critic.q if isinstance(critic, QFunction) else np.asarray(critic, dtype=np.float64)
    pe = as_probs(pi_e)
    ws = importance_ratios(traj, pi_e, pi_b)
    v = np.sum(pe * qv, axis=1)
    dr = 0.0
    for t in range(len(traj) - 1, -1, -1):
        s, a = traj.state_ids[t], traj.actions[t]
        dr = v[s] + ws.ratios[t] * (traj.rewards[t] + gamma * dr - qv[s, a])
    return float(dr)


def model_based_estimate(
    mdp: MDPModel,
    pi_e,
    gamma: float = 0.95,
    horizon: int | None = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> float:
    """Exact evaluation of ``pi_e`` on ``mdp``, weighted by its initial distribution.

    Iterates ``V(s) <- sum_a pi(a|s) sum_s' P(s'|s,a) [r(s') + gamma V(s')]``
    to ``tol`` (or for exactly ``horizon`` sweeps when given).
    """
    pe = as_probs(pi_e)
    S = mdp.n_states
    if pe.shape != (S, mdp.n_actions):
        raise ValueError(f"policy shape {pe.shape} does not match model {(S, mdp.n_actions)}")
    if horizon is None and gamma == 1.0:
        raise ValueError("gamma == 1 needs a finite horizon")
    # state-to-state kernel and expected entry reward under pi_e
    P_pi = np.einsum("sa,sat->st", pe, mdp.transitions[:S])
    r_pi = P_pi @ mdp.entry_rewards
    P_tr = P_pi[:, :S]
    v = np.zeros(S)
    sweeps = horizon if horizon is not None else max_iter
    for _ in range(sweeps):
        v_new = r_pi + gamma * (P_tr @ v)
        res = float(np.max(np.abs(v_new - v)))
        v = v_new
        if horizon is None and res < tol:
            break
    else:
        if horizon is None:
            raise ConvergenceError("model-based evaluation did not converge", res)
    return float(mdp.initial @ v)


ESTIMATORS = ("is", "pdis", "wis", "wpdis", "dr", "wdr", "mb")


def run_estimators(
    ds: Dataset,
    pi_e,
    pi_b,
    gamma: float = 0.95,
    estimators=ESTIMATORS,
    critic: QFunction | np.ndarray | None = None,
    model: MDPModel | None = None,
    ess_floor: float = DEFAULT_ESS_FLOOR,
) -> dict[str, EstimatorResult]:
    """Run a named subset of the estimators on one dataset."""
    out: dict[str, EstimatorResult] = {}
    plain = {"is": is_estimate, "pdis": pdis_estimate, "wis": wis_estimate, "wpdis": wpdis_estimate}
    for name in estimators:
        if name in plain:
            out[name] = plain[name](ds, pi_e, pi_b, gamma, ess_floor)
        elif name in ("dr", "wdr"):
            if critic is None:
                raise ValueError(f"{name} needs a critic")
            fn = dr_estimate if name == "dr" else wdr_estimate
            out[name] = fn(ds, pi_e, pi_b, critic, gamma, ess_floor)
        elif name == "mb":
            if model is None:
                raise ValueError("mb needs a fitted model")
            flags = {Flag.MODEL_BIAS_WARNING} if model.trajectory_ids & set(ds.ids) else set()
            value = model_based_estimate(model, pi_e, gamma)
            out[name] = EstimatorResult("mb", value, np.zeros(0), np.zeros(0), 0, 0.0, frozenset(flags))
        else:
            raise ValueError(f"unknown estimator {name!r}")
    return out
