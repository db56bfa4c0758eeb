"""Tabular policies, fitted MDP models and planning.

The fitted model has ``S`` transient states followed by two absorbing sinks,
``ALIVE = S`` and ``DEAD = S + 1``.  The terminal reward is paid on entering
a sink, and sinks are worth nothing afterwards.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Literal

import numpy as np

from .core import DEFAULT_TERMINAL_REWARD, Dataset, DatasetError

_ROW_TOL = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic ``(S, A)`` action-probability matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"policy matrix must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("policy probabilities must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise ValueError("policy rows must sum to 1")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    def greedy_actions(self) -> np.ndarray:
        """Argmax action per state, ties to the lowest index."""
        return np.argmax(self.probs, axis=1)

    def to_json(self) -> dict:
        return {"kind": "tabular_policy", "probs": self.probs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TabularPolicy":
        return cls(np.asarray(obj["probs"], dtype=np.float64))

    @classmethod
    def from_actions(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=np.int64)
        p = np.zeros((actions.shape[0], n_actions))
        p[np.arange(actions.shape[0]), actions] = 1.0
        return cls(p)


def as_probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, dtype=np.float64)


class Unvisited(str, Enum):
    ALIVE = "alive"
    DEAD = "dead"


@dataclass(frozen=True, eq=False)
class MDPModel:
    """Tabular model with two absorbing sinks.

    ``transitions`` has shape ``(S + 2, A, S + 2)``.  ``entry_rewards[j]`` is
    paid on moving into state ``j``; it is nonzero only for the sinks.
    """

    transitions: np.ndarray
    entry_rewards: np.ndarray
    initial: np.ndarray
    counts: np.ndarray | None = None
    trajectory_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        P = np.array(self.transitions, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 3:
            raise ValueError(f"bad transition tensor shape {P.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > _ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        S = P.shape[0] - 2
        for sink in (S, S + 1):
            if not np.allclose(P[sink, :, sink], 1.0):
                raise ValueError("sink states must self-loop")
        P.flags.writeable = False
        object.__setattr__(self, "transitions", P)
        r = np.array(self.entry_rewards, dtype=np.float64)
        if r.shape != (S + 2,):
            raise ValueError("entry_rewards must have one entry per state")
        object.__setattr__(self, "entry_rewards", r)
        d = np.array(self.initial, dtype=np.float64)
        if d.shape != (S,) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must cover the transient states and sum to 1")
        object.__setattr__(self, "initial", d)
        object.__setattr__(self, "trajectory_ids", frozenset(self.trajectory_ids))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0] - 2

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def alive(self) -> int:
        return self.n_states

    @property
    def dead(self) -> int:
        return self.n_states + 1

    def to_json(self) -> dict:
        return {
            "kind": "mdp_model",
            "transitions": self.transitions.tolist(),
            "entry_rewards": self.entry_rewards.tolist(),
            "initial": self.initial.tolist(),
            "counts": None if self.counts is None else self.counts.tolist(),
            "trajectory_ids": sorted(self.trajectory_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MDPModel":
        counts = obj.get("counts")
        return cls(
            np.asarray(obj["transitions"]),
            np.asarray(obj["entry_rewards"]),
            np.asarray(obj["initial"]),
            None if counts is None else np.asarray(counts),
            frozenset(obj.get("trajectory_ids", ())),
        )


@dataclass(frozen=True, eq=False)
class QFunction:
    q: np.ndarray
    gamma: float
    fit_ids: frozenset = field(default_factory=frozenset)
    residuals: tuple[float, ...] = ()

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.ndim != 2 or not np.all(np.isfinite(q)):
            raise ValueError("Q must be a finite 2-D array")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "fit_ids", frozenset(self.fit_ids))

    def state_values(self, policy) -> np.ndarray:
        return np.sum(as_probs(policy) * self.q, axis=1)

    def to_json(self) -> dict:
        return {"kind": "q_function", "q": self.q.tolist(), "gamma": self.gamma,
                "fit_ids": sorted(self.fit_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "QFunction":
        return cls(np.asarray(obj["q"]), float(obj["gamma"]), frozenset(obj.get("fit_ids", ())))


def save_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj.to_json()) + "\n")


def load_json(path: str | os.PathLike):
    obj = json.loads(Path(path).read_text())
    kinds = {"tabular_policy": TabularPolicy, "mdp_model": MDPModel, "q_function": QFunction}
    try:
        return kinds[obj["kind"]].from_json(obj)
    except KeyError:
        raise ValueError(f"{path}: not a policy, model or Q-function file") from None


# --------------------------------------------------------------------------
# estimation from data

def _state_action_counts(dd: Dataset) -> np.ndarray:
    if not dd.is_discretized or dd.n_states is None:
        raise DatasetError("need a discretized dataset with a known state count")
    arr = dd.step_arrays
    counts = np.zeros((dd.n_states, dd.n_actions))
    np.add.at(counts, (arr.states[arr.mask], arr.actions[arr.mask]), 1.0)
    return counts


def estimate_behavior_policy(dd: Dataset, alpha: float = 0.01) -> TabularPolicy:
    """Smoothed empirical action frequencies per state.

    ``pi_b(a|s) = (n(s, a) + alpha) / (n(s) + alpha * A)``; unvisited states
    get the uniform distribution.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    counts = _state_action_counts(dd)
    A = counts.shape[1]
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.full_like(counts, 1.0 / A)
    seen = totals[:, 0] > 0
    probs[seen] = (counts[seen] + alpha) / (totals[seen] + alpha * A)
    return TabularPolicy(probs)


def fit_mdp(
    dd: Dataset,
    unvisited: Unvisited | Literal["alive", "dead"] = Unvisited.ALIVE,
    terminal_reward: float = DEFAULT_TERMINAL_REWARD,
) -> MDPModel:
    """Maximum-likelihood transition model.

    The last logged step of each trajectory moves into the sink matching its
    outcome.  State-action pairs never seen in ``dd`` go to the sink chosen
    by ``unvisited``: ``alive`` is the optimistic convention, ``dead`` the
    pessimistic one.
    """
    unvisited = Unvisited(unvisited)
    if not dd.is_discretized or dd.n_states is None:
        raise DatasetError("need a discretized dataset with a known state count")
    S, A = dd.n_states, dd.n_actions
    alive, dead = S, S + 1
    counts = np.zeros((S + 2, A, S + 2))
    first = np.zeros(S)
    for tr in dd.trajectories:
        s, a = tr.state_ids, tr.actions
        first[s[0]] += 1
        np.add.at(counts, (s[:-1], a[:-1], s[1:]), 1.0)
        counts[s[-1], a[-1], dead if tr.died else alive] += 1.0
    totals = counts.sum(axis=2, keepdims=True)
    P = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    fallback = alive if unvisited is Unvisited.ALIVE else dead
    empty = totals[:S, :, 0] == 0
    P[:S][empty, fallback] = 1.0
    P[alive, :, alive] = 1.0
    P[dead, :, dead] = 1.0
    r = np.zeros(S + 2)
    r[alive], r[dead] = terminal_reward, -terminal_reward
    return MDPModel(P, r, first / first.sum(), counts[:S, :, :], frozenset(dd.ids))


# --------------------------------------------------------------------------
# planning

def _backup(mdp: MDPModel, gamma: float, v: np.ndarray) -> np.ndarray:
    """One Bellman backup: ``Q(s,a) = sum_s' P(s'|s,a) [r(s') + gamma V(s')]``."""
    target = mdp.entry_rewards + gamma * v
    return mdp.transitions[: mdp.n_states] @ target


def value_iteration(
    mdp: MDPModel,
    gamma: float = 0.95,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    horizon: int | None = None,
) -> QFunction:
    """Optimal Q-function of ``mdp``.

    With ``horizon`` set, exactly that many backups are applied starting from
    zero, giving the optimal value of the first step of a ``horizon``-step
    problem; this is the only mode accepted for ``gamma == 1``.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    S = mdp.n_states
    v = np.zeros(S + 2)
    q = np.zeros((S, mdp.n_actions))
    residuals = []
    if horizon is not None:
        if horizon < 1:
            raise ValueError("horizon must be positive")
        for _ in range(horizon):
            q_new = _backup(mdp, gamma, v)
            residuals.append(float(np.max(np.abs(q_new - q))))
            q = q_new
            v[:S] = q.max(axis=1)
        return QFunction(q, gamma, mdp.trajectory_ids, tuple(residuals))
    if gamma == 1.0:
        raise ValueError("gamma == 1 needs a finite horizon")
    for _ in range(max_iter):
        q_new = _backup(mdp, gamma, v)
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        v[:S] = q.max(axis=1)
        if res < tol:
            return QFunction(q, gamma, mdp.trajectory_ids, tuple(residuals))
    raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps", residuals[-1])


def evaluate_policy_q(
    mdp: MDPModel,
    policy,
    gamma: float = 0.95,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    horizon: int | None = None,
) -> QFunction:
    """Q-function of a fixed policy on ``mdp`` (iterative policy evaluation)."""
    pi = as_probs(policy)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match model {(mdp.n_states, mdp.n_actions)}")
    S = mdp.n_states
    v = np.zeros(S + 2)
    q = np.zeros((S, mdp.n_actions))
    residuals = []
    n_sweeps = horizon if horizon is not None else max_iter
    if horizon is None and gamma == 1.0:
        raise ValueError("gamma == 1 needs a finite horizon")
    for _ in range(n_sweeps):
        q_new = _backup(mdp, gamma, v)
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        v[:S] = np.sum(pi * q, axis=1)
        if horizon is None and res < tol:
            break
    else:
        if horizon is None:
            raise ConvergenceError(f"policy evaluation did not converge in {max_iter} sweeps", residuals[-1])
    return QFunction(q, gamma, mdp.trajectory_ids, tuple(residuals))


def greedy_policy(q: QFunction | np.ndarray) -> TabularPolicy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    qv = q.q if isinstance(q, QFunction) else np.asarray(q, dtype=np.float64)
    return TabularPolicy.from_actions(np.argmax(qv, axis=1), qv.shape[1])


def soften_policy(
    policy: TabularPolicy,
    epsilon: float | None = None,
    temperature: float | None = None,
    q: QFunction | np.ndarray | None = None,
) -> TabularPolicy:
    """Make a policy stochastic.

    ``epsilon`` mixes the policy with the uniform distribution,
    ``(1 - eps) * pi + eps / A``.  ``temperature`` instead returns a softmax
    over ``q`` (which must then be given).
    """
    if (epsilon is None) == (temperature is None):
        raise ValueError("give exactly one of epsilon or temperature")
    if epsilon is not None:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        p = policy.probs
        return TabularPolicy((1.0 - epsilon) * p + epsilon / p.shape[1])
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if q is None:
        raise ValueError("temperature softening needs a Q-function")
    qv = q.q if isinstance(q, QFunction) else np.asarray(q, dtype=np.float64)
    z = (qv - qv.max(axis=1, keepdims=True)) / temperature
    e = np.exp(z)
    return TabularPolicy(e / e.sum(axis=1, keepdims=True))


class Baseline(str, Enum):
    RANDOM = "random"
    NO_ACTION = "noaction"
    MOST_COMMON = "mostcommon"


def baseline_policy(
    kind: Baseline | str,
    n_states: int | None = None,
    n_actions: int | None = None,
    behavior: TabularPolicy | None = None,
) -> TabularPolicy:
    kind = Baseline(kind)
    if kind is Baseline.MOST_COMMON:
        if behavior is None:
            raise ValueError("the most-common-action policy needs a behavior policy")
        return TabularPolicy.from_actions(behavior.greedy_actions(), behavior.n_actions)
    if n_states is None or n_actions is None:
        raise ValueError("n_states and n_actions are required")
    if kind is Baseline.RANDOM:
        return TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))
    return TabularPolicy.from_actions(np.zeros(n_states, dtype=np.int64), n_actions)
