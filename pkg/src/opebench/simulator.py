"""A small confounded ICU simulator with exact ground truth.

Patients carry an acuity level ``0 .. L-1`` and a fixed frailty bit.  Each
step the clinician picks a treatment level on one or two axes (fluids and,
optionally, vasopressors); treatment intensity ``x`` in ``[0, 1]`` is the
mean level over the active axes divided by ``U - 1``.  Then, independently,

* an improvement event happens with probability
  ``recovery + treat_effect * x``, and
* a deterioration event happens with probability
  ``deterioration + frailty_deterioration * frail
  + overtreat_penalty * max(0, x - need(acuity))``,
  where ``need(a) = a / (L - 1)``.

Exactly one event moves acuity by one level; both or neither leave it
unchanged.  Dropping below 0 discharges the patient (survival), rising past
``L - 1`` is death.  A patient still in the unit after ``horizon_max``
steps survives iff their acuity is below ``survive_cutoff``.

The clinician's policy is a softmax over actions peaked at a target
intensity that grows with acuity and with frailty, so sicker (and frail)
patients are treated harder.  When frailty is hidden the logged state is
acuity alone.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .core import DEFAULT_TERMINAL_REWARD, Dataset, Trajectory
from .policies import MDPModel, TabularPolicy, as_probs

SCENARIOS = ("HighAcuityGap", "ConfoundedNoTreat", "LimitedActions")


@dataclass(frozen=True)
class SimConfig:
    n_acuity_levels: int = 6
    n_treat_levels: int = 5
    n_axes: int = 2
    horizon_max: int = 20
    treat_effect: float = 0.6
    overtreat_penalty: float = 0.3
    base_deterioration: float = 0.3
    base_recovery: float = 0.2
    survive_cutoff: int | None = None
    init_acuity: tuple[float, ...] | None = None
    frailty_prevalence: float = 0.3
    frailty_deterioration: float = 0.15
    frailty_treat_boost: float = 0.25
    behavior_softmax_temp: float = 0.08
    behavior_balance: float = 0.0
    palliation_threshold: int | None = None
    palliation_intensity: float = 0.0
    hidden_covariate: bool = False
    censor_untreated_top: bool = False
    obs_noise_dim: int = 0
    obs_acuity_noise: float = 0.2
    fluid_dose_scale: float = 500.0
    vaso_dose_scale: float = 0.25
    terminal_reward: float = DEFAULT_TERMINAL_REWARD
    seed: int = 0

    def __post_init__(self):
        L = self.n_acuity_levels
        if L < 2:
            raise ValueError("n_acuity_levels must be at least 2")
        if self.n_treat_levels < 2:
            raise ValueError("n_treat_levels must be at least 2")
        if self.n_axes not in (1, 2):
            raise ValueError("n_axes must be 1 or 2")
        if self.horizon_max < 1:
            raise ValueError("horizon_max must be positive")
        for name in ("treat_effect", "overtreat_penalty", "base_deterioration", "base_recovery",
                     "frailty_prevalence", "frailty_deterioration", "frailty_treat_boost"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.behavior_softmax_temp <= 0:
            raise ValueError("behavior_softmax_temp must be positive")
        if self.behavior_balance < 0:
            raise ValueError("behavior_balance must be non-negative")
        if self.palliation_threshold is not None and not 0 <= self.palliation_threshold < L:
            raise ValueError("palliation_threshold must be an acuity level")
        if not 0.0 <= self.palliation_intensity <= 1.0:
            raise ValueError("palliation_intensity must lie in [0, 1]")
        if self.survive_cutoff is not None and not 0 <= self.survive_cutoff <= L:
            raise ValueError("survive_cutoff must lie inside the acuity range")
        if self.init_acuity is not None:
            p = np.asarray(self.init_acuity, dtype=np.float64)
            if p.shape != (L,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError("init_acuity must be a distribution over acuity levels")
            object.__setattr__(self, "init_acuity", tuple(float(v) for v in p))
        if self.obs_noise_dim < 0 or self.obs_acuity_noise < 0:
            raise ValueError("noise settings must be non-negative")
        if self.terminal_reward <= 0:
            raise ValueError("terminal_reward must be positive")

    @property
    def n_actions(self) -> int:
        return self.n_treat_levels**self.n_axes

    @property
    def cutoff(self) -> int:
        return self.survive_cutoff if self.survive_cutoff is not None else self.n_acuity_levels // 2

    def initial_acuity(self) -> np.ndarray:
        if self.init_acuity is not None:
            return np.asarray(self.init_acuity)
        # binomial bump centred on the lower-middle levels
        L = self.n_acuity_levels
        k = np.arange(L)
        w = np.exp(-0.5 * ((k - (L - 1) * 0.4) / max(L / 4, 0.5)) ** 2)
        return w / w.sum()

    def to_json(self) -> dict:
        d = asdict(self)
        if d["init_acuity"] is not None:
            d["init_acuity"] = list(d["init_acuity"])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown simulator settings: {sorted(unknown)}")
        obj = dict(obj)
        if obj.get("init_acuity") is not None:
            obj["init_acuity"] = tuple(obj["init_acuity"])
        return cls(**obj)


def scenario(name: str, **overrides) -> SimConfig:
    """Preset configurations reproducing known evaluation failure modes.

    ``HighAcuityGap``
        clinicians never withhold treatment at the top acuity level, so the
        data holds no untreated top-acuity records.
    ``ConfoundedNoTreat``
        hidden frailty drives both treatment intensity and deterioration;
        dose is strongly tied to acuity, the two drugs are given in step,
        and frail high-acuity patients are moved to low-dose comfort care.
    ``LimitedActions``
        a single treatment axis with two levels (treat / don't).
    """
    if name == "HighAcuityGap":
        cfg = SimConfig(censor_untreated_top=True)
    elif name == "ConfoundedNoTreat":
        cfg = SimConfig(
            hidden_covariate=True,
            frailty_prevalence=0.5,
            frailty_deterioration=0.3,
            frailty_treat_boost=0.4,
            behavior_softmax_temp=0.02,
            behavior_balance=10.0,
            treat_effect=0.8,
            overtreat_penalty=0.6,
            palliation_threshold=4,
            palliation_intensity=0.25,
        )
    elif name == "LimitedActions":
        cfg = SimConfig(n_axes=1, n_treat_levels=2, overtreat_penalty=0.1, behavior_softmax_temp=0.3)
    else:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact model of a :class:`SimConfig`.

    True states are ``frail * L + acuity``; ``model`` holds the stationary
    per-step dynamics (the horizon cutoff is applied separately by the
    evaluation routines).
    """

    config: SimConfig
    model: MDPModel
    behavior: TabularPolicy
    intensity: np.ndarray
    exact_mortality: float

    @property
    def n_true_states(self) -> int:
        return 2 * self.config.n_acuity_levels

    @property
    def n_logged_states(self) -> int:
        L = self.config.n_acuity_levels
        return L if self.config.hidden_covariate else 2 * L

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def action_grid(self) -> tuple[int, int]:
        U = self.config.n_treat_levels
        return (U, U) if self.config.n_axes == 2 else (U, 1)

    def true_state(self, acuity, frail):
        return np.asarray(frail, dtype=np.int64) * self.config.n_acuity_levels + np.asarray(acuity)

    def logged_state(self, true_state):
        s = np.asarray(true_state)
        return s % self.config.n_acuity_levels if self.config.hidden_covariate else s

    def lift(self, policy) -> np.ndarray:
        """Policy over logged states -> policy over true states (frailty ignored when hidden)."""
        p = as_probs(policy)
        if p.shape[1] != self.n_actions:
            raise ValueError(f"policy has {p.shape[1]} actions, simulator has {self.n_actions}")
        if p.shape[0] == self.n_true_states:
            return p
        if p.shape[0] == self.n_logged_states:
            return p[self.logged_state(np.arange(self.n_true_states))]
        raise ValueError(f"policy covers {p.shape[0]} states; expected {self.n_logged_states} or {self.n_true_states}")

    def logged_behavior(self) -> TabularPolicy:
        """Clinician policy as seen through the logged state (frailty marginalized
        by the stationary prevalence when hidden)."""
        if not self.config.hidden_covariate:
            return self.behavior
        L, pf = self.config.n_acuity_levels, self.config.frailty_prevalence
        b = self.behavior.probs
        return TabularPolicy((1 - pf) * b[:L] + pf * b[L:])

    def to_json(self) -> dict:
        return {
            "kind": "ground_truth",
            "config": self.config.to_json(),
            "model": self.model.to_json(),
            "behavior": self.behavior.to_json(),
            "intensity": self.intensity.tolist(),
            "exact_mortality": self.exact_mortality,
        }


def _action_levels(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    U = cfg.n_treat_levels
    a = np.arange(cfg.n_actions)
    if cfg.n_axes == 2:
        return a // U, a % U
    return a, np.zeros_like(a)


def build_ground_truth(cfg: SimConfig) -> GroundTruth:
    L, U = cfg.n_acuity_levels, cfg.n_treat_levels
    A = cfg.n_actions
    S = 2 * L
    alive, dead = S, S + 1
    fl, vl = _action_levels(cfg)
    x = (fl + vl) / (cfg.n_axes * (U - 1))
    P = np.zeros((S + 2, A, S + 2))
    for frail in (0, 1):
        for acu in range(L):
            s = frail * L + acu
            need = acu / (L - 1)
            p_down = np.clip(cfg.base_recovery + cfg.treat_effect * x, 0.0, 1.0)
            p_up = np.clip(
                cfg.base_deterioration + cfg.frailty_deterioration * frail
                + cfg.overtreat_penalty * np.maximum(0.0, x - need),
                0.0, 1.0,
            )
            up = p_up * (1 - p_down)
            down = p_down * (1 - p_up)
            stay = 1.0 - up - down
            up_to = dead if acu == L - 1 else s + 1
            down_to = alive if acu == 0 else s - 1
            P[s, :, up_to] += up
            P[s, :, down_to] += down
            P[s, :, s] += stay
    P[alive, :, alive] = 1.0
    P[dead, :, dead] = 1.0
    r = np.zeros(S + 2)
    r[alive], r[dead] = cfg.terminal_reward, -cfg.terminal_reward
    init_a = cfg.initial_acuity()
    init = np.concatenate([(1 - cfg.frailty_prevalence) * init_a, cfg.frailty_prevalence * init_a])
    model = MDPModel(P, r, init)

    behavior = np.zeros((S, A))
    for frail in (0, 1):
        for acu in range(L):
            target = min(acu / (L - 1) + cfg.frailty_treat_boost * frail, 1.0)
            if frail and cfg.palliation_threshold is not None and acu >= cfg.palliation_threshold:
                target = cfg.palliation_intensity  # comfort care
            # clinicians prefer matched fluid and vasopressor levels
            imbalance = ((fl - vl) / (U - 1)) ** 2 if cfg.n_axes == 2 else 0.0
            logits = -((x - target) ** 2 + cfg.behavior_balance * imbalance) / cfg.behavior_softmax_temp
            if cfg.censor_untreated_top and acu == L - 1:
                logits = np.where(x == 0, -np.inf, logits)
            e = np.exp(logits - logits.max())
            behavior[frail * L + acu] = e / e.sum()
    gt = GroundTruth(cfg, model, TabularPolicy(behavior), x, 0.0)
    mort = float(init @ _finite_horizon(gt, behavior, 1.0, cfg.horizon_max, alive_reward=0.0, dead_reward=1.0))
    return replace(gt, exact_mortality=mort)


# --------------------------------------------------------------------------
# exact evaluation

def _finite_horizon(
    gt: GroundTruth,
    policy: np.ndarray | None,
    gamma: float,
    horizon: int,
    alive_reward: float | None = None,
    dead_reward: float | None = None,
    return_q: bool = False,
):
    """Backward induction over ``horizon`` steps.  ``policy=None`` maximizes."""
    cfg = gt.config
    R = cfg.terminal_reward
    ra = R if alive_reward is None else alive_reward
    rd = -R if dead_reward is None else dead_reward
    S, L = gt.n_true_states, cfg.n_acuity_levels
    P = gt.model.transitions[:S]
    P_tr = P[:, :, :S]
    sink = P[:, :, S] * ra + P[:, :, S + 1] * rd
    acuity = np.arange(S) % L
    cut = np.where(acuity < cfg.cutoff, ra, rd)
    v = None
    q = None
    for t in range(horizon - 1, -1, -1):
        if t == horizon - 1:
            q = sink + P_tr @ cut
        else:
            q = sink + gamma * (P_tr @ v)
        v = q.max(axis=1) if policy is None else np.sum(policy * q, axis=1)
    return (v, q) if return_q else v


def exact_state_values(gt: GroundTruth, policy, gamma: float = 0.95, horizon: int | None = None) -> np.ndarray:
    horizon = gt.config.horizon_max if horizon is None else horizon
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return _finite_horizon(gt, gt.lift(policy), gamma, horizon)


def exact_value(gt: GroundTruth, policy, gamma: float = 0.95, horizon: int | None = None) -> float:
    """Expected discounted return of ``policy`` from the initial distribution."""
    return float(gt.model.initial @ exact_state_values(gt, policy, gamma, horizon))


def exact_q(gt: GroundTruth, gamma: float = 0.95, horizon: int | None = None, policy=None) -> np.ndarray:
    """First-step Q-values over true states; optimal continuation unless ``policy`` is given."""
    horizon = gt.config.horizon_max if horizon is None else horizon
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    pol = None if policy is None else gt.lift(policy)
    _, q = _finite_horizon(gt, pol, gamma, horizon, return_q=True)
    return q


def optimal_policy(gt: GroundTruth, gamma: float = 0.95, horizon: int | None = None) -> TabularPolicy:
    q = exact_q(gt, gamma, horizon)
    return TabularPolicy.from_actions(np.argmax(q, axis=1), gt.n_actions)


def enumerate_value(
    gt: GroundTruth,
    policy,
    gamma: float = 0.95,
    horizon: int | None = None,
    max_leaves: int = 1_000_000,
) -> float:
    """Exhaustive trajectory-tree enumeration; an independent check on :func:`exact_value`."""
    horizon = gt.config.horizon_max if horizon is None else horizon
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    cfg = gt.config
    pi = gt.lift(policy)
    S, L, R = gt.n_true_states, cfg.n_acuity_levels, cfg.terminal_reward
    P = gt.model.transitions
    leaves = 0
    total = 0.0
    stack = [(int(s), 0, float(p)) for s, p in enumerate(gt.model.initial) if p > 0]
    while stack:
        s, t, prob = stack.pop()
        for a in np.flatnonzero(pi[s] > 0):
            pa = prob * pi[s, a]
            for nxt in np.flatnonzero(P[s, a] > 0):
                pn = pa * P[s, a, nxt]
                if nxt == S or nxt == S + 1 or t == horizon - 1:
                    leaves += 1
                    if leaves > max_leaves:
                        raise ValueError(f"trajectory tree exceeds {max_leaves} leaves")
                    if nxt == S:
                        reward = R
                    elif nxt == S + 1:
                        reward = -R
                    else:
                        reward = R if nxt % L < cfg.cutoff else -R
                    total += pn * gamma**t * reward
                else:
                    stack.append((int(nxt), t + 1, pn))
    return total


# --------------------------------------------------------------------------
# sampling

def _dose(levels: np.ndarray, n_levels: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Level 0 is no drug; level k >= 1 draws from the k-th equal-mass band of
    an exponential with the given scale, the top band being its whole tail."""
    u = rng.random(levels.shape)
    q = (levels - 1 + u) / (n_levels - 1)
    q = np.clip(q, 0.0, 1.0 - 1e-12)
    dose = -scale * np.log1p(-q)
    return np.where(levels == 0, 0.0, dose)


def observation_names(cfg: SimConfig) -> list[str]:
    names = ["acuity_score"]
    if not cfg.hidden_covariate:
        names.append("frailty")
    return names + [f"noise_{i}" for i in range(cfg.obs_noise_dim)]


def sample_observations(gt: GroundTruth, true_states, rng: np.random.Generator) -> np.ndarray:
    """Logged feature vectors for the given true states: a noisy acuity score,
    the frailty bit unless hidden, then pure-noise features."""
    cfg = gt.config
    s = np.asarray(true_states, dtype=np.int64).reshape(-1)
    L = cfg.n_acuity_levels
    cols = [(s % L) + cfg.obs_acuity_noise * rng.standard_normal(s.size)]
    if not cfg.hidden_covariate:
        cols.append((s // L).astype(np.float64))
    if cfg.obs_noise_dim:
        cols.append(rng.standard_normal((s.size, cfg.obs_noise_dim)))
    return np.column_stack(cols)


def _cdf(p: np.ndarray) -> np.ndarray:
    # dividing by the total makes every entry at or past the last nonzero
    # probability exactly 1.0, so a uniform draw below 1 never selects it
    c = np.cumsum(p, axis=-1)
    return c / c[..., -1:]


def sample_dataset(gt: GroundTruth, n: int, seed: int | None = None) -> Dataset:
    """Draw ``n`` trajectories under the clinician policy.

    Each step is annotated with its logged state id and the treatment levels,
    which double as dose bins; re-discretizing from the raw doses and
    observations is left to :mod:`opebench.representation`.
    """
    if n < 1:
        raise ValueError("n must be positive")
    cfg = gt.config
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    L, H, A = cfg.n_acuity_levels, cfg.horizon_max, cfg.n_actions
    S = gt.n_true_states
    frail = (rng.random(n) < cfg.frailty_prevalence).astype(np.int64)
    acu = rng.choice(L, size=n, p=cfg.initial_acuity())
    state = gt.true_state(acu, frail)
    states = np.full((n, H), -1, dtype=np.int64)
    actions = np.full((n, H), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    died = np.zeros(n, dtype=bool)
    active = np.arange(n)
    b_cdf = _cdf(gt.behavior.probs)
    p_cdf = _cdf(gt.model.transitions)
    for t in range(H):
        s = state[active]
        act = np.minimum((b_cdf[s] < rng.random(active.size)[:, None]).sum(axis=1), A - 1)
        nxt = np.minimum((p_cdf[s, act] < rng.random(active.size)[:, None]).sum(axis=1), S + 1)
        states[active, t] = s
        actions[active, t] = act
        ended = (nxt >= S) | (t == H - 1)
        fin = active[ended]
        lengths[fin] = t + 1
        ns = nxt[ended]
        died[fin] = np.where(ns == S + 1, True, np.where(ns == S, False, ns % L >= cfg.cutoff))
        state[active] = np.where(ended, state[active], nxt)
        active = active[~ended]
        if active.size == 0:
            break

    mask = actions >= 0
    flat_s, flat_a = states[mask], actions[mask]
    fl, vl = _action_levels(cfg)
    fluid_lvl, vaso_lvl = fl[flat_a], vl[flat_a]
    fluid = _dose(fluid_lvl, cfg.n_treat_levels, cfg.fluid_dose_scale, rng)
    vaso = _dose(vaso_lvl, cfg.n_treat_levels, cfg.vaso_dose_scale, rng) if cfg.n_axes == 2 else np.zeros(flat_a.size)
    obs = sample_observations(gt, flat_s, rng)
    names = observation_names(cfg)
    logged = gt.logged_state(flat_s)
    n_vaso_bins = gt.action_grid[1]

    trajs = []
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    R = cfg.terminal_reward
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        T = hi - lo
        rewards = np.zeros(T)
        rewards[-1] = -R if died[i] else R
        trajs.append(
            Trajectory(
                f"sim-{i:06d}",
                obs[lo:hi],
                fluid[lo:hi],
                vaso[lo:hi],
                rewards,
                "died" if died[i] else "survived",
                state_ids=logged[lo:hi],
                fluid_bins=fluid_lvl[lo:hi],
                vaso_bins=vaso_lvl[lo:hi],
                actions=fluid_lvl[lo:hi] * n_vaso_bins + vaso_lvl[lo:hi],
            )
        )
    meta = {"source": "simulator", "config": cfg.to_json(), "seed": int(cfg.seed if seed is None else seed)}
    return Dataset(tuple(trajs), tuple(names), meta, gt.n_logged_states, gt.action_grid)


def save_ground_truth(gt: GroundTruth, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(gt.to_json()) + "\n")


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    obj = json.loads(Path(path).read_text())
    if obj.get("kind") != "ground_truth":
        raise ValueError(f"{path}: not a ground-truth file")
    return build_ground_truth(SimConfig.from_json(obj["config"]))
