import numpy as np
import pytest

from opebench.core import Dataset, Trajectory


def make_traj(tid, states, actions, died=False, n_vaso=5, d=2, rng=None, doses=None):
    """Small discretized trajectory with the sparse terminal reward."""
    T = len(states)
    rng = rng if rng is not None else np.random.default_rng(0)
    rewards = np.zeros(T)
    rewards[-1] = -100.0 if died else 100.0
    actions = np.asarray(actions)
    fluid, vaso = doses if doses is not None else (np.zeros(T), np.zeros(T))
    return Trajectory(
        tid,
        rng.normal(size=(T, d)),
        fluid,
        vaso,
        rewards,
        "died" if died else "survived",
        state_ids=states,
        fluid_bins=actions // n_vaso,
        vaso_bins=actions % n_vaso,
        actions=actions,
    )


def random_dataset(rng, n=20, n_states=3, grid=(2, 2), max_len=5, d=2):
    """Random discretized dataset over a small state/action space."""
    A = grid[0] * grid[1]
    trajs = []
    for i in range(n):
        T = int(rng.integers(1, max_len + 1))
        trajs.append(
            make_traj(
                f"t{i}",
                rng.integers(0, n_states, T),
                rng.integers(0, A, T),
                died=bool(rng.random() < 0.3),
                n_vaso=grid[1],
                d=d,
                rng=rng,
            )
        )
    return Dataset(tuple(trajs), n_states=n_states, action_grid=grid)


def random_policy(rng, S, A, zeros=False):
    p = rng.random((S, A)) + (0.0 if zeros else 0.05)
    if zeros:
        p[p < 0.3] = 0.0
        p[np.arange(S), rng.integers(0, A, S)] += 0.5
    return p / p.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def enumerate_mdp_value(mdp, choose, gamma, horizon):
    """Brute-force value of a (possibly time-varying) policy on a fitted model.

    ``choose(t, s)`` returns the action distribution at step ``t``.  Walks the
    whole trajectory tree; sinks pay their entry reward once and stop.
    """
    S = mdp.n_states
    total = 0.0
    stack = [(s, 0, p) for s, p in enumerate(mdp.initial) if p > 0]
    while stack:
        s, t, prob = stack.pop()
        pi = choose(t, s)
        for a in np.flatnonzero(pi > 0):
            for nxt in np.flatnonzero(mdp.transitions[s, a] > 0):
                pn = prob * pi[a] * mdp.transitions[s, a, nxt]
                total += pn * gamma**t * mdp.entry_rewards[nxt]
                if nxt < S and t + 1 < horizon:
                    stack.append((int(nxt), t + 1, pn))
    return total
