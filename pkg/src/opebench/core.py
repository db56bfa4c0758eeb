"""Trajectory data model, JSONL I/O, returns, cohort statistics and splits.

A logged patient history is stored as a :class:`Trajectory` holding per-step
arrays (observations, raw doses, rewards) plus optional discretization
annotations (state ids, dose bins, flat action index).  A :class:`Dataset` is
an immutable collection of trajectories that also knows the size of the
discrete state and action spaces once it has been discretized.
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

DEFAULT_GAMMA = 0.95
DEFAULT_TERMINAL_REWARD = 100.0
DEFAULT_N_BINS = 5


class DatasetError(ValueError):
    """Raised for malformed or inconsistent trajectory data."""


class Outcome(str, enum.Enum):
    SURVIVED = "survived"
    DIED = "died"


@dataclass(frozen=True)
class EvalConfig:
    gamma: float = DEFAULT_GAMMA
    terminal_reward: float = DEFAULT_TERMINAL_REWARD
    n_bins: int = DEFAULT_N_BINS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.terminal_reward <= 0:
            raise ValueError("terminal_reward must be positive")
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")


class Step(NamedTuple):
    observation: np.ndarray
    fluid_dose: float
    vaso_dose: float
    reward: float
    state_id: int | None
    fluid_bin: int | None
    vaso_bin: int | None
    action: int | None


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _optional_int_array(values, length: int, name: str) -> np.ndarray | None:
    if values is None:
        return None
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.shape[0] != length:
        raise DatasetError(f"{name} has length {arr.shape[0]}, expected {length}")
    return _frozen(arr.copy())


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One patient history.

    ``obs`` is a ``(T, d)`` float array; the dose and reward arrays have
    length ``T``.  The discretization fields are ``None`` until the
    trajectory has been annotated by :func:`opebench.representation.discretize`
    (or by the simulator, which logs its own state and action indices).
    """

    id: str
    obs: np.ndarray
    fluid_dose: np.ndarray
    vaso_dose: np.ndarray
    rewards: np.ndarray
    outcome: Outcome
    state_ids: np.ndarray | None = None
    fluid_bins: np.ndarray | None = None
    vaso_bins: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1) if obs.size else obs.reshape(0, 0)
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise DatasetError(f"trajectory {self.id!r}: needs at least one step")
        T = obs.shape[0]
        if not np.all(np.isfinite(obs)):
            raise DatasetError(f"trajectory {self.id!r}: non-finite feature value")
        arrays = {}
        for name in ("fluid_dose", "vaso_dose", "rewards"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape[0] != T:
                raise DatasetError(f"trajectory {self.id!r}: {name} has length {arr.shape[0]}, expected {T}")
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"trajectory {self.id!r}: non-finite {name}")
            arrays[name] = _frozen(arr.copy())
        if np.any(arrays["fluid_dose"] < 0) or np.any(arrays["vaso_dose"] < 0):
            raise DatasetError(f"trajectory {self.id!r}: negative dose")
        object.__setattr__(self, "obs", _frozen(obs.copy()))
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        for name in ("state_ids", "fluid_bins", "vaso_bins", "actions"):
            object.__setattr__(self, name, _optional_int_array(getattr(self, name), T, name))

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def n_features(self) -> int:
        return self.obs.shape[1]

    @property
    def died(self) -> bool:
        return self.outcome is Outcome.DIED

    @property
    def is_discretized(self) -> bool:
        return self.state_ids is not None and self.actions is not None

    @property
    def steps(self) -> list[Step]:
        out = []
        for t in range(len(self)):
            out.append(
                Step(
                    self.obs[t],
                    float(self.fluid_dose[t]),
                    float(self.vaso_dose[t]),
                    float(self.rewards[t]),
                    None if self.state_ids is None else int(self.state_ids[t]),
                    None if self.fluid_bins is None else int(self.fluid_bins[t]),
                    None if self.vaso_bins is None else int(self.vaso_bins[t]),
                    None if self.actions is None else int(self.actions[t]),
                )
            )
        return out

    def replace(self, **changes) -> "Trajectory":
        fields_ = {
            "id": self.id,
            "obs": self.obs,
            "fluid_dose": self.fluid_dose,
            "vaso_dose": self.vaso_dose,
            "rewards": self.rewards,
            "outcome": self.outcome,
            "state_ids": self.state_ids,
            "fluid_bins": self.fluid_bins,
            "vaso_bins": self.vaso_bins,
            "actions": self.actions,
        }
        fields_.update(changes)
        return Trajectory(**fields_)


class StepArrays(NamedTuple):
    """Padded ``(N, T_max)`` view of a discretized dataset.

    Padding positions have ``mask == False``, state and action 0 and reward 0.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    feature_names: tuple[str, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)
    n_states: int | None = None
    action_grid: tuple[int, int] = (DEFAULT_N_BINS, DEFAULT_N_BINS)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if trajs:
            d = trajs[0].n_features
            for tr in trajs:
                if tr.n_features != d:
                    raise DatasetError(
                        f"trajectory {tr.id!r} has {tr.n_features} features, expected {d}"
                    )
            names = tuple(self.feature_names) or tuple(f"f{i}" for i in range(d))
            if len(names) != d:
                raise DatasetError(f"{len(names)} feature names for {d} features")
            object.__setattr__(self, "feature_names", names)
        grid = tuple(int(b) for b in self.action_grid)
        if len(grid) != 2 or min(grid) < 1:
            raise DatasetError(f"bad action grid {self.action_grid}")
        object.__setattr__(self, "action_grid", grid)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def n_actions(self) -> int:
        return self.action_grid[0] * self.action_grid[1]

    @property
    def n_features(self) -> int:
        return self.trajectories[0].n_features if self.trajectories else len(self.feature_names)

    @property
    def ids(self) -> list[str]:
        return [tr.id for tr in self.trajectories]

    @property
    def is_discretized(self) -> bool:
        return bool(self.trajectories) and all(tr.is_discretized for tr in self.trajectories)

    @cached_property
    def lengths(self) -> np.ndarray:
        return _frozen(np.array([len(tr) for tr in self.trajectories], dtype=np.int64))

    @cached_property
    def step_arrays(self) -> StepArrays:
        if not self.is_discretized:
            raise DatasetError("dataset has no state/action annotations; discretize it first")
        lengths = self.lengths
        n, T = len(self), int(lengths.max())
        states = np.zeros((n, T), dtype=np.int64)
        actions = np.zeros((n, T), dtype=np.int64)
        rewards = np.zeros((n, T))
        mask = np.arange(T)[None, :] < lengths[:, None]
        for i, tr in enumerate(self.trajectories):
            L = len(tr)
            states[i, :L] = tr.state_ids
            actions[i, :L] = tr.actions
            rewards[i, :L] = tr.rewards
        for a in (states, actions, rewards, mask):
            _frozen(a)
        return StepArrays(states, actions, rewards, mask, lengths)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(
            tuple(self.trajectories[i] for i in indices),
            self.feature_names,
            self.metadata,
            self.n_states,
            self.action_grid,
        )

    def with_trajectories(self, trajectories: Sequence[Trajectory], **changes) -> "Dataset":
        kw = {
            "feature_names": self.feature_names,
            "metadata": self.metadata,
            "n_states": self.n_states,
            "action_grid": self.action_grid,
        }
        kw.update(changes)
        return Dataset(tuple(trajectories), **kw)

    def observations(self) -> np.ndarray:
        """All per-step observations stacked into an ``(n_steps, d)`` array."""
        return np.concatenate([tr.obs for tr in self.trajectories], axis=0)


def flat_action(fluid_bin, vaso_bin, n_vaso_bins: int = DEFAULT_N_BINS):
    """Flat action index ``fluid_bin * n_vaso_bins + vaso_bin``."""
    return np.asarray(fluid_bin) * n_vaso_bins + np.asarray(vaso_bin)


def split_action(action, n_vaso_bins: int = DEFAULT_N_BINS):
    a = np.asarray(action)
    return a // n_vaso_bins, a % n_vaso_bins


# --------------------------------------------------------------------------
# validation

def validate_rewards(traj: Trajectory, terminal_reward: float = DEFAULT_TERMINAL_REWARD) -> None:
    """Check the sparse terminal reward scheme: zero everywhere but the last
    step, which carries ``+terminal_reward`` on survival and ``-terminal_reward``
    on death."""
    expected = -terminal_reward if traj.died else terminal_reward
    if traj.rewards[-1] != expected:
        raise DatasetError(
            f"trajectory {traj.id!r}: final reward {traj.rewards[-1]} does not match "
            f"outcome {traj.outcome.value} (expected {expected})"
        )
    if np.any(traj.rewards[:-1] != 0):
        raise DatasetError(f"trajectory {traj.id!r}: non-zero reward before the final step")


# --------------------------------------------------------------------------
# JSONL I/O

_STEP_KEYS = ("obs", "fluid_dose", "vaso_dose", "reward")
_ANNOTATION_KEYS = ("state_id", "fluid_bin", "vaso_bin")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _parse_line(obj: Any, lineno: int) -> dict:
    def fail(msg):
        raise DatasetError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("expected a JSON object")
    for key in ("id", "outcome", "steps"):
        if key not in obj:
            fail(f"missing field '{key}'")
    if not isinstance(obj["id"], str):
        fail("field 'id' must be a string")
    if obj["outcome"] not in ("survived", "died"):
        fail(f"field 'outcome' must be 'survived' or 'died', got {obj['outcome']!r}")
    steps = obj["steps"]
    if not isinstance(steps, list) or not steps:
        fail("field 'steps' must be a non-empty list")
    cols: dict[str, list] = {k: [] for k in _STEP_KEYS + _ANNOTATION_KEYS}
    for j, st in enumerate(steps):
        if not isinstance(st, dict):
            fail(f"steps[{j}] must be an object")
        for key in _STEP_KEYS:
            if key not in st:
                fail(f"steps[{j}] missing field '{key}'")
        obs = st["obs"]
        if not isinstance(obs, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obs):
            fail(f"steps[{j}].obs must be a list of numbers")
        if not all(math.isfinite(v) for v in obs):
            fail(f"steps[{j}].obs contains a non-finite value")
        for key in ("fluid_dose", "vaso_dose", "reward"):
            v = st[key]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                fail(f"steps[{j}].{key} must be a finite number")
        for key in _STEP_KEYS:
            cols[key].append(st[key])
        for key in _ANNOTATION_KEYS:
            cols[key].append(st.get(key))
    dims = {len(o) for o in cols["obs"]}
    if len(dims) != 1:
        fail("observation length varies across steps")
    annotations = {}
    for key in _ANNOTATION_KEYS:
        vals = cols[key]
        present = [v is not None for v in vals]
        if any(present) and not all(present):
            fail(f"field '{key}' present on some steps only")
        if all(present):
            if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in vals):
                fail(f"field '{key}' must be a non-negative integer")
            annotations[key] = vals
    return {"id": obj["id"], "outcome": obj["outcome"], "cols": cols, "annotations": annotations}


def load_dataset(
    path: str | os.PathLike,
    strict: bool = True,
    terminal_reward: float = DEFAULT_TERMINAL_REWARD,
) -> Dataset:
    """Read a trajectory JSONL file.

    A sidecar ``<path>.meta.json`` (written by :func:`save_dataset`) supplies
    feature names and metadata along with the state/action space sizes; without
    it the action grid defaults to 5x5 and the state count is inferred from
    the largest state id.  With ``strict`` the terminal reward scheme is
    enforced on every trajectory.
    """
    path = Path(path)
    meta: dict[str, Any] = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    grid = tuple(meta.get("action_grid", (DEFAULT_N_BINS, DEFAULT_N_BINS)))
    trajs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = _parse_line(obj, lineno)
            cols, ann = rec["cols"], rec["annotations"]
            kw = {}
            if "state_id" in ann:
                kw["state_ids"] = ann["state_id"]
            if "fluid_bin" in ann and "vaso_bin" in ann:
                kw["fluid_bins"] = ann["fluid_bin"]
                kw["vaso_bins"] = ann["vaso_bin"]
                kw["actions"] = flat_action(ann["fluid_bin"], ann["vaso_bin"], grid[1])
            try:
                tr = Trajectory(
                    rec["id"],
                    np.array(cols["obs"], dtype=np.float64),
                    cols["fluid_dose"],
                    cols["vaso_dose"],
                    cols["reward"],
                    rec["outcome"],
                    **kw,
                )
                if strict:
                    validate_rewards(tr, terminal_reward)
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            trajs.append(tr)
    if not trajs:
        raise DatasetError(f"{path}: no trajectories")
    n_states = meta.get("n_states")
    if n_states is None and all(tr.state_ids is not None for tr in trajs):
        n_states = int(max(int(tr.state_ids.max()) for tr in trajs)) + 1
    try:
        return Dataset(
            tuple(trajs),
            tuple(meta.get("feature_names", ())),
            meta.get("metadata", {}),
            n_states,
            grid,
        )
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def trajectory_to_dict(tr: Trajectory) -> dict:
    steps = []
    for t in range(len(tr)):
        st = {
            "obs": [float(v) for v in tr.obs[t]],
            "fluid_dose": float(tr.fluid_dose[t]),
            "vaso_dose": float(tr.vaso_dose[t]),
            "reward": float(tr.rewards[t]),
        }
        if tr.state_ids is not None:
            st["state_id"] = int(tr.state_ids[t])
        if tr.fluid_bins is not None and tr.vaso_bins is not None:
            st["fluid_bin"] = int(tr.fluid_bins[t])
            st["vaso_bin"] = int(tr.vaso_bins[t])
        steps.append(st)
    return {"id": tr.id, "outcome": tr.outcome.value, "steps": steps}


def save_dataset(ds: Dataset, path: str | os.PathLike, write_meta: bool = True) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for tr in ds.trajectories:
            fh.write(json.dumps(trajectory_to_dict(tr), separators=(", ", ": ")))
            fh.write("\n")
    if write_meta:
        meta = {
            "feature_names": list(ds.feature_names),
            "n_states": ds.n_states,
            "action_grid": list(ds.action_grid),
            "metadata": ds.metadata,
        }
        _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# returns and cohort statistics

def discount_vector(gamma: float, length: int) -> np.ndarray:
    return gamma ** np.arange(length, dtype=np.float64)


def compute_return(traj: Trajectory, gamma: float = DEFAULT_GAMMA) -> float:
    """Discounted return ``sum_t gamma**t * r_t``; ``gamma=1`` gives the plain sum."""
    return float(np.dot(discount_vector(gamma, len(traj)), traj.rewards))


def discounted_returns(ds: Dataset, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return np.array([compute_return(tr, gamma) for tr in ds.trajectories])


@dataclass(frozen=True)
class CohortStats:
    mortality: float
    mean_length: float
    n_patients: int


def cohort_stats(ds: Dataset) -> CohortStats:
    if len(ds) == 0:
        raise DatasetError("cohort statistics of an empty dataset")
    died = sum(tr.died for tr in ds.trajectories)
    return CohortStats(died / len(ds), float(ds.lengths.mean()), len(ds))


def expected_value_approx(
    mortality: float,
    mean_length: float,
    gamma: float = DEFAULT_GAMMA,
    terminal_reward: float = DEFAULT_TERMINAL_REWARD,
) -> float:
    """Back-of-envelope policy value from a cohort mortality rate.

    Treats every patient as receiving the terminal reward after exactly
    ``mean_length`` steps:  ``gamma**T * (R * (1 - m) - R * m)``.
    """
    if not 0.0 <= mortality <= 1.0:
        raise ValueError(f"mortality must lie in [0, 1], got {mortality}")
    if mean_length <= 0:
        raise ValueError("mean_length must be positive")
    return gamma**mean_length * (-terminal_reward * mortality + terminal_reward * (1.0 - mortality))


def partition(ds: Dataset, train_frac: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random trajectory-level train/test split, reproducible for a fixed seed."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    n = len(ds)
    if n < 2:
        raise DatasetError("need at least two trajectories to partition")
    n_train = min(max(int(round(train_frac * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return ds.subset(train_idx), ds.subset(test_idx)
