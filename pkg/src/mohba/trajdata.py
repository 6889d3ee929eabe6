"""Trajectory data model and the JSON-lines dataset format shared across the package.

A dataset file is UTF-8 JSON lines: line 1 holds ``{"meta": {...}}``, every
following line one trajectory record with keys run_id, seed, train_step,
states, actions, rewards. Floats are written with 17 significant digits so a
save/load round-trip reproduces every value bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DatasetMeta",
    "Trajectory",
    "TrajectoryDataset",
    "save_dataset",
    "load_dataset",
    "split_dataset",
    "split_indices",
]


@dataclass(frozen=True)
class DatasetMeta:
    """Shape contract every trajectory in a dataset must satisfy."""

    n_agents: int
    state_dim: int
    action_dims: tuple[int, ...]
    episode_len: int
    has_rewards: bool

    def __post_init__(self):
        object.__setattr__(self, "action_dims", tuple(int(a) for a in self.action_dims))
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if len(self.action_dims) != self.n_agents:
            raise ValueError(
                f"action_dims has {len(self.action_dims)} entries for {self.n_agents} agents"
            )
        if any(a < 1 for a in self.action_dims):
            raise ValueError(f"action_dims must all be >= 1, got {self.action_dims}")
        if self.episode_len < 1:
            raise ValueError(f"episode_len must be >= 1, got {self.episode_len}")


@dataclass
class Trajectory:
    """One episode: states s_0..s_T plus the T per-agent actions that produced them.

    actions is stored per agent: actions[i] is a (T, action_dims[i]) array.
    The file format nests the other way (per timestep, then per agent); the
    save/load functions convert.
    """

    states: np.ndarray
    actions: list[np.ndarray]
    rewards: np.ndarray | None = None
    run_id: str = "unknown"
    train_step: int = 0
    seed: int = 0

    def validate(self, meta: DatasetMeta) -> None:
        T, D = meta.episode_len, meta.state_dim
        if self.states.shape != (T + 1, D):
            raise ValueError(
                f"states shape {self.states.shape}, expected {(T + 1, D)}"
            )
        if len(self.actions) != meta.n_agents:
            raise ValueError(
                f"actions cover {len(self.actions)} agents, expected {meta.n_agents}"
            )
        for i, acts in enumerate(self.actions):
            want = (T, meta.action_dims[i])
            if acts.shape != want:
                raise ValueError(f"agent {i} actions shape {acts.shape}, expected {want}")
        if meta.has_rewards:
            if self.rewards is None:
                raise ValueError("meta.has_rewards is set but rewards are missing")
            if self.rewards.shape != (T, meta.n_agents):
                raise ValueError(
                    f"rewards shape {self.rewards.shape}, expected {(T, meta.n_agents)}"
                )
        elif self.rewards is not None:
            raise ValueError("rewards present but meta.has_rewards is false")
        if self.train_step < 0:
            raise ValueError(f"train_step must be >= 0, got {self.train_step}")


@dataclass
class TrajectoryDataset:
    """An ordered list of trajectories conforming to a shared DatasetMeta."""

    meta: DatasetMeta
    trajectories: list[Trajectory] = field(default_factory=list)

    def append(self, traj: Trajectory) -> None:
        traj.validate(self.meta)
        self.trajectories.append(traj)

    def validate(self) -> None:
        for k, traj in enumerate(self.trajectories):
            try:
                traj.validate(self.meta)
            except ValueError as exc:
                raise ValueError(f"trajectory {k}: {exc}") from exc

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, idx: int) -> Trajectory:
        return self.trajectories[idx]


def _fmt(x: float) -> str:
    # JSON has no NaN/Inf literal, so only finite values are representable.
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return format(float(x), ".17g")


def _fmt_matrix(mat: np.ndarray) -> str:
    rows = (",".join(_fmt(v) for v in row) for row in mat)
    return "[[" + "],[".join(rows) + "]]"


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """Write the dataset as JSON lines (meta first, one trajectory per line)."""
    dataset.validate()
    meta = dataset.meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": {
            "n_agents": meta.n_agents,
            "state_dim": meta.state_dim,
            "action_dims": list(meta.action_dims),
            "episode_len": meta.episode_len,
            "has_rewards": meta.has_rewards,
        }}, separators=(",", ":")))
        fh.write("\n")
        for traj in dataset.trajectories:
            steps = []
            for t in range(meta.episode_len):
                per_agent = ",".join(
                    "[" + ",".join(_fmt(v) for v in traj.actions[i][t]) + "]"
                    for i in range(meta.n_agents)
                )
                steps.append("[" + per_agent + "]")
            rewards = _fmt_matrix(traj.rewards) if traj.rewards is not None else "null"
            fh.write(
                '{"run_id":%s,"seed":%d,"train_step":%d,"states":%s,"actions":[%s],"rewards":%s}\n'
                % (
                    json.dumps(traj.run_id),
                    traj.seed,
                    traj.train_step,
                    _fmt_matrix(traj.states),
                    ",".join(steps),
                    rewards,
                )
            )


def load_dataset(path) -> TrajectoryDataset:
    """Read a JSON-lines dataset, validating every trajectory against the meta line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, expected a meta line")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1: malformed JSON: {exc}") from exc
    if not isinstance(head, dict) or "meta" not in head:
        raise ValueError(f"{path}: line 1: expected a meta record")
    m = head["meta"]
    meta = DatasetMeta(
        n_agents=int(m["n_agents"]),
        state_dim=int(m["state_dim"]),
        action_dims=tuple(m["action_dims"]),
        episode_len=int(m["episode_len"]),
        has_rewards=bool(m["has_rewards"]),
    )
    dataset = TrajectoryDataset(meta=meta)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {lineno}: malformed JSON: {exc}") from exc
        try:
            states = np.asarray(rec["states"], dtype=np.float64)
            raw_actions = rec["actions"]
            actions = [
                np.asarray([step[i] for step in raw_actions], dtype=np.float64)
                if raw_actions
                else np.zeros((0, meta.action_dims[i]))
                for i in range(meta.n_agents)
            ]
            rewards = rec.get("rewards")
            traj = Trajectory(
                states=states,
                actions=actions,
                rewards=None if rewards is None else np.asarray(rewards, dtype=np.float64),
                run_id=str(rec.get("run_id", "unknown")),
                train_step=int(rec.get("train_step", 0)),
                seed=int(rec.get("seed", 0)),
            )
            traj.validate(meta)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ValueError(
                f"{path}: line {lineno} (trajectory {lineno - 2}): {exc}"
            ) from exc
        dataset.trajectories.append(traj)
    return dataset


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled (train, val) index split; val gets ceil(n * val_fraction)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if n < 1:
        raise ValueError("cannot split an empty collection")
    # floor on the train side with an epsilon guard so exact-integer products
    # (0.2 * 5 rounds above 1.0 in IEEE) do not flip the boundary
    n_train = int(math.floor(n * (1.0 - val_fraction) + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    return train_idx, val_idx


def split_dataset(
    dataset: TrajectoryDataset, val_fraction: float, seed: int
) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Split into (train, val) datasets by a seeded shuffle, preserving file order inside each."""
    train_idx, val_idx = split_indices(len(dataset), val_fraction, seed)
    train = TrajectoryDataset(meta=dataset.meta,
                              trajectories=[dataset.trajectories[i] for i in train_idx])
    val = TrajectoryDataset(meta=dataset.meta,
                            trajectories=[dataset.trajectories[i] for i in val_idx])
    return train, val
