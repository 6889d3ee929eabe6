"""Scripted behavior-policy rollouts producing labeled multimodal trajectory corpora.

Each pseudo training run fixes per-agent goal targets (a mode) and saves
trajectories at regular pseudo-checkpoints while action noise anneals from
noise_start down to noise_end, emulating the random-to-converged progression of
independent learning runs.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from .envs import (
    CoordGameConfig,
    DEFAULT_EPISODE_LEN,
    HillWorldConfig,
    coord_region,
    coord_reward,
    env_step,
    hill_reward,
)
from .trajdata import DatasetMeta, Trajectory, TrajectoryDataset

__all__ = [
    "BehaviorPolicy",
    "CorpusConfig",
    "RunModes",
    "assign_run_modes",
    "rollout",
    "generate_corpus",
    "parse_run_id",
    "noise_at",
    "rewards_from_states",
    "corpus_stats",
]

TRAIN_STEP_INTERVAL = 200

COORD_JOINT_MODES = (("A", "A"), ("A", "B"), ("B", "A"))


@dataclass
class BehaviorPolicy:
    """Noisy proportional controller steering one agent toward a fixed target."""

    target: np.ndarray
    noise_scale: float
    gain: float = 1.0
    rng_seed: int = 0

    def action(self, position: np.ndarray, rng: np.random.Generator, max_step: float) -> np.ndarray:
        eps = rng.normal(0.0, 1.0, size=2) * self.noise_scale
        raw = self.gain * (np.asarray(self.target) - np.asarray(position)) + eps
        return np.clip(raw, -max_step, max_step)


@dataclass(frozen=True)
class CorpusConfig:
    domain: str
    n_runs: int = 30
    trajectories_per_run: int = 40
    noise_start: float = 0.5
    noise_end: float = 0.0
    mode_assignment: str = "uniform-random"
    seed: int = 0
    episode_len: int = DEFAULT_EPISODE_LEN
    include_miscoordinated: bool = False

    def __post_init__(self):
        if self.domain not in ("hill", "coord"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.n_runs < 1 or self.trajectories_per_run < 1:
            raise ValueError("n_runs and trajectories_per_run must be >= 1")
        if not self.noise_start >= self.noise_end >= 0.0:
            raise ValueError("need noise_start >= noise_end >= 0")
        if self.mode_assignment not in ("uniform-random", "enumerated"):
            raise ValueError(f"unknown mode_assignment {self.mode_assignment!r}")


@dataclass(frozen=True)
class RunModes:
    """Per-run ground truth: one label and one target point per agent."""

    labels: tuple[str, ...]
    targets: np.ndarray  # (n_agents, 2)


def _default_env_config(domain: str):
    return HillWorldConfig() if domain == "hill" else CoordGameConfig()


def assign_run_modes(config: CorpusConfig, rng: np.random.Generator,
                     env_config=None) -> list[RunModes]:
    """Pick each run's per-agent targets: hill indices, or one rewarding joint mode."""
    env_config = env_config or _default_env_config(config.domain)
    if config.domain == "hill":
        centers = env_config.hill_centers()
        n_agents, n_hills = env_config.n_agents, env_config.n_hills
        if config.mode_assignment == "enumerated":
            combos = itertools.cycle(itertools.product(range(n_hills), repeat=n_agents))
            picks = [next(combos) for _ in range(config.n_runs)]
        else:
            picks = [tuple(rng.integers(0, n_hills, size=n_agents)) for _ in range(config.n_runs)]
        return [
            RunModes(labels=tuple(str(h) for h in pick), targets=centers[list(pick)])
            for pick in picks
        ]
    centers = {"A": np.asarray(env_config.center_a), "B": np.asarray(env_config.center_b)}
    modes = COORD_JOINT_MODES + ((("B", "B"),) if config.include_miscoordinated else ())
    if config.mode_assignment == "enumerated":
        cycle = itertools.cycle(modes)
        picks = [next(cycle) for _ in range(config.n_runs)]
    else:
        picks = [modes[rng.integers(0, len(modes))] for _ in range(config.n_runs)]
    return [
        RunModes(labels=pick, targets=np.stack([centers[m] for m in pick]))
        for pick in picks
    ]


def rewards_from_states(states: np.ndarray, env_config) -> np.ndarray:
    """Per-step rewards recomputed from the post-step positions states[1:]."""
    T = states.shape[0] - 1
    if isinstance(env_config, HillWorldConfig):
        out = np.empty((T, env_config.n_agents))
        for t in range(T):
            out[t] = hill_reward(states[t + 1].reshape(-1, 2), env_config)
        return out
    out = np.empty((T, 2))
    for t in range(T):
        p = states[t + 1].reshape(2, 2)
        out[t] = coord_reward(coord_region(p[0], env_config),
                              coord_region(p[1], env_config), env_config)
    return out


def rollout(policies: list[BehaviorPolicy], env_config, T: int,
            rng: np.random.Generator) -> Trajectory:
    """Roll one episode from the origin spawn; rewards evaluated at post-step positions."""
    n_agents = len(policies)
    targets = np.stack([np.asarray(p.target, dtype=np.float64) for p in policies])
    gains = np.array([p.gain for p in policies])
    scales = np.array([p.noise_scale for p in policies])

    positions = np.zeros((n_agents, 2))
    states = np.zeros((T + 1, 2 * n_agents))
    actions = np.zeros((T, n_agents, 2))
    for t in range(T):
        eps = rng.normal(0.0, 1.0, size=(n_agents, 2)) * scales[:, None]
        raw = gains[:, None] * (targets - positions) + eps
        actions[t] = np.clip(raw, -env_config.max_step, env_config.max_step)
        positions = env_step(positions, actions[t], env_config)
        states[t + 1] = positions.reshape(-1)
    rewards = rewards_from_states(states, env_config)
    return Trajectory(
        states=states,
        actions=[np.ascontiguousarray(actions[:, i, :]) for i in range(n_agents)],
        rewards=rewards,
    )


def noise_at(config: CorpusConfig, k: int) -> float:
    """Linear anneal: k=0 gives noise_start, k=last gives noise_end."""
    span = max(config.trajectories_per_run - 1, 1)
    frac = k / span
    return config.noise_start + (config.noise_end - config.noise_start) * frac


def generate_corpus(config: CorpusConfig, env_config=None,
                    runs: tuple[int, ...] | None = None) -> TrajectoryDataset:
    """Generate n_runs x trajectories_per_run labeled trajectories.

    RNG streams are derived per trajectory from (seed, run, index), so runs are
    independent and the corpus is reproducible regardless of generation order;
    runs selects a subset of run indices whose content matches the full corpus.
    """
    env_config = env_config or _default_env_config(config.domain)
    modes = assign_run_modes(config, np.random.default_rng([config.seed, 101]), env_config)
    n_agents = len(modes[0].labels)
    meta = DatasetMeta(
        n_agents=n_agents,
        state_dim=2 * n_agents,
        action_dims=(2,) * n_agents,
        episode_len=config.episode_len,
        has_rewards=True,
    )
    dataset = TrajectoryDataset(meta=meta)
    selected = range(len(modes)) if runs is None else runs
    for r in selected:
        if not 0 <= r < len(modes):
            raise ValueError(f"run index {r} out of range")
        mode = modes[r]
        run_id = f"run{r}:modes={{{','.join(mode.labels)}}}"
        for k in range(config.trajectories_per_run):
            sigma = noise_at(config, k)
            policies = [
                BehaviorPolicy(target=mode.targets[i], noise_scale=sigma,
                               gain=1.0, rng_seed=config.seed)
                for i in range(n_agents)
            ]
            traj = rollout(policies, env_config, config.episode_len,
                           np.random.default_rng([config.seed, r, k]))
            traj.run_id = run_id
            traj.train_step = k * TRAIN_STEP_INTERVAL
            traj.seed = config.seed
            dataset.append(traj)
    return dataset


_RUN_ID_RE = re.compile(r"^run(\d+):modes=\{(.*)\}$")


def parse_run_id(run_id: str) -> tuple[int, tuple[str, ...]]:
    """Invert the corpus run_id format back to (run index, per-agent mode labels)."""
    m = _RUN_ID_RE.match(run_id)
    if m is None:
        raise ValueError(f"run_id {run_id!r} does not match 'run{{r}}:modes={{...}}'")
    return int(m.group(1)), tuple(m.group(2).split(","))


def corpus_stats(dataset: TrajectoryDataset) -> dict:
    """Return-distribution summary, including the share of trajectories under half the max."""
    totals = np.array([traj.rewards.sum() for traj in dataset])
    max_total = float(totals.max())
    below = float((totals < 0.5 * max_total).mean()) if max_total > 0 else 0.0
    return {
        "n_trajectories": len(dataset),
        "max_total_return": max_total,
        "mean_total_return": float(totals.mean()),
        "frac_below_half_max": below,
    }
