"""Two toy multiagent domains as pure functions: hill climbing and a coordination game.

Both live in a square arena with per-axis position clamping and per-axis action
clamping. Rewards depend on positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "HillWorldConfig",
    "CoordGameConfig",
    "DEFAULT_EPISODE_LEN",
    "REGIONS",
    "hill_reward",
    "coord_region",
    "coord_reward",
    "env_step",
    "agent_dispersion",
    "trajectory_return",
]

DEFAULT_EPISODE_LEN = 50

REGIONS = ("A", "B", "C")

# payoff[i][j] is the (agent 0, agent 1) reward pair for region pair (REGIONS[i], REGIONS[j])
DEFAULT_PAYOFF = (
    ((1.0, 1.0), (1.0, 1.0), (0.0, 0.0)),
    ((1.0, 1.0), (0.0, 0.0), (0.0, 0.0)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
)


@dataclass(frozen=True)
class HillWorldConfig:
    """Arena with n_hills Gaussian reward bumps equally spaced on a circle."""

    n_agents: int = 3
    n_hills: int = 3
    hill_radius: float = 1.0
    hill_width: float = 0.3
    reward_scale: float = 1.0
    arena_halfwidth: float = 1.5
    max_step: float = 0.1

    def __post_init__(self):
        if self.n_agents < 1 or self.n_hills < 1:
            raise ValueError("n_agents and n_hills must be >= 1")
        if min(self.hill_width, self.arena_halfwidth, self.max_step) <= 0:
            raise ValueError("hill_width, arena_halfwidth, max_step must be positive")

    def hill_centers(self) -> np.ndarray:
        """Centers at hill_radius from the origin, equally spaced starting at 90 degrees."""
        angles = 0.5 * math.pi + 2.0 * math.pi * np.arange(self.n_hills) / self.n_hills
        return self.hill_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass(frozen=True)
class CoordGameConfig:
    """Two-agent game with reward circles A and B and an exterior region C."""

    center_a: tuple[float, float] = (-0.6, 0.0)
    center_b: tuple[float, float] = (0.6, 0.0)
    radius_a: float = 0.3
    radius_b: float = 0.3
    payoff: tuple = DEFAULT_PAYOFF
    arena_halfwidth: float = 1.5
    max_step: float = 0.1
    n_agents: int = 2

    def __post_init__(self):
        object.__setattr__(self, "center_a", tuple(float(v) for v in self.center_a))
        object.__setattr__(self, "center_b", tuple(float(v) for v in self.center_b))
        if self.radius_a <= 0 or self.radius_b <= 0:
            raise ValueError("circle radii must be positive")
        gap = math.dist(self.center_a, self.center_b)
        if gap <= self.radius_a + self.radius_b:
            raise ValueError("circles A and B must be disjoint")
        for c, r in ((self.center_a, self.radius_a), (self.center_b, self.radius_b)):
            if max(abs(c[0]), abs(c[1])) + r > self.arena_halfwidth:
                raise ValueError("reward circles must lie inside the arena")


def hill_reward(positions: np.ndarray, config: HillWorldConfig) -> np.ndarray:
    """Per-agent reward: scale times the nearest-hill Gaussian bump value."""
    positions = np.asarray(positions, dtype=np.float64)
    centers = config.hill_centers()  # (H, 2)
    d2 = ((positions[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)  # (N, H)
    return config.reward_scale * np.exp(-d2 / (2.0 * config.hill_width**2)).max(axis=1)


def coord_region(position: np.ndarray, config: CoordGameConfig) -> str:
    """Region label for one position: closed disc A, then closed disc B, else C."""
    position = np.asarray(position, dtype=np.float64)
    if np.hypot(*(position - config.center_a)) <= config.radius_a:
        return "A"
    if np.hypot(*(position - config.center_b)) <= config.radius_b:
        return "B"
    return "C"


def coord_reward(region_0: str, region_1: str, config: CoordGameConfig) -> tuple[float, float]:
    """Reward pair for one timestep, read from the payoff table."""
    i, j = REGIONS.index(region_0), REGIONS.index(region_1)
    r0, r1 = config.payoff[i][j]
    return float(r0), float(r1)


def env_step(positions: np.ndarray, joint_action: np.ndarray, config) -> np.ndarray:
    """Clamp actions to +-max_step per axis, apply, clamp positions to the arena box."""
    positions = np.asarray(positions, dtype=np.float64)
    joint_action = np.asarray(joint_action, dtype=np.float64)
    if positions.shape != joint_action.shape or positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError(
            f"positions {positions.shape} and joint_action {joint_action.shape} "
            "must both be (n_agents, 2)"
        )
    step = np.clip(joint_action, -config.max_step, config.max_step)
    return np.clip(positions + step, -config.arena_halfwidth, config.arena_halfwidth)


def agent_dispersion(final_positions: np.ndarray) -> float:
    """Sum of agents' L2 distances from their centroid."""
    p = np.asarray(final_positions, dtype=np.float64)
    return float(np.linalg.norm(p - p.mean(axis=0), axis=1).sum())


def trajectory_return(traj) -> tuple[np.ndarray, float]:
    """Per-agent reward sums and their total for one trajectory."""
    if traj.rewards is None:
        raise ValueError("trajectory has no rewards")
    per_agent = traj.rewards.sum(axis=0)
    return per_agent, float(per_agent.sum())
