"""Group-relative advantages from binary verifier rewards."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RewardedGroup:
    rewards: np.ndarray

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim != 1 or self.rewards.size < 2:
            raise ValueError(f"a reward group needs G >= 2 entries, got {self.rewards.size}")

    @property
    def group_size(self) -> int:
        return self.rewards.size

    @property
    def mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def std(self) -> float:
        # population std (no Bessel correction)
        return float(self.rewards.std())


@dataclass
class AdvantageSet:
    per_trajectory: np.ndarray
    degenerate: bool


def group_advantages(rewards) -> AdvantageSet:
    group = RewardedGroup(rewards)
    r = group.rewards
    centred = r - r.mean()
    std = np.sqrt(np.mean(centred * centred))
    # equality test first: a constant group may still leave rounding residue in `centred`
    if np.all(r == r[0]) or std == 0.0:
        return AdvantageSet(np.zeros_like(r), True)
    return AdvantageSet(centred / std, False)


def broadcast_advantage(adv: AdvantageSet, trajectories) -> list[np.ndarray]:
    if len(trajectories) != adv.per_trajectory.size:
        raise ValueError(f"{adv.per_trajectory.size} advantages for {len(trajectories)} trajectories")
    return [np.full(len(tr.output), a) for a, tr in zip(adv.per_trajectory, trajectories)]
