"""Per-voxel refinement MDP: states, actions, rewards, advantages.

Every voxel acts as an agent adjusting its own foreground probability by
one of six signed increments. Rewards are cross-entropy gains weighted by
action confidence; advantages are finite-horizon discounted returns minus
the value head's estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import elementwise_clip

#: The discrete action set, ascending. Zero is deliberately excluded.
ACTION_VALUES = np.array([-0.4, -0.2, -0.1, 0.1, 0.2, 0.4], dtype=np.float32)

N_ACTIONS = len(ACTION_VALUES)

_LOG_EPS = 1e-7


@dataclass(frozen=True)
class EpisodeConfig:
    """Horizon and reward constants."""

    T: int = 5
    gamma: float = 0.95
    alpha: float = 0.8
    beta: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")


@dataclass
class EpisodeState:
    """MDP state: aligned image, probability map and hint map plus the step index."""

    image: np.ndarray
    prob: np.ndarray
    hint: np.ndarray
    step: int = 0

    def __post_init__(self):
        if not (self.image.shape == self.prob.shape == self.hint.shape):
            raise ValueError("state volumes must share one shape")

    def channels(self) -> np.ndarray:
        """Stack (image, prob, hint) as the (3, D, H, W) network input."""
        return np.stack([self.image, self.prob, self.hint]).astype(np.float32, copy=False)

    @classmethod
    def initial(cls, image: np.ndarray, hint: np.ndarray | None = None) -> "EpisodeState":
        prob = np.full_like(image, 0.5, dtype=np.float32)
        if hint is None:
            hint = np.zeros_like(image, dtype=np.float32)
        return cls(image=image.astype(np.float32, copy=False), prob=prob, hint=hint, step=0)


@dataclass
class ActionMap:
    """Per-voxel action indices into ACTION_VALUES plus the resolved values."""

    indices: np.ndarray
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = ACTION_VALUES[self.indices]


@dataclass
class RewardMap:
    """Per-voxel rewards plus the scalar episode-log total."""

    per_voxel: np.ndarray
    total: float


def sample_actions(policy: np.ndarray, rng: np.random.Generator | None = None,
                   mode: str = "sample") -> ActionMap:
    """Draw one action per voxel from the policy distribution.

    ``policy`` has shape (|A|, D, H, W) with rows summing to 1. In argmax
    mode ties break toward the lowest action index.
    """
    sums = policy.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("policy rows are not normalized")
    if mode == "argmax":
        idx = policy.argmax(axis=0)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        cdf = np.cumsum(policy, axis=0)
        u = rng.random(policy.shape[1:], dtype=np.float64)
        idx = (u[None] > cdf).sum(axis=0)
        np.clip(idx, 0, policy.shape[0] - 1, out=idx)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ActionMap(indices=idx.astype(np.int8))


def apply_actions(state: EpisodeState, actions: ActionMap) -> EpisodeState:
    """Advance the state: p' = clip(p + a, 0, 1); image and hint carry over."""
    if actions.values.shape != state.prob.shape:
        raise ValueError("action map shape mismatch")
    new_prob = elementwise_clip(state.prob + actions.values, 0.0, 1.0)
    return EpisodeState(image=state.image, prob=new_prob, hint=state.hint, step=state.step + 1)


def cross_entropy_map(prob: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-voxel cross-entropy against a {0,1} label, epsilon-clamped."""
    p = np.clip(prob.astype(np.float64), _LOG_EPS, 1.0 - _LOG_EPS)
    y = label.astype(np.float64)
    x = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return x.astype(np.float32)


def gain_map(prob_prev: np.ndarray, prob_next: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Cross-entropy decrease; positive where the update moved toward the label."""
    return cross_entropy_map(prob_prev, label) - cross_entropy_map(prob_next, label)


def self_adaptive_reward(gain: np.ndarray, conf: np.ndarray, cfg: EpisodeConfig) -> RewardMap:
    """Weight gains by alpha*(2-c)^beta so low-confidence actions feed back harder."""
    weight = cfg.alpha * np.power(2.0 - conf.astype(np.float64), cfg.beta)
    per_voxel = (weight * gain.astype(np.float64)).astype(np.float32)
    return RewardMap(per_voxel=per_voxel, total=float(per_voxel.sum(dtype=np.float64)))


def returns_and_advantages(
    rewards: list[np.ndarray],
    values: list[np.ndarray],
    cfg: EpisodeConfig,
    mode: str = "per_voxel",
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Finite-horizon discounted returns and advantages per step.

    ``per_voxel`` discounts each voxel's own reward stream; ``mean_reward``
    replaces the stream with its spatial mean at every step. No bootstrap
    beyond the terminal step. Returns float32 (returns, advantages) lists.
    """
    if len(rewards) != len(values):
        raise ValueError("rewards and values length mismatch")
    if mode not in ("per_voxel", "mean_reward"):
        raise ValueError(f"unknown advantage mode {mode!r}")
    returns: list[np.ndarray] = []
    acc = np.zeros_like(rewards[-1], dtype=np.float64)
    for r in reversed(rewards):
        r64 = r.astype(np.float64)
        if mode == "mean_reward":
            r64 = np.full_like(acc, r64.mean())
        acc = r64 + cfg.gamma * acc
        returns.append(acc.astype(np.float32))
    returns.reverse()
    advantages = [
        (ret.astype(np.float64) - val.astype(np.float64)).astype(np.float32)
        for ret, val in zip(returns, values)
    ]
    return returns, advantages


def misunderstanding_rate(prob_prev: np.ndarray, prob_next: np.ndarray,
                          label: np.ndarray) -> float:
    """Fraction of changed voxels whose direction contradicts the label.

    Foreground voxels must move up, background voxels down. Voxels whose
    probability did not change are excluded; returns 0.0 if nothing changed.
    """
    delta = prob_next.astype(np.float64) - prob_prev.astype(np.float64)
    changed = delta != 0.0
    n = int(changed.sum())
    if n == 0:
        return 0.0
    fg = label.astype(bool)
    wrong = (changed & fg & (delta < 0)) | (changed & ~fg & (delta > 0))
    return float(wrong.sum()) / n


def export_trace_jsonl(path, reports) -> None:
    """Write per-step episode reports as JSON Lines for external plotting."""
    import json

    with open(path, "w") as f:
        for rep in reports:
            f.write(json.dumps(rep.to_dict() if hasattr(rep, "to_dict") else rep))
            f.write("\n")
