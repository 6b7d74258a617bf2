"""
REINFORCE on the Placement MDP
==============================
Tabular softmax policy over grid cells, masked to the legal actions of each
state, trained with the likelihood-ratio gradient and an optional
per-timestep running-mean baseline. Shaping, when enabled, replaces the
per-step rewards with r + beta(episode) * (gamma Phi(s') - Phi(s)) for the
gradient only: every evaluation reports the unshaped terminal reward.

Randomness: one master seed, split into independent training and
evaluation streams.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from statistics import median
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import softmax

from app.dpp import DppInstance, PlacementState, Trajectory, legal_actions, step
from app.errors import InvalidInputError
from app.shaping import BetaSchedule, PotentialSpec, beta_at, shape_reward, state_potential

logger = logging.getLogger(__name__)

# =============================================================================
# Data Models
# =============================================================================


@dataclass(frozen=True, eq=False)
class PolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 1 or not np.all(np.isfinite(logits)):
            raise InvalidInputError("policy logits must be a finite vector")
        object.__setattr__(self, "logits", logits)

    @classmethod
    def uniform(cls, n_cells: int) -> "PolicyParams":
        return cls(np.zeros(n_cells))

    def probabilities(self, legal: Sequence[int]) -> np.ndarray:
        """Action distribution renormalized over `legal`."""
        return softmax(self.logits[list(legal)])


@dataclass(frozen=True)
class Shaping:
    potential: PotentialSpec
    schedule: BetaSchedule


@dataclass(frozen=True)
class ReinforceConfig:
    episodes: int = 200
    batch_size: int = 16
    learning_rate: float = 1.0
    gamma: float = 1.0
    baseline: str = "running_mean"
    baseline_decay: float = 0.99
    shaping: Optional[Shaping] = None
    seed: int = 0
    eval_interval: int = 10
    eval_rollouts: int = 64

    def __post_init__(self):
        if self.episodes < 0 or self.batch_size < 1:
            raise InvalidInputError("episodes must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0.0:
            raise InvalidInputError(f"learning_rate={self.learning_rate} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidInputError(f"gamma={self.gamma} must lie in (0, 1]")
        if self.baseline not in ("none", "running_mean"):
            raise InvalidInputError(f"unknown baseline {self.baseline!r}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise InvalidInputError(f"baseline_decay={self.baseline_decay} must lie in [0, 1)")
        if self.eval_interval < 1 or self.eval_rollouts < 1:
            raise InvalidInputError("eval_interval and eval_rollouts must be >= 1")


@dataclass
class LogPoint:
    episode: int
    mean_return: float
    mean_shaped_return: float
    beta: float
    seconds: float

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "mean_return": self.mean_return,
            "mean_shaped_return": self.mean_shaped_return,
            "beta": self.beta,
            "seconds": self.seconds,
        }


@dataclass
class TrainingLog:
    points: List[LogPoint] = field(default_factory=list)

    def returns(self) -> np.ndarray:
        return np.array([p.mean_return for p in self.points])

    def episodes(self) -> np.ndarray:
        return np.array([p.episode for p in self.points], dtype=np.float64)

    def final_return(self) -> float:
        return self.points[-1].mean_return

    def comparable(self) -> List[Tuple[int, float, float, float]]:
        """Log content without wall-clock, for determinism comparisons."""
        return [(p.episode, p.mean_return, p.mean_shaped_return, p.beta) for p in self.points]


class RunningBaseline:
    """Exponential average of the return at each timestep, seeded by the first batch."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.values: Optional[np.ndarray] = None

    def current(self, batch_means: np.ndarray) -> np.ndarray:
        if self.values is None:
            self.values = batch_means.copy()
        return self.values

    def update(self, batch_means: np.ndarray):
        self.values = self.decay * self.values + (1.0 - self.decay) * batch_means


@dataclass
class ExperimentSummary:
    seeds: List[int]
    shaped_final: List[float]
    unshaped_final: List[float]
    shaped_auc: List[float]
    unshaped_auc: List[float]

    @property
    def shaped_final_median(self) -> float:
        return median(self.shaped_final)

    @property
    def unshaped_final_median(self) -> float:
        return median(self.unshaped_final)

    @property
    def shaped_auc_median(self) -> float:
        return median(self.shaped_auc)

    @property
    def unshaped_auc_median(self) -> float:
        return median(self.unshaped_auc)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "shaped_final_median": self.shaped_final_median,
            "unshaped_final_median": self.unshaped_final_median,
            "shaped_auc_median": self.shaped_auc_median,
            "unshaped_auc_median": self.unshaped_auc_median,
        }


# =============================================================================
# Rollouts
# =============================================================================

def sample_trajectory(
    policy: PolicyParams,
    instance: DppInstance,
    rng: np.random.Generator,
    shaping: Optional[Shaping] = None,
    episode: int = 0,
    gamma: float = 1.0,
) -> Trajectory:
    state = PlacementState.initial(instance)
    states = [state]
    actions: List[int] = []
    rewards: List[float] = []
    done = False
    while not done:
        legal = legal_actions(state)
        action = legal[int(rng.choice(len(legal), p=policy.probabilities(legal)))]
        state, reward, done = step(state, action)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
    shaped = None
    if shaping is not None:
        beta = beta_at(shaping.schedule, episode)
        phis = [state_potential(s, shaping.potential) for s in states]
        shaped = [shape_reward(r, phis[t], phis[t + 1], gamma, beta) for t, r in enumerate(rewards)]
    return Trajectory(states, actions, rewards, shaped, terminal_reward=rewards[-1])


def _returns_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def batch_returns(batch: Sequence[Trajectory], gamma: float) -> np.ndarray:
    """(B, T) returns-to-go, using shaped rewards where present."""
    rows = []
    for traj in batch:
        rewards = traj.shaped_rewards if traj.shaped_rewards is not None else traj.rewards
        rows.append(_returns_to_go(rewards, gamma))
    return np.vstack(rows)


# =============================================================================
# Policy Gradient
# =============================================================================

def surrogate_objective(logits: np.ndarray, batch: Sequence[Trajectory], advantages: np.ndarray) -> float:
    """(1/B) sum_b sum_t A[b, t] log pi(a_t | s_t); its gradient is the REINFORCE step."""
    policy = PolicyParams(logits)
    total = 0.0
    for b, traj in enumerate(batch):
        for t, action in enumerate(traj.actions):
            legal = legal_actions(traj.states[t])
            probs = policy.probabilities(legal)
            total += advantages[b, t] * np.log(probs[legal.index(action)])
    return total / len(batch)


def policy_gradient(policy: PolicyParams, batch: Sequence[Trajectory], advantages: np.ndarray) -> np.ndarray:
    """Analytic gradient of surrogate_objective: A * (onehot(a) - pi) over legal cells."""
    grad = np.zeros_like(policy.logits)
    for b, traj in enumerate(batch):
        for t, action in enumerate(traj.actions):
            advantage = advantages[b, t]
            if advantage == 0.0:
                continue
            legal = list(legal_actions(traj.states[t]))
            probs = policy.probabilities(legal)
            grad[legal] -= advantage * probs
            grad[action] += advantage
    return grad / len(batch)


def reinforce_update(
    policy: PolicyParams,
    batch: Sequence[Trajectory],
    cfg: ReinforceConfig,
    baseline: Optional[RunningBaseline] = None,
) -> PolicyParams:
    """One gradient-ascent step on the batch; the baseline is read then advanced."""
    if not batch:
        raise InvalidInputError("reinforce_update needs a nonempty batch")
    returns = batch_returns(batch, cfg.gamma)
    if cfg.baseline == "running_mean":
        baseline = baseline if baseline is not None else RunningBaseline(cfg.baseline_decay)
        batch_means = returns.mean(axis=0)
        advantages = returns - baseline.current(batch_means)[None, :]
        baseline.update(batch_means)
    else:
        advantages = returns
    grad = policy_gradient(policy, batch, advantages)
    return PolicyParams(policy.logits + cfg.learning_rate * grad)


# =============================================================================
# Evaluation and Training
# =============================================================================

def evaluate(policy: PolicyParams, instance: DppInstance, n_rollouts: int,
             rng: np.random.Generator) -> float:
    """Mean unshaped terminal reward over stochastic rollouts."""
    if n_rollouts < 1:
        raise InvalidInputError(f"n_rollouts={n_rollouts} must be >= 1")
    rewards = [sample_trajectory(policy, instance, rng).terminal_reward for _ in range(n_rollouts)]
    return float(np.mean(rewards))


def _evaluate_point(policy: PolicyParams, instance: DppInstance, cfg: ReinforceConfig,
                    rng: np.random.Generator, episode: int, started: float) -> LogPoint:
    originals = []
    shaped = []
    for _ in range(cfg.eval_rollouts):
        traj = sample_trajectory(policy, instance, rng, cfg.shaping, episode, cfg.gamma)
        originals.append(traj.terminal_reward)
        # unshaped trajectories fall back to their plain rewards, same discounting
        shaped.append(traj.shaped_return(cfg.gamma))
    beta = beta_at(cfg.shaping.schedule, episode) if cfg.shaping else 0.0
    return LogPoint(episode, float(np.mean(originals)), float(np.mean(shaped)), beta,
                    time.perf_counter() - started)


def train(instance: DppInstance, cfg: ReinforceConfig) -> TrainingLog:
    train_seq, eval_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    train_rng = np.random.default_rng(train_seq)
    eval_rng = np.random.default_rng(eval_seq)
    policy = PolicyParams.uniform(instance.n_cells)
    baseline = RunningBaseline(cfg.baseline_decay)
    started = time.perf_counter()
    log = TrainingLog([_evaluate_point(policy, instance, cfg, eval_rng, 0, started)])
    for episode in range(cfg.episodes):
        batch = [sample_trajectory(policy, instance, train_rng, cfg.shaping, episode, cfg.gamma)
                 for _ in range(cfg.batch_size)]
        policy = reinforce_update(policy, batch, cfg, baseline)
        if (episode + 1) % cfg.eval_interval == 0:
            point = _evaluate_point(policy, instance, cfg, eval_rng, episode + 1, started)
            log.points.append(point)
            logger.info("[Reinforce] episode %d return %.6g shaped %.6g beta %.3f",
                        point.episode, point.mean_return, point.mean_shaped_return, point.beta)
    return log


def area_under_curve(log: TrainingLog) -> float:
    if len(log.points) < 2:
        return 0.0
    return float(trapezoid(log.returns(), log.episodes()))


def shaping_experiment(instance: DppInstance, cfg: ReinforceConfig, shaping: Shaping,
                       seeds: Sequence[int]) -> ExperimentSummary:
    """Shaped vs unshaped training with identical budgets, one run of each per seed."""
    summary = ExperimentSummary(list(seeds), [], [], [], [])
    for seed in seeds:
        for shaped in (True, False):
            run_cfg = replace(cfg, shaping=shaping if shaped else None, seed=seed)
            log = train(instance, run_cfg)
            if shaped:
                summary.shaped_final.append(log.final_return())
                summary.shaped_auc.append(area_under_curve(log))
            else:
                summary.unshaped_final.append(log.final_return())
                summary.unshaped_auc.append(area_under_curve(log))
    logger.info("[Experiment] %s", summary.to_dict())
    return summary
