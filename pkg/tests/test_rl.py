from dataclasses import replace

import numpy as np
import pytest

from conftest import make_instance

from app.config import GenerationSettings
from app.dpp import generate_instance
from app.errors import InvalidInputError
from app.pdn import FrequencyBand
from app.rl import (
    LogPoint,
    PolicyParams,
    ReinforceConfig,
    RunningBaseline,
    Shaping,
    TrainingLog,
    area_under_curve,
    batch_returns,
    evaluate,
    policy_gradient,
    reinforce_update,
    sample_trajectory,
    shaping_experiment,
    surrogate_objective,
    train,
)
from app.shaping import BetaSchedule, PotentialSpec


def test_probabilities_renormalize_over_legal():
    policy = PolicyParams(np.array([0.0, 1.0, 2.0, 3.0]))
    probs = policy.probabilities([0, 2])
    assert probs.sum() == pytest.approx(1.0)
    assert probs[1] / probs[0] == pytest.approx(np.exp(2.0))


def test_trajectory_shape(small_instance, rng):
    traj = sample_trajectory(PolicyParams.uniform(9), small_instance, rng)
    assert traj.length == 2
    assert len(traj.states) == 3
    assert traj.rewards[0] == 0.0
    assert traj.terminal_reward == traj.rewards[-1]
    assert traj.shaped_rewards is None


def test_shaped_trajectory_carries_both_rewards(small_instance, rng):
    shaping = Shaping(PotentialSpec(), BetaSchedule.constant(1.0))
    traj = sample_trajectory(PolicyParams.uniform(9), small_instance, rng, shaping)
    assert len(traj.shaped_rewards) == traj.length
    assert traj.shaped_rewards != traj.rewards


def test_returns_to_go(small_instance, rng):
    batch = [sample_trajectory(PolicyParams.uniform(9), small_instance, rng) for _ in range(3)]
    returns = batch_returns(batch, gamma=0.5)
    for row, traj in zip(returns, batch):
        np.testing.assert_allclose(row, [0.5 * traj.rewards[1], traj.rewards[1]])


def test_policy_gradient_matches_surrogate_difference(small_instance, rng):
    policy = PolicyParams(rng.normal(size=9))
    batch = [sample_trajectory(policy, small_instance, rng) for _ in range(4)]
    advantages = rng.normal(size=(4, 2))
    grad = policy_gradient(policy, batch, advantages)
    h = 1e-6
    for i in range(9):
        up, down = policy.logits.copy(), policy.logits.copy()
        up[i] += h
        down[i] -= h
        numeric = (surrogate_objective(up, batch, advantages) - surrogate_objective(down, batch, advantages)) / (2 * h)
        assert grad[i] == pytest.approx(numeric, abs=1e-7)


def test_probe_logit_never_moves(small_instance, rng):
    policy = PolicyParams.uniform(9)
    batch = [sample_trajectory(policy, small_instance, rng) for _ in range(8)]
    updated = reinforce_update(policy, batch, ReinforceConfig(baseline="none"))
    assert updated.logits[small_instance.probe] == 0.0


def test_baseline_seeded_by_first_batch():
    baseline = RunningBaseline(decay=0.9)
    first = np.array([1.0, 2.0])
    np.testing.assert_array_equal(baseline.current(first), first)
    baseline.update(np.array([3.0, 2.0]))
    np.testing.assert_allclose(baseline.current(np.zeros(2)), [1.2, 2.0])


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ReinforceConfig(gamma=0.0)
    with pytest.raises(InvalidInputError):
        ReinforceConfig(baseline="median")


def test_training_is_deterministic(small_instance):
    cfg = ReinforceConfig(episodes=6, batch_size=4, eval_interval=3, eval_rollouts=8, seed=5)
    a = train(small_instance, cfg)
    b = train(small_instance, cfg)
    assert a.comparable() == b.comparable()
    assert [p.episode for p in a.points] == [0, 3, 6]


def test_shaped_log_reports_original_return(small_instance):
    shaping = Shaping(PotentialSpec(), BetaSchedule(1.0, 0.0, t_anneal=4))
    cfg = ReinforceConfig(episodes=4, batch_size=4, eval_interval=2, eval_rollouts=8, shaping=shaping)
    log = train(small_instance, cfg)
    assert [p.beta for p in log.points] == [1.0, pytest.approx(0.5), 0.0]
    assert all(p.mean_return > 0 for p in log.points)


def test_unshaped_log_has_zero_beta(small_instance):
    log = train(small_instance, ReinforceConfig(episodes=2, batch_size=2, eval_interval=1, eval_rollouts=4))
    assert all(p.beta == 0.0 and p.mean_shaped_return == p.mean_return for p in log.points)


@pytest.mark.parametrize("gamma", [0.9, 1.0])
def test_zero_beta_shaping_matches_unshaped_log(small_instance, gamma):
    cfg = ReinforceConfig(episodes=4, batch_size=2, eval_interval=2, eval_rollouts=4, gamma=gamma, seed=1)
    shaping = Shaping(PotentialSpec(alpha=1.5, lam=0.5), BetaSchedule(0.0, 0.0, t_anneal=4))
    plain = train(small_instance, cfg)
    shaped = train(small_instance, replace(cfg, shaping=shaping))
    assert shaped.comparable() == plain.comparable()


def test_evaluate_is_mean_terminal_reward(small_instance, rng):
    value = evaluate(PolicyParams.uniform(9), small_instance, 16, rng)
    assert value > 0.0
    with pytest.raises(InvalidInputError):
        evaluate(PolicyParams.uniform(9), small_instance, 0, rng)


def test_area_under_curve():
    log = TrainingLog([LogPoint(0, 1.0, 1.0, 0.0, 0.0), LogPoint(10, 3.0, 3.0, 0.0, 0.0)])
    assert area_under_curve(log) == pytest.approx(20.0)
    assert area_under_curve(TrainingLog(log.points[:1])) == 0.0


def test_training_improves_over_uniform():
    inst = make_instance(4, 4, k=2, probe=5)
    cfg = ReinforceConfig(episodes=40, batch_size=16, eval_interval=40, eval_rollouts=64, seed=3)
    log = train(inst, cfg)
    assert log.points[-1].mean_return > log.points[0].mean_return


@pytest.mark.slow
def test_shaping_helps_on_small_instance():
    cfg_gen = GenerationSettings(width=6, height=6, k_caps=4)
    inst = generate_instance(cfg_gen, seed=11, band=FrequencyBand(n_points=8))
    cfg = ReinforceConfig(episodes=100, batch_size=16, eval_interval=10, eval_rollouts=32)
    shaping = Shaping(PotentialSpec(), BetaSchedule(1.0, 0.0, t_anneal=100))
    summary = shaping_experiment(inst, cfg, shaping, seeds=range(5))
    assert summary.shaped_final_median >= summary.unshaped_final_median
    assert summary.shaped_auc_median >= summary.unshaped_auc_median
