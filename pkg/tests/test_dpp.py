import numpy as np
import pytest

from conftest import make_instance

from app.config import GenerationSettings
from app.dpp import (
    PlacementState,
    exhaustive_optimum,
    generate_instance,
    legal_actions,
    placement_reward,
    random_placement,
    step,
)
from app.errors import (
    GuardExceededError,
    IllegalActionError,
    InfeasibleConfigError,
    InvalidInputError,
    TerminalStateError,
)


def test_instance_validation():
    with pytest.raises(InvalidInputError):
        make_instance(keep_out=(4,))
    with pytest.raises(InvalidInputError):
        make_instance(k=9)
    with pytest.raises(InvalidInputError):
        make_instance(probe=9)


def test_free_cells_exclude_probe_and_keep_out():
    inst = make_instance(keep_out=(0, 8))
    assert inst.free_cells() == (1, 2, 3, 5, 6, 7)


def test_legal_actions_and_step(small_instance):
    state = PlacementState.initial(small_instance)
    assert legal_actions(state) == (0, 1, 2, 3, 5, 6, 7, 8)
    state, reward, done = step(state, 1)
    assert (reward, done) == (0.0, False)
    assert 1 not in legal_actions(state)
    state, reward, done = step(state, 7)
    assert done
    assert reward == placement_reward(small_instance, (7, 1))
    with pytest.raises(TerminalStateError):
        legal_actions(state)


def test_illegal_actions(small_instance):
    state = PlacementState.initial(small_instance)
    with pytest.raises(IllegalActionError):
        step(state, 4)
    state, _, _ = step(state, 0)
    with pytest.raises(IllegalActionError):
        step(state, 0)


def test_step_does_not_mutate(small_instance):
    state = PlacementState.initial(small_instance)
    step(state, 3)
    assert state.placed == ()


def test_reward_is_order_independent(small_instance):
    assert placement_reward(small_instance, (8, 0)) == placement_reward(small_instance, (0, 8))


def test_generation_is_deterministic():
    cfg = GenerationSettings(width=6, height=6, k_caps=4)
    a = generate_instance(cfg, seed=7)
    b = generate_instance(cfg, seed=7)
    assert a == b
    assert a.probe not in a.keep_out
    assert len(a.keep_out) == round(0.1 * 36)
    assert generate_instance(cfg, seed=8) != a


def test_generation_rejects_infeasible():
    with pytest.raises(InfeasibleConfigError):
        generate_instance(GenerationSettings(width=2, height=2, k_caps=4, keep_out_fraction=0.0), seed=0)


def test_random_placement_is_legal(small_instance, rng):
    cells = random_placement(small_instance, rng)
    PlacementState(small_instance, cells)
    assert len(set(cells)) == 2


def test_exhaustive_optimum_beats_every_subset(small_instance):
    best, reward = exhaustive_optimum(small_instance)
    free = small_instance.free_cells()
    for i, a in enumerate(free):
        for b in free[i + 1:]:
            assert placement_reward(small_instance, (a, b)) <= reward
    assert reward == placement_reward(small_instance, best)


def test_exhaustive_optimum_independent_of_order(small_instance):
    order = list(reversed(small_instance.free_cells()))
    assert exhaustive_optimum(small_instance, cell_order=order) == exhaustive_optimum(small_instance)


def test_exhaustive_optimum_guard(small_instance):
    with pytest.raises(GuardExceededError):
        exhaustive_optimum(small_instance, max_subsets=10)


def test_symmetric_instance_prefers_cells_next_to_probe(small_instance):
    best, _ = exhaustive_optimum(small_instance)
    positions = small_instance.positions()
    distance = np.abs(positions - positions[4]).sum(axis=1)
    assert all(distance[c] == pytest.approx(1.0 / 3.0) for c in best)
