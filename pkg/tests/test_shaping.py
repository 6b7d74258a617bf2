import math

import numpy as np
import pytest

from conftest import make_instance

from app.dpp import PlacementState, Trajectory, step
from app.errors import IllegalActionError, InvalidInputError
from app.kernel import Coord2D, grid_centers
from app.rl import PolicyParams, sample_trajectory
from app.shaping import (
    BetaSchedule,
    Net,
    PotentialKind,
    PotentialSpec,
    beta_at,
    conn_hpwl_gap,
    delta_phi,
    dpp_potential_value,
    gamma_one_collapse_gap,
    hpwl,
    phi_connectivity,
    phi_dpp,
    phi_hpwl,
    shape_reward,
    shaped_q_check,
    shaped_rewards,
    state_potential,
    telescoping_residual,
)


def test_empty_placement_has_zero_potential(small_instance):
    assert phi_dpp(PlacementState.initial(small_instance), PotentialSpec()) == 0.0


def test_colocated_capacitor_and_probe():
    value = dpp_potential_value([Coord2D(0.5, 0.5)], Coord2D(0.5, 0.5), alpha=1.5, lam=0.5)
    assert value == 1.0


def test_potential_formula(small_instance):
    state = PlacementState(small_instance, (0, 1))
    third = 1.0 / 3.0
    expected = math.exp(-1.5 * 2 * third) + math.exp(-1.5 * third) - 0.5 * math.exp(-1.5 * third)
    assert phi_dpp(state, PotentialSpec()) == pytest.approx(expected, rel=1e-14)


def test_delta_phi_matches_difference(small_instance):
    spec = PotentialSpec(alpha=1.2, lam=0.7)
    state = PlacementState(small_instance, (2,))
    for action in (0, 3, 8):
        nxt = PlacementState(small_instance, (2, action))
        assert delta_phi(state, action, spec) == pytest.approx(
            phi_dpp(nxt, spec) - phi_dpp(state, spec), abs=1e-14)


def test_delta_phi_rejects_illegal(small_instance):
    with pytest.raises(IllegalActionError):
        delta_phi(PlacementState(small_instance, (2,)), 2, PotentialSpec())


def test_terminal_zeroing(small_instance):
    terminal = PlacementState(small_instance, (1, 3))
    assert state_potential(terminal, PotentialSpec(terminal_zeroed=True)) == 0.0
    assert state_potential(terminal, PotentialSpec()) == phi_dpp(terminal, PotentialSpec())


def test_beta_schedule_endpoints_and_midpoint():
    sched = BetaSchedule(beta_init=1.0, beta_min=0.2, t_anneal=100)
    assert beta_at(sched, 0) == 1.0
    assert beta_at(sched, 100) == 0.2
    assert beta_at(sched, 1000) == 0.2
    assert beta_at(sched, 50) == pytest.approx(0.6, abs=1e-15)
    betas = [beta_at(sched, t) for t in range(0, 150)]
    assert all(a >= b for a, b in zip(betas, betas[1:]))
    with pytest.raises(InvalidInputError):
        beta_at(sched, -1)


def test_constant_beta():
    sched = BetaSchedule.constant(0.3)
    assert beta_at(sched, 0) == beta_at(sched, 7) == 0.3


def test_shape_reward():
    assert shape_reward(1.0, 0.5, 2.0, 0.9, 0.5) == pytest.approx(1.0 + 0.5 * (1.8 - 0.5))
    with pytest.raises(InvalidInputError):
        shape_reward(1.0, 0.0, 0.0, 0.0, 1.0)


def test_telescoping_on_random_trajectories(rng):
    inst = make_instance(4, 4, k=3, probe=5)
    policy = PolicyParams.uniform(inst.n_cells)
    for _ in range(50):
        traj = sample_trajectory(policy, inst, rng)
        phis = rng.uniform(-1, 1, size=len(traj.states))
        for gamma in (0.9, 0.99, 1.0):
            assert abs(telescoping_residual(traj, phis, gamma)) <= 1e-12
        assert gamma_one_collapse_gap(traj, phis, beta=0.7) <= 1e-12


def test_shaped_rewards_sum_at_gamma_one(small_instance):
    state = PlacementState.initial(small_instance)
    s1, r1, _ = step(state, 0)
    s2, r2, _ = step(s1, 8)
    traj = Trajectory([state, s1, s2], [0, 8], [r1, r2])
    phis = [0.0, 0.4, 0.1]
    shaped = shaped_rewards(traj, phis, gamma=1.0, beta=1.0)
    assert sum(shaped) == pytest.approx(r1 + r2 + 0.1)


def test_q_identity_small_grid():
    inst = make_instance(3, 3, k=2, probe=4)
    result = shaped_q_check(inst, PotentialSpec(terminal_zeroed=True), gamma=0.9, beta=1.0)
    assert result.max_deviation <= 1e-10
    assert result.greedy_agreement
    assert result.n_states == 1 + 8 + 28


def test_q_identity_scaled_beta():
    inst = make_instance(3, 3, k=2, probe=0)
    result = shaped_q_check(inst, PotentialSpec(), gamma=1.0, beta=0.4)
    assert result.max_deviation <= 1e-10


def test_hpwl():
    pts = np.array([[0.1, 0.2], [0.5, 0.9], [0.3, 0.4]])
    assert hpwl(pts) == pytest.approx(0.4 + 0.7)
    assert hpwl(pts[:1]) == 0.0


def test_connectivity_and_hpwl_potentials():
    positions = grid_centers(4, 4)
    spec = PotentialSpec(PotentialKind.CONNECTIVITY, alpha=1.0, nets=(Net(2.0, (0, 5)),))
    d = 0.5
    assert phi_connectivity(positions, (0, 5), spec) == pytest.approx(2.0 * math.exp(-d))
    assert phi_connectivity(positions, (0,), spec) == 0.0
    hp = PotentialSpec(PotentialKind.HPWL, nets=(Net(2.0, (0, 5)),))
    assert phi_hpwl(positions, (0, 5), hp) == pytest.approx(-2.0 * d)


def test_taylor_gap_bound(rng):
    positions = grid_centers(8, 8)
    for _ in range(100):
        a, b = (int(c) for c in rng.choice(64, size=2, replace=False))
        d = float(np.abs(positions[a] - positions[b]).sum())
        spec = PotentialSpec(PotentialKind.CONNECTIVITY, alpha=float(rng.uniform(0.01, 1.0 / d)),
                             nets=(Net(float(rng.uniform(0.1, 3.0)), (a, b)),))
        gap, bound = conn_hpwl_gap(positions, (a, b), spec)
        assert gap <= bound


def test_taylor_gap_requires_two_pin_nets():
    spec = PotentialSpec(PotentialKind.CONNECTIVITY, nets=(Net(1.0, (0, 1, 2)),))
    with pytest.raises(InvalidInputError):
        conn_hpwl_gap(grid_centers(2, 2), (0, 1, 2), spec)


def test_net_potential_needs_nets():
    with pytest.raises(InvalidInputError):
        PotentialSpec(PotentialKind.HPWL)
