"""
Potential-Based Reward Shaping
==============================
Potentials over placement states and the shaped reward
    r' = r + beta(t) * (gamma * Phi(s') - Phi(s))

Potentials:
- dpp:           sum_i exp(-alpha d(i, probe)) - lambda sum_{i<j} exp(-alpha d(i, j))
- connectivity:  sum_e w_e sum_{i<j in e, placed} exp(-alpha d(i, j))
- hpwl:          -sum_e w_e HPWL_e(placed members)

beta(t) follows a cosine from beta_init down to beta_min over t_anneal steps.

Also home to the executable forms of the shaping guarantees: telescoping of
the shaping terms along a trajectory, the Q' = Q - beta Phi identity via exact
dynamic programming, and the Taylor gap between the connectivity and HPWL
potentials on 2-pin nets.
"""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.dpp import (
    DppInstance,
    PlacementState,
    Trajectory,
    legal_actions,
    placement_reward,
)
from app.errors import GuardExceededError, IllegalActionError, InvalidInputError
from app.kernel import Coord2D, as_position_array

logger = logging.getLogger(__name__)

# =============================================================================
# Constants
# =============================================================================

DEFAULT_ALPHA = 1.5
DEFAULT_LAMBDA = 0.5
MAX_DP_STATES = 100_000
ARGMAX_TIE_TOL = 1e-9


class PotentialKind(str, Enum):
    DPP = "dpp"
    CONNECTIVITY = "connectivity"
    HPWL = "hpwl"


# =============================================================================
# Data Models
# =============================================================================

@dataclass(frozen=True)
class Net:
    weight: float
    members: Tuple[int, ...]

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight > 0.0):
            raise InvalidInputError(f"net weight {self.weight} must be positive")
        if len(self.members) < 1:
            raise InvalidInputError("net needs at least one member")
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))


@dataclass(frozen=True)
class PotentialSpec:
    kind: PotentialKind = PotentialKind.DPP
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    nets: Tuple[Net, ...] = ()
    terminal_zeroed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PotentialKind(self.kind))
        object.__setattr__(self, "nets", tuple(self.nets))
        if not (math.isfinite(self.alpha) and self.alpha > 0.0):
            raise InvalidInputError(f"alpha={self.alpha} must be positive")
        if not (math.isfinite(self.lam) and self.lam >= 0.0):
            raise InvalidInputError(f"lambda={self.lam} must be non-negative")
        if self.kind != PotentialKind.DPP and not self.nets:
            raise InvalidInputError(f"{self.kind.value} potential needs at least one net")


@dataclass(frozen=True)
class BetaSchedule:
    beta_init: float = 1.0
    beta_min: float = 0.0
    t_anneal: int = 1

    def __post_init__(self):
        if self.t_anneal < 1:
            raise InvalidInputError(f"t_anneal={self.t_anneal} must be >= 1")
        if not (self.beta_init >= self.beta_min >= 0.0):
            raise InvalidInputError("schedule needs beta_init >= beta_min >= 0")

    @classmethod
    def constant(cls, beta: float) -> "BetaSchedule":
        return cls(beta_init=beta, beta_min=beta, t_anneal=1)


@dataclass
class QCheckResult:
    max_deviation: float
    greedy_agreement: bool
    n_states: int
    n_pairs: int
    disagreements: List[Tuple[Tuple[int, ...], int, int]]

    def to_dict(self) -> dict:
        return {
            "max_deviation": self.max_deviation,
            "greedy_agreement": self.greedy_agreement,
            "n_states": self.n_states,
            "n_pairs": self.n_pairs,
        }


# =============================================================================
# Potentials
# =============================================================================

def _require_kind(spec: PotentialSpec, *kinds: PotentialKind):
    if spec.kind not in kinds:
        raise InvalidInputError(
            f"{spec.kind.value} potential given where {'/'.join(k.value for k in kinds)} is needed"
        )


def _manhattan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[..., 0] - b[..., 0]) + np.abs(a[..., 1] - b[..., 1])


def dpp_potential_value(placed: Sequence[Coord2D], probe: Coord2D, alpha: float, lam: float) -> float:
    """Probe-proximity term minus lambda times the pairwise crowding term, on raw coordinates."""
    if not placed:
        return 0.0
    pts = as_position_array(placed)
    p = np.array([probe.x, probe.y])
    attraction = np.exp(-alpha * _manhattan(pts, p[None, :])).sum()
    i, j = np.triu_indices(len(pts), k=1)
    crowding = np.exp(-alpha * _manhattan(pts[i], pts[j])).sum() if len(i) else 0.0
    return float(attraction - lam * crowding)


def phi_dpp(state: PlacementState, spec: PotentialSpec) -> float:
    _require_kind(spec, PotentialKind.DPP)
    inst = state.instance
    return dpp_potential_value([inst.coord(c) for c in state.placed], inst.coord(inst.probe),
                               spec.alpha, spec.lam)


def delta_phi(state: PlacementState, action: int, spec: PotentialSpec) -> float:
    """phi_dpp(s + a) - phi_dpp(s) in O(|placed|)."""
    _require_kind(spec, PotentialKind.DPP)
    if action not in legal_actions(state):
        raise IllegalActionError(f"cell {action} is not a legal placement")
    inst = state.instance
    a = inst.coord(action)
    p = inst.coord(inst.probe)
    gain = math.exp(-spec.alpha * (abs(a.x - p.x) + abs(a.y - p.y)))
    crowd = 0.0
    for c in state.placed:
        q = inst.coord(c)
        crowd += math.exp(-spec.alpha * (abs(a.x - q.x) + abs(a.y - q.y)))
    return gain - spec.lam * crowd


def _net_points(positions: np.ndarray, placed: Iterable[int], net: Net) -> np.ndarray:
    used = set(int(c) for c in placed)
    members = [m for m in net.members if m in used]
    return positions[members]


def phi_connectivity(positions, placed: Iterable[int], spec: PotentialSpec) -> float:
    """Weighted exp(-alpha d) over placed member pairs of each net."""
    _require_kind(spec, PotentialKind.CONNECTIVITY)
    pos = as_position_array(positions)
    placed = list(placed)
    total = 0.0
    for net in spec.nets:
        pts = _net_points(pos, placed, net)
        if len(pts) < 2:
            continue
        i, j = np.triu_indices(len(pts), k=1)
        total += net.weight * float(np.exp(-spec.alpha * _manhattan(pts[i], pts[j])).sum())
    return total


def hpwl(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    return float(np.ptp(points[:, 0]) + np.ptp(points[:, 1]))


def phi_hpwl(positions, placed: Iterable[int], spec: PotentialSpec) -> float:
    _require_kind(spec, PotentialKind.HPWL)
    pos = as_position_array(positions)
    placed = list(placed)
    return -sum(net.weight * hpwl(_net_points(pos, placed, net)) for net in spec.nets)


def conn_hpwl_gap(positions, placed: Iterable[int], spec: PotentialSpec) -> Tuple[float, float]:
    """|Phi_conn - sum w + alpha sum w HPWL| and its Taylor bound sum w alpha^2 d^2 / 2 (2-pin nets)."""
    _require_kind(spec, PotentialKind.CONNECTIVITY, PotentialKind.HPWL)
    pos = as_position_array(positions)
    placed = set(int(c) for c in placed)
    conn = 0.0
    linear = 0.0
    bound = 0.0
    for net in spec.nets:
        if len(net.members) != 2:
            raise InvalidInputError(f"gap bound holds for 2-pin nets, got {len(net.members)} pins")
        if not set(net.members) <= placed:
            raise InvalidInputError(f"net {net.members} is not fully placed")
        d = float(_manhattan(pos[net.members[0]], pos[net.members[1]]))
        conn += net.weight * math.exp(-spec.alpha * d)
        linear += net.weight * (1.0 - spec.alpha * d)
        bound += net.weight * spec.alpha ** 2 * d ** 2 / 2.0
    return abs(conn - linear), bound


def state_potential(state: PlacementState, spec: PotentialSpec) -> float:
    """Phi(s) for shaping: the potential named by `spec`, zeroed at terminal states when terminal_zeroed."""
    if spec.terminal_zeroed and state.is_terminal:
        return 0.0
    if spec.kind == PotentialKind.DPP:
        return phi_dpp(state, spec)
    positions = state.instance.positions()
    if spec.kind == PotentialKind.CONNECTIVITY:
        return phi_connectivity(positions, state.placed, spec)
    return phi_hpwl(positions, state.placed, spec)


# =============================================================================
# Schedule and Shaped Reward
# =============================================================================

def beta_at(sched: BetaSchedule, t: int) -> float:
    if t < 0:
        raise InvalidInputError(f"schedule step t={t} must be non-negative")
    if t == 0:
        return sched.beta_init
    if t >= sched.t_anneal:
        return sched.beta_min
    cosine = (1.0 + math.cos(math.pi * t / sched.t_anneal)) / 2.0
    return sched.beta_min + (sched.beta_init - sched.beta_min) * cosine


def shape_reward(r: float, phi_s: float, phi_s_next: float, gamma: float, beta: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"gamma={gamma} must lie in (0, 1]")
    return r + beta * (gamma * phi_s_next - phi_s)


def telescoping_residual(traj: Trajectory, phi_values: Sequence[float], gamma: float) -> float:
    """sum_t gamma^t (gamma Phi_{t+1} - Phi_t) - (gamma^T Phi_T - Phi_0); zero up to rounding."""
    phis = [float(p) for p in phi_values]
    if len(phis) != len(traj.states):
        raise InvalidInputError(f"{len(phis)} potentials for {len(traj.states)} states")
    T = traj.length
    total = math.fsum(gamma ** t * (gamma * phis[t + 1] - phis[t]) for t in range(T))
    return total - (gamma ** T * phis[T] - phis[0])


def shaped_rewards(traj: Trajectory, phi_values: Sequence[float], gamma: float, beta: float) -> List[float]:
    if len(phi_values) != len(traj.states):
        raise InvalidInputError(f"{len(phi_values)} potentials for {len(traj.states)} states")
    return [shape_reward(r, phi_values[t], phi_values[t + 1], gamma, beta)
            for t, r in enumerate(traj.rewards)]


def gamma_one_collapse_gap(traj: Trajectory, phi_values: Sequence[float], beta: float) -> float:
    """|sum shaped - sum original - beta (Phi_T - Phi_0)| at gamma = 1."""
    shaped = shaped_rewards(traj, phi_values, 1.0, beta)
    difference = math.fsum(shaped) - math.fsum(traj.rewards)
    return abs(difference - beta * (phi_values[-1] - phi_values[0]))


# =============================================================================
# Exact Q-Function Check
# =============================================================================

def _greedy(q_row: Dict[int, float]) -> int:
    best = max(q_row.values())
    return min(a for a, q in q_row.items() if q >= best - ARGMAX_TIE_TOL)


def shaped_q_check(instance: DppInstance, spec: PotentialSpec, gamma: float,
                   beta: float = 1.0, max_states: int = MAX_DP_STATES) -> QCheckResult:
    """Exact Q and shaped Q' by backward DP over set-valued states.

    The potential is zeroed at terminal states. Returns the largest
    |Q'(s, a) - (Q(s, a) - beta Phi(s))| and whether greedy actions agree everywhere.
    """
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"gamma={gamma} must lie in (0, 1]")
    spec = replace(spec, terminal_zeroed=True)
    free = instance.free_cells()
    k = instance.k_caps
    n_states = sum(math.comb(len(free), i) for i in range(k + 1))
    if n_states > max_states:
        raise GuardExceededError(f"{n_states} states exceed the DP guard of {max_states}")

    potential: Dict[Tuple[int, ...], float] = {}

    def phi(cells: Tuple[int, ...]) -> float:
        if cells not in potential:
            potential[cells] = state_potential(PlacementState(instance, cells), spec)
        return potential[cells]

    value: Dict[Tuple[int, ...], float] = {cells: 0.0 for cells in itertools.combinations(free, k)}
    shaped_value: Dict[Tuple[int, ...], float] = dict(value)
    max_dev = 0.0
    n_pairs = 0
    disagreements = []
    for size in range(k - 1, -1, -1):
        for cells in itertools.combinations(free, size):
            used = set(cells)
            q_row: Dict[int, float] = {}
            q_shaped_row: Dict[int, float] = {}
            phi_s = phi(cells)
            for a in free:
                if a in used:
                    continue
                nxt = tuple(sorted(cells + (a,)))
                r = placement_reward(instance, nxt) if len(nxt) == k else 0.0
                q = r + gamma * value[nxt]
                q_shaped = shape_reward(r, phi_s, phi(nxt), gamma, beta) + gamma * shaped_value[nxt]
                q_row[a] = q
                q_shaped_row[a] = q_shaped
                max_dev = max(max_dev, abs(q_shaped - (q - beta * phi_s)))
                n_pairs += 1
            value[cells] = max(q_row.values())
            shaped_value[cells] = max(q_shaped_row.values())
            greedy, greedy_shaped = _greedy(q_row), _greedy(q_shaped_row)
            if greedy != greedy_shaped:
                disagreements.append((cells, greedy, greedy_shaped))
    logger.info("[QCheck] %d states, %d pairs, max deviation %.3e, %d greedy disagreements",
                n_states, n_pairs, max_dev, len(disagreements))
    return QCheckResult(max_dev, not disagreements, n_states, n_pairs, disagreements)
