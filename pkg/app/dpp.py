"""
Decoupling-Capacitor Placement
==============================
The placement MDP: an instance fixes a grid, a probe port, keep-out cells and a
capacitor budget K; a state is the ordered list of cells placed so far. Each
step places one capacitor on a free cell. Reward is terminal-only: 0 until the
K-th capacitor, then the pdn reward of the placed set.

The probe cell is never a legal placement.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import GenerationSettings
from app.errors import (
    GuardExceededError,
    IllegalActionError,
    InfeasibleConfigError,
    InvalidInputError,
    TerminalStateError,
)
from app.kernel import Coord2D, grid_cell_center, grid_centers
from app.pdn import CapacitorModel, FrequencyBand, MeshPdnSpec, dpp_reward

logger = logging.getLogger(__name__)

# =============================================================================
# Constants
# =============================================================================

MAX_ORACLE_SUBSETS = 1_000_000      # enumeration guard of exhaustive_optimum
REWARD_CACHE_SIZE = 1 << 16


# =============================================================================
# Data Models
# =============================================================================

@dataclass(frozen=True)
class DppInstance:
    width: int
    height: int
    probe: int
    keep_out: Tuple[int, ...]
    k_caps: int
    mesh: MeshPdnSpec
    cap_model: CapacitorModel = CapacitorModel()
    band: FrequencyBand = FrequencyBand()
    seed: int = 0

    def __post_init__(self):
        n = self.width * self.height
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"grid {self.width}x{self.height} must be at least 1x1")
        if (self.mesh.width, self.mesh.height) != (self.width, self.height):
            raise InvalidInputError(
                f"mesh {self.mesh.width}x{self.mesh.height} does not match grid {self.width}x{self.height}"
            )
        if not 0 <= self.probe < n:
            raise InvalidInputError(f"probe {self.probe} outside the grid")
        keep_out = tuple(sorted(set(int(c) for c in self.keep_out)))
        if len(keep_out) != len(self.keep_out):
            raise InvalidInputError("keep-out cells must be distinct")
        if any(not 0 <= c < n for c in keep_out):
            raise InvalidInputError("keep-out cell outside the grid")
        if self.probe in keep_out:
            raise InvalidInputError("probe cell cannot be a keep-out cell")
        if self.k_caps < 1 or self.k_caps > n - len(keep_out) - 1:
            raise InvalidInputError(
                f"k_caps={self.k_caps} must lie in [1, {n - len(keep_out) - 1}]"
            )
        object.__setattr__(self, "keep_out", keep_out)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def free_cells(self) -> Tuple[int, ...]:
        blocked = set(self.keep_out) | {self.probe}
        return tuple(c for c in range(self.n_cells) if c not in blocked)

    def coord(self, cell: int) -> Coord2D:
        return grid_cell_center(cell, self.width, self.height)

    def positions(self) -> np.ndarray:
        return grid_centers(self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "probe": self.probe,
            "keep_out": list(self.keep_out), "k_caps": self.k_caps,
            "mesh": self.mesh.to_dict(), "cap_model": self.cap_model.to_dict(),
            "band": self.band.to_dict(), "seed": self.seed,
        }


@dataclass(frozen=True)
class PlacementState:
    instance: DppInstance
    placed: Tuple[int, ...] = ()

    def __post_init__(self):
        placed = tuple(int(c) for c in self.placed)
        if len(set(placed)) != len(placed):
            raise InvalidInputError(f"duplicate cells in placement {placed}")
        if len(placed) > self.instance.k_caps:
            raise InvalidInputError(f"{len(placed)} cells placed, budget is {self.instance.k_caps}")
        blocked = set(self.instance.keep_out) | {self.instance.probe}
        for c in placed:
            if not 0 <= c < self.instance.n_cells or c in blocked:
                raise InvalidInputError(f"cell {c} cannot hold a capacitor")
        object.__setattr__(self, "placed", placed)

    @classmethod
    def initial(cls, instance: DppInstance) -> "PlacementState":
        return cls(instance, ())

    @property
    def is_terminal(self) -> bool:
        return len(self.placed) == self.instance.k_caps

    @property
    def placed_set(self) -> frozenset:
        return frozenset(self.placed)


@dataclass
class Trajectory:
    states: List[PlacementState]
    actions: List[int]
    rewards: List[float]
    shaped_rewards: Optional[List[float]] = None
    terminal_reward: float = 0.0

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise InvalidInputError("trajectory needs T+1 states, T actions and T rewards")
        if self.shaped_rewards is not None and len(self.shaped_rewards) != len(self.actions):
            raise InvalidInputError("shaped rewards must have one entry per action")

    @property
    def length(self) -> int:
        return len(self.actions)

    def original_return(self) -> float:
        return float(sum(self.rewards))

    def shaped_return(self, gamma: float = 1.0) -> float:
        rewards = self.shaped_rewards if self.shaped_rewards is not None else self.rewards
        return float(sum(gamma ** t * r for t, r in enumerate(rewards)))


# =============================================================================
# Generation
# =============================================================================

def generate_instance(
    cfg: GenerationSettings,
    seed: int,
    band: FrequencyBand = FrequencyBand(),
    cap_model: CapacitorModel = CapacitorModel(),
) -> DppInstance:
    """Uniform probe, keep-out cells and mesh parameters; deterministic per seed."""
    n = cfg.width * cfg.height
    n_keep = int(round(cfg.keep_out_fraction * n))
    if n < 2 or n_keep > n - 1 or cfg.k_caps > n - n_keep - 1:
        raise InfeasibleConfigError(
            f"{cfg.width}x{cfg.height} grid with {n_keep} keep-out cells cannot hold "
            f"{cfg.k_caps} capacitors besides the probe"
        )
    rng = np.random.default_rng(seed)
    probe = int(rng.integers(n))
    others = np.array([c for c in range(n) if c != probe])
    keep_out = tuple(sorted(int(c) for c in rng.choice(others, size=n_keep, replace=False)))
    mesh = MeshPdnSpec(
        width=cfg.width,
        height=cfg.height,
        r_seg=float(rng.uniform(*cfg.r_seg_range)),
        l_seg=float(rng.uniform(*cfg.l_seg_range)),
        c_node=float(rng.uniform(*cfg.c_node_range)),
        g_node=float(rng.uniform(*cfg.g_node_range)),
    )
    logger.debug("[Generate] seed=%d probe=%d keep_out=%s", seed, probe, keep_out)
    return DppInstance(
        width=cfg.width, height=cfg.height, probe=probe, keep_out=keep_out,
        k_caps=cfg.k_caps, mesh=mesh, cap_model=cap_model, band=band, seed=seed,
    )


# =============================================================================
# Environment
# =============================================================================

@lru_cache(maxsize=REWARD_CACHE_SIZE)
def _cached_reward(instance: DppInstance, cells: Tuple[int, ...]) -> float:
    return dpp_reward(instance.mesh, cells, instance.band, instance.probe, instance.cap_model)


def placement_reward(instance: DppInstance, cells: Sequence[int]) -> float:
    """Terminal reward of a placed set; memoized per (instance, sorted cells)."""
    return _cached_reward(instance, tuple(sorted(int(c) for c in cells)))


def legal_actions(state: PlacementState) -> Tuple[int, ...]:
    """Free cells not yet used, ascending."""
    if state.is_terminal:
        raise TerminalStateError("terminal state has no legal actions")
    used = state.placed_set
    return tuple(c for c in state.instance.free_cells() if c not in used)


def step(state: PlacementState, action: int) -> Tuple[PlacementState, float, bool]:
    if action not in legal_actions(state):
        raise IllegalActionError(f"cell {action} is not a legal placement")
    nxt = PlacementState(state.instance, state.placed + (int(action),))
    if nxt.is_terminal:
        return nxt, placement_reward(nxt.instance, nxt.placed), True
    return nxt, 0.0, False


def random_placement(instance: DppInstance, rng: np.random.Generator) -> Tuple[int, ...]:
    free = np.array(instance.free_cells())
    return tuple(int(c) for c in rng.choice(free, size=instance.k_caps, replace=False))


def exhaustive_optimum(
    instance: DppInstance,
    max_subsets: int = MAX_ORACLE_SUBSETS,
    cell_order: Optional[Sequence[int]] = None,
) -> Tuple[Tuple[int, ...], float]:
    """Best K-subset by reward; ties go to the lexicographically smallest sorted subset.

    `cell_order` permutes the enumeration; the result does not depend on it.
    """
    free = instance.free_cells()
    count = math.comb(len(free), instance.k_caps)
    if count > max_subsets:
        raise GuardExceededError(f"{count} subsets exceed the oracle guard of {max_subsets}")
    order = list(free) if cell_order is None else [int(c) for c in cell_order]
    if sorted(order) != list(free):
        raise InvalidInputError("cell_order must be a permutation of the free cells")
    best: Optional[Tuple[int, ...]] = None
    best_reward = -math.inf
    for combo in itertools.combinations(order, instance.k_caps):
        cells = tuple(sorted(combo))
        reward = placement_reward(instance, cells)
        if reward > best_reward or (reward == best_reward and cells < best):
            best, best_reward = cells, reward
    logger.info("[Oracle] %d subsets, best %s reward %.6g", count, best, best_reward)
    return best, best_reward
