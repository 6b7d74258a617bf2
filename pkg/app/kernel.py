"""
Geometric Kernel
================
Shared primitives for everything that measures distance on the chip plane:
normalized coordinates, Manhattan distance, the separable exponential decay
exp(-alpha_x |dx| - alpha_y |dy|), and the bounded sigmoid reparameterization
of learnable decay rates.

Coordinates live in the unit square. A W x H grid cell (col c, row r) sits at
its center ((c + 0.5) / W, (r + 0.5) / H); cells are indexed row-major,
index = r * W + c. Each axis is normalized by its own extent.

All arithmetic is float64.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app.errors import InvalidInputError

# =============================================================================
# Constants
# =============================================================================

DEFAULT_ALPHA_MIN = 1.2      # lower bound of the learnable decay rate
DEFAULT_ALPHA_MAX = 1.8      # upper bound
DEFAULT_ALPHA_INIT = 1.5     # sigma(0) = 0.5 puts the rate at the midpoint


# =============================================================================
# Data Models
# =============================================================================

@dataclass(frozen=True)
class Coord2D:
    """A normalized chip coordinate in [0, 1]^2."""
    x: float
    y: float

    def __post_init__(self):
        for name, value in (("x", self.x), ("y", self.y)):
            if not math.isfinite(value):
                raise InvalidInputError(f"coordinate {name}={value!r} is not finite")
            if value < 0.0 or value > 1.0:
                raise InvalidInputError(f"coordinate {name}={value!r} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y}


@dataclass(frozen=True)
class DecayRates:
    """Direction-specific decay constants, per unit of normalized distance.

    Zero is admitted as the no-decay limit; reparameterized rates only
    approach it from above when alpha_min = 0.
    """
    alpha_x: float
    alpha_y: float

    def __post_init__(self):
        for name, value in (("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)):
            if not math.isfinite(value) or value < 0.0:
                raise InvalidInputError(f"{name}={value!r} must be finite and non-negative")


@dataclass(frozen=True)
class DecayParams:
    """Raw (unbounded) per-head decay scalars plus the reparameterization bounds."""
    alpha_raw_x: float = 0.0
    alpha_raw_y: float = 0.0
    alpha_min: float = DEFAULT_ALPHA_MIN
    alpha_max: float = DEFAULT_ALPHA_MAX

    def __post_init__(self):
        if not (math.isfinite(self.alpha_min) and math.isfinite(self.alpha_max)):
            raise InvalidInputError("decay bounds must be finite")
        if self.alpha_min < 0.0:
            raise InvalidInputError(f"alpha_min={self.alpha_min} must be non-negative")
        if not self.alpha_min < self.alpha_max:
            raise InvalidInputError(
                f"alpha_min={self.alpha_min} must be below alpha_max={self.alpha_max}"
            )
        if not (math.isfinite(self.alpha_raw_x) and math.isfinite(self.alpha_raw_y)):
            raise InvalidInputError("raw decay parameters must be finite")

    @property
    def span(self) -> float:
        return self.alpha_max - self.alpha_min


PositionsLike = Union[np.ndarray, Sequence[Coord2D]]


# =============================================================================
# Coordinates
# =============================================================================

def grid_cell_center(index: int, width: int, height: int) -> Coord2D:
    """Cell center of a row-major grid index."""
    if width < 1 or height < 1:
        raise InvalidInputError(f"grid {width}x{height} must be at least 1x1")
    if not 0 <= index < width * height:
        raise InvalidInputError(f"cell {index} outside a {width}x{height} grid")
    row, col = divmod(index, width)
    return Coord2D((col + 0.5) / width, (row + 0.5) / height)


def grid_centers(width: int, height: int) -> np.ndarray:
    """All cell centers of a W x H grid as an (W*H, 2) array, row-major."""
    if width < 1 or height < 1:
        raise InvalidInputError(f"grid {width}x{height} must be at least 1x1")
    cols = (np.arange(width, dtype=np.float64) + 0.5) / width
    rows = (np.arange(height, dtype=np.float64) + 0.5) / height
    xs = np.tile(cols, height)
    ys = np.repeat(rows, width)
    return np.stack([xs, ys], axis=1)


def as_position_array(positions: PositionsLike) -> np.ndarray:
    """Normalize a position list (Coord2D objects or an (L, 2) array) to float64 (L, 2)."""
    if isinstance(positions, np.ndarray):
        arr = np.asarray(positions, dtype=np.float64)
    else:
        arr = np.array([[p.x, p.y] for p in positions], dtype=np.float64).reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"positions must have shape (L, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("positions must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InvalidInputError("positions must lie in the unit square")
    return arr


# =============================================================================
# Distance and Decay
# =============================================================================

def manhattan_distance(a: Coord2D, b: Coord2D) -> float:
    return abs(a.x - b.x) + abs(a.y - b.y)


def decay_weight_axis(delta: float, alpha: float) -> float:
    """One-axis factor exp(-alpha |delta|)."""
    return math.exp(-alpha * abs(delta))


def decay_weight(a: Coord2D, b: Coord2D, rates: DecayRates) -> float:
    """exp(-alpha_x |dx| - alpha_y |dy|); 1 exactly when a == b."""
    return math.exp(-rates.alpha_x * abs(a.x - b.x) - rates.alpha_y * abs(a.y - b.y))


def sigmoid(x):
    return expit(x)


def decay_rate(alpha_raw, alpha_min: float, alpha_max: float):
    """alpha_min + (alpha_max - alpha_min) * sigmoid(alpha_raw), element-wise.

    Kept inside the open interval: a saturated sigmoid (|alpha_raw| > ~37)
    would otherwise land exactly on a bound.
    """
    rate = alpha_min + (alpha_max - alpha_min) * expit(alpha_raw)
    return np.clip(rate, np.nextafter(alpha_min, alpha_max), np.nextafter(alpha_max, alpha_min))


def reparameterize(params: DecayParams) -> DecayRates:
    bounds = (params.alpha_min, params.alpha_max)
    return DecayRates(
        alpha_x=float(decay_rate(params.alpha_raw_x, *bounds)),
        alpha_y=float(decay_rate(params.alpha_raw_y, *bounds)),
    )


def reparameterize_grad(params: DecayParams) -> Tuple[float, float]:
    """d alpha / d alpha_raw for (x, y)."""
    out = []
    for raw in (params.alpha_raw_x, params.alpha_raw_y):
        s = expit(raw)
        out.append(float(params.span * s * (1.0 - s)))
    return out[0], out[1]


def bias_factors(positions: PositionsLike, rates: DecayRates) -> Tuple[np.ndarray, np.ndarray]:
    """Per-token multiplicative factors of the rank-1 decay bias.

    d_q[i] = exp(-alpha_x x_i - alpha_y y_i), d_k[j] = exp(+alpha_x x_j + alpha_y y_j),
    so d_q[i] * d_k[j] = exp(alpha_x (x_j - x_i) + alpha_y (y_j - y_i)).
    """
    pos = as_position_array(positions)
    exponent = rates.alpha_x * pos[:, 0] + rates.alpha_y * pos[:, 1]
    return np.exp(-exponent), np.exp(exponent)


def pairwise_manhattan(positions: PositionsLike) -> np.ndarray:
    """Dense (L, L) Manhattan distance matrix."""
    pos = as_position_array(positions)
    return (np.abs(pos[:, None, 0] - pos[None, :, 0])
            + np.abs(pos[:, None, 1] - pos[None, :, 1]))


def coords_from_array(positions: np.ndarray) -> List[Coord2D]:
    return [Coord2D(float(x), float(y)) for x, y in as_position_array(positions)]
