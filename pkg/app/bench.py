"""
Attention Micro-Benchmarks
==========================
Single-threaded wall-clock timing of the attention mechanisms, a closed-form
buffer model of their memory use, log-log scaling fits and crossover
detection.

Every mechanism at a given (L, d, seed) sees the same inputs: tokens on a
near-square W x H grid (W * H = L exactly) so the symmetric grid scan can
run on them too. Before timing, each mechanism is checked against its
dense oracle at the smallest length.

Usage:
    records = run_benchmarks(["softmax", "psla_rank1"], [512, 1024, 2048, 4096], d=64)
    fit = fit_scaling([r for r in records if r.mechanism == "psla_rank1"])
"""

import logging
import math
import timeit
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress, trim_mean
from threadpoolctl import threadpool_info, threadpool_limits

from app.attention import (
    DENSE_MAX_LENGTH,
    SCAN_BLOCK,
    AttentionBatch,
    BiasMode,
    HeadConfig,
    dense_psla_reference,
    linear_attention,
    psla_rank1,
    psla_symmetric_grid,
    softmax_attention,
)
from app.errors import (
    GuardExceededError,
    InsufficientDataError,
    InvalidInputError,
    OracleMismatchError,
    ThreadPinningError,
)
from app.kernel import grid_centers

logger = logging.getLogger(__name__)

# =============================================================================
# Constants
# =============================================================================

BYTES_PER_VALUE = 8
DEFAULT_REPS = 9
DEFAULT_WARMUP = 2
MIN_REPS = 5
TRIM_PROPORTION = 0.2           # cut from each tail for the trimmed mean
ORACLE_TOLERANCE = 1e-9
MIN_FIT_POINTS = 4
MIN_FIT_SPAN = 8.0              # largest / smallest L in a scaling fit


class Mechanism(str, Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"
    PSLA_RANK1 = "psla_rank1"
    PSLA_SYMMETRIC_GRID = "psla_symmetric_grid"
    DENSE_SYMMETRIC = "dense_symmetric"


DENSE_GUARDS = {
    Mechanism.SOFTMAX: 16384,
    Mechanism.DENSE_SYMMETRIC: 8192,
}


def parse_mechanism(name: str) -> Mechanism:
    try:
        return Mechanism(name)
    except ValueError:
        known = ", ".join(m.value for m in Mechanism)
        raise InvalidInputError(f"unknown mechanism {name!r} (known: {known})") from None


# =============================================================================
# Data Models
# =============================================================================

@dataclass
class BenchRecord:
    mechanism: str
    L: int
    d: int
    reps: int
    median_s: float
    trimmed_mean_s: float
    modeled_bytes: int

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism, "L": self.L, "d": self.d, "reps": self.reps,
            "median_s": self.median_s, "trimmed_mean_s": self.trimmed_mean_s,
            "modeled_bytes": self.modeled_bytes,
        }


@dataclass
class ScalingFit:
    mechanism: str
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism, "slope": self.slope, "intercept": self.intercept,
            "r_squared": self.r_squared, "n_points": self.n_points,
        }


# =============================================================================
# Inputs and Runners
# =============================================================================

def grid_shape(L: int) -> Tuple[int, int]:
    """(W, H) with W * H = L, H the largest divisor not above sqrt(L)."""
    if L < 1:
        raise InvalidInputError(f"L={L} must be positive")
    height = max(h for h in range(1, math.isqrt(L) + 1) if L % h == 0)
    return L // height, height


def make_inputs(L: int, d: int, seed: int) -> Tuple[AttentionBatch, HeadConfig, Tuple[int, int]]:
    if d < 1:
        raise InvalidInputError(f"d={d} must be positive")
    rng = np.random.default_rng(seed)
    grid = grid_shape(L)
    batch = AttentionBatch(
        q=rng.normal(size=(L, d)),
        k=rng.normal(size=(L, d)),
        v=rng.normal(size=(L, d)),
        positions=grid_centers(*grid),
    )
    return batch, HeadConfig(), grid


def _runner(mechanism: Mechanism, batch: AttentionBatch, head: HeadConfig,
            grid: Tuple[int, int]) -> Callable[[], np.ndarray]:
    if mechanism == Mechanism.SOFTMAX:
        return lambda: softmax_attention(batch)
    if mechanism == Mechanism.LINEAR:
        return lambda: linear_attention(batch, head.feature_map)
    if mechanism == Mechanism.PSLA_RANK1:
        return lambda: psla_rank1(batch, head)
    if mechanism == Mechanism.PSLA_SYMMETRIC_GRID:
        return lambda: psla_symmetric_grid(batch, head, grid)
    return lambda: dense_psla_reference(batch, head, BiasMode.SYMMETRIC,
                                        max_length=DENSE_GUARDS[Mechanism.DENSE_SYMMETRIC])


def _oracle(mechanism: Mechanism, batch: AttentionBatch, head: HeadConfig,
            grid: Tuple[int, int]) -> np.ndarray:
    if mechanism == Mechanism.SOFTMAX:
        scores = batch.q @ batch.k.T / math.sqrt(batch.dim)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        return weights / weights.sum(axis=1, keepdims=True) @ batch.v
    if mechanism == Mechanism.LINEAR:
        return dense_psla_reference(batch, head, BiasMode.NONE)
    if mechanism == Mechanism.PSLA_RANK1:
        return dense_psla_reference(batch, head, BiasMode.DIRECTIONAL)
    if mechanism == Mechanism.PSLA_SYMMETRIC_GRID:
        return dense_psla_reference(batch, head, BiasMode.SYMMETRIC)
    return psla_symmetric_grid(batch, head, grid)


def check_against_oracle(mechanism: str, L: int, d: int, seed: int = 0) -> float:
    """Max abs deviation of a mechanism from its oracle; raises above ORACLE_TOLERANCE."""
    mech = parse_mechanism(mechanism)
    batch, head, grid = make_inputs(L, d, seed)
    error = float(np.max(np.abs(_runner(mech, batch, head, grid)() - _oracle(mech, batch, head, grid))))
    if error > ORACLE_TOLERANCE:
        raise OracleMismatchError(f"{mech.value} deviates from its oracle by {error:.3e} at L={L}")
    logger.debug("[Bench] %s matches oracle at L=%d (err %.2e)", mech.value, L, error)
    return error


# =============================================================================
# Timing
# =============================================================================

@contextmanager
def pin_single_thread() -> Iterator[None]:
    """Limit BLAS/OpenMP pools to one thread; fail if any pool stays wider."""
    with threadpool_limits(limits=1):
        wide = [pool for pool in threadpool_info() if pool.get("num_threads", 1) != 1]
        if wide:
            names = ", ".join(f"{p.get('internal_api')}={p.get('num_threads')}" for p in wide)
            raise ThreadPinningError(f"thread pools still multi-threaded: {names}")
        yield


def time_forward(mechanism: str, L: int, d: int, reps: int = DEFAULT_REPS, seed: int = 0,
                 warmup: int = DEFAULT_WARMUP) -> BenchRecord:
    mech = parse_mechanism(mechanism)
    if reps < MIN_REPS:
        raise InvalidInputError(f"reps={reps} must be at least {MIN_REPS}")
    guard = DENSE_GUARDS.get(mech)
    if guard is not None and L > guard:
        raise GuardExceededError(f"{mech.value} refuses L={L} (guard {guard})")
    batch, head, grid = make_inputs(L, d, seed)
    fn = _runner(mech, batch, head, grid)
    with pin_single_thread():
        for _ in range(warmup):
            fn()
        times = np.array(timeit.Timer(fn).repeat(repeat=reps, number=1))
    record = BenchRecord(
        mechanism=mech.value, L=L, d=d, reps=reps,
        median_s=float(np.median(times)),
        trimmed_mean_s=float(trim_mean(times, TRIM_PROPORTION)),
        modeled_bytes=memory_model(mech.value, L, d, d),
    )
    logger.info("[Bench] %s L=%d d=%d median %.3e s", mech.value, L, d, record.median_s)
    return record


def run_benchmarks(mechanisms: Sequence[str], lengths: Sequence[int], d: int,
                   reps: int = DEFAULT_REPS, seed: int = 0,
                   warmup: int = DEFAULT_WARMUP) -> List[BenchRecord]:
    """Oracle check at the smallest length (capped by the dense guard), then time every pair."""
    if not mechanisms or not lengths:
        raise InvalidInputError("need at least one mechanism and one length")
    check_length = min(min(lengths), DENSE_MAX_LENGTH)
    for mechanism in mechanisms:
        check_against_oracle(mechanism, check_length, d, seed)
    return [time_forward(m, L, d, reps, seed, warmup) for m in mechanisms for L in lengths]


# =============================================================================
# Memory Model
# =============================================================================

def memory_model(mechanism: str, L: int, d: int, d_v: int, block: int = SCAN_BLOCK) -> int:
    """Bytes of the buffers each mechanism holds at once, 8 bytes per value."""
    if min(L, d, d_v, block) < 1:
        raise InvalidInputError("memory model needs positive dimensions")
    mech = parse_mechanism(mechanism)
    inputs = L * (2 * d + d_v)
    if mech == Mechanism.SOFTMAX:
        values = L * L + inputs
    elif mech in (Mechanism.LINEAR, Mechanism.PSLA_RANK1):
        values = d * d_v + inputs + 2 * L
    elif mech == Mechanism.PSLA_SYMMETRIC_GRID:
        values = inputs + 2 * L + 3 * L * d * min(d_v + 1, block)
    else:
        values = 2 * L * L + inputs
    return values * BYTES_PER_VALUE


# =============================================================================
# Fits
# =============================================================================

def fit_scaling(records: Sequence[BenchRecord]) -> ScalingFit:
    """OLS of log(median time) on log(L) for one mechanism."""
    if not records:
        raise InsufficientDataError("no records to fit")
    mechanisms = {r.mechanism for r in records}
    if len(mechanisms) != 1:
        raise InvalidInputError(f"records mix mechanisms {sorted(mechanisms)}")
    lengths = sorted({r.L for r in records})
    if len(lengths) < MIN_FIT_POINTS or lengths[-1] / lengths[0] < MIN_FIT_SPAN:
        raise InsufficientDataError(
            f"fit needs {MIN_FIT_POINTS} distinct L spanning {MIN_FIT_SPAN:g}x, got {lengths}"
        )
    fit = linregress(np.log([r.L for r in records]), np.log([r.median_s for r in records]))
    return ScalingFit(
        mechanism=records[0].mechanism, slope=float(fit.slope), intercept=float(fit.intercept),
        r_squared=float(fit.rvalue ** 2), n_points=len(records),
    )


def find_crossover(records_a: Sequence[BenchRecord], records_b: Sequence[BenchRecord]) -> Optional[int]:
    """Smallest L at which b is strictly faster than a, or None."""
    by_a: Dict[int, float] = {r.L: r.median_s for r in records_a}
    by_b: Dict[int, float] = {r.L: r.median_s for r in records_b}
    if sorted(by_a) != sorted(by_b):
        raise InvalidInputError(f"length grids differ: {sorted(by_a)} vs {sorted(by_b)}")
    for L in sorted(by_a):
        if by_b[L] < by_a[L]:
            return L
    return None


def group_by_mechanism(records: Sequence[BenchRecord]) -> Dict[str, List[BenchRecord]]:
    groups: Dict[str, List[BenchRecord]] = {}
    for r in records:
        groups.setdefault(r.mechanism, []).append(r)
    return groups


def crossover_table(records: Sequence[BenchRecord]) -> List[dict]:
    """find_crossover for every ordered pair of mechanisms present."""
    groups = group_by_mechanism(records)
    rows = []
    for slow in groups:
        for fast in groups:
            if slow != fast:
                rows.append({"baseline": slow, "challenger": fast,
                             "crossover_L": find_crossover(groups[slow], groups[fast])})
    return rows
