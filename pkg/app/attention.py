"""
Attention Mechanisms
====================
Forward passes for every attention variant the toolkit benchmarks and verifies.

Mechanisms:
- softmax_attention: O(L^2 d) reference
- linear_attention: phi(Q) [phi(K)^T V] / phi(Q) phi(K)^T 1, d x d product first
- psla_rank1: linear attention with per-token factors D_Q, D_K realizing the
  directional decay exp(alpha_x (x_j - x_i) + alpha_y (y_j - y_i))
- psla_symmetric_1d / psla_symmetric_grid: exact exp(-alpha d_M) kernel via
  bidirectional decayed prefix scans
- dense_psla_reference: O(L^2) oracle for all of the above

Feature pipeline per head (queries and keys alike):
    raw -> [per-token standardization + affine] -> phi -> [gate(raw) *] -> [bias]

The gate reads the raw projections, before normalization. D_Q / D_K scale each
token's whole feature row.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from app.errors import GuardExceededError, InvalidInputError, ShapeMismatchError
from app.kernel import (
    Coord2D,
    DecayParams,
    DecayRates,
    as_position_array,
    bias_factors,
    grid_centers,
    reparameterize,
)

# =============================================================================
# Constants
# =============================================================================

DEFAULT_EPSILON = 1e-6          # additive floor of the feature map
NORM_EPSILON = 1e-5             # variance floor of per-token standardization
GATE_BIAS_INIT = -2.0           # sigmoid(-2) ~= 0.12, gate starts nearly closed
DENSE_MAX_LENGTH = 4096         # dense oracle allocates L x L
SCAN_BLOCK = 8                  # value columns carried per symmetric scan


class BiasMode(str, Enum):
    NONE = "none"
    DIRECTIONAL = "directional"
    SYMMETRIC = "symmetric"
    EUCLIDEAN = "euclidean"


# =============================================================================
# Data Models
# =============================================================================

@dataclass(frozen=True)
class FeatureMapConfig:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise InvalidInputError(f"epsilon={self.epsilon} must be positive")


@dataclass(frozen=True, eq=False)
class GateParams:
    """Two-layer perceptron gate: sigmoid(elu(x W1 + b1) W2 + b2)."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        b2 = np.asarray(self.b2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2 or b1.ndim != 1 or b2.ndim != 1:
            raise ShapeMismatchError("gate weights must be matrices and biases vectors")
        d, hidden = w1.shape
        if b1.shape != (hidden,) or w2.shape != (hidden, d) or b2.shape != (d,):
            raise ShapeMismatchError(
                f"gate shapes inconsistent: w1 {w1.shape}, b1 {b1.shape}, "
                f"w2 {w2.shape}, b2 {b2.shape}"
            )
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def fresh(cls, d: int, hidden: int, rng: np.random.Generator) -> "GateParams":
        """Fresh initialization: random first layer, zero second layer, bias -2."""
        w1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, hidden))
        return cls(
            w1=w1,
            b1=np.zeros(hidden),
            w2=np.zeros((hidden, d)),
            b2=np.full(d, GATE_BIAS_INIT),
        )


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Learned per-feature scale and shift applied after per-token standardization."""
    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        shift = np.asarray(self.shift, dtype=np.float64)
        if scale.ndim != 1 or scale.shape != shift.shape:
            raise ShapeMismatchError(
                f"affine scale {scale.shape} and shift {shift.shape} must be equal-length vectors"
            )
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, d: int) -> "AffineParams":
        return cls(scale=np.ones(d), shift=np.zeros(d))


@dataclass(frozen=True, eq=False)
class HeadConfig:
    decay: DecayParams = field(default_factory=DecayParams)
    feature_map: FeatureMapConfig = field(default_factory=FeatureMapConfig)
    gate_q: Optional[GateParams] = None
    gate_k: Optional[GateParams] = None
    pre_map_normalization: bool = False
    norm_q: Optional[AffineParams] = None
    norm_k: Optional[AffineParams] = None

    def __post_init__(self):
        if self.pre_map_normalization and (self.norm_q is None or self.norm_k is None):
            raise InvalidInputError("pre-map normalization needs affine parameters for Q and K")

    @classmethod
    def build(
        cls,
        d: int,
        decay: Optional[DecayParams] = None,
        gated: bool = False,
        normalized: bool = False,
        gate_hidden: int = 4,
        rng: Optional[np.random.Generator] = None,
    ) -> "HeadConfig":
        """Head with fresh gates and identity affines where requested."""
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            decay=decay or DecayParams(),
            gate_q=GateParams.fresh(d, gate_hidden, rng) if gated else None,
            gate_k=GateParams.fresh(d, gate_hidden, rng) if gated else None,
            pre_map_normalization=normalized,
            norm_q=AffineParams.identity(d) if normalized else None,
            norm_k=AffineParams.identity(d) if normalized else None,
        )


@dataclass(frozen=True, eq=False)
class AttentionBatch:
    """Q (L x d), K (L x d), V (L x d_v) and token positions (L x 2, normalized)."""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
            raise ShapeMismatchError("q, k, v must be matrices")
        if q.shape != k.shape:
            raise ShapeMismatchError(f"q {q.shape} and k {k.shape} differ")
        if q.shape[0] < 1 or q.shape[1] < 1 or v.shape[1] < 1:
            raise InvalidInputError("batch needs L >= 1, d >= 1 and d_v >= 1")
        if v.shape[0] != q.shape[0]:
            raise ShapeMismatchError(f"v has {v.shape[0]} rows, q has {q.shape[0]}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise InvalidInputError("q, k, v must be finite")
        positions = as_position_array(self.positions)
        if positions.shape[0] != q.shape[0]:
            raise ShapeMismatchError(
                f"{positions.shape[0]} positions for {q.shape[0]} tokens"
            )
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "positions", positions)

    @classmethod
    def from_coords(cls, q, k, v, coords: Sequence[Coord2D]) -> "AttentionBatch":
        return cls(q=q, k=k, v=v, positions=as_position_array(coords))

    @property
    def length(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def value_dim(self) -> int:
        return self.v.shape[1]

    def with_values(self, v: np.ndarray) -> "AttentionBatch":
        return AttentionBatch(self.q, self.k, v, self.positions)


@dataclass(frozen=True, eq=False)
class MultiHeadProjections:
    """Per-head input projections and the shared output projection."""
    w_q: Tuple[np.ndarray, ...]
    w_k: Tuple[np.ndarray, ...]
    w_v: Tuple[np.ndarray, ...]
    w_o: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            object.__setattr__(
                self, name, tuple(np.asarray(w, dtype=np.float64) for w in getattr(self, name))
            )
        object.__setattr__(self, "w_o", np.asarray(self.w_o, dtype=np.float64))
        n = len(self.w_q)
        if n < 1 or len(self.w_k) != n or len(self.w_v) != n:
            raise ShapeMismatchError("need the same number (>= 1) of Q, K and V projections")
        value_width = 0
        for h in range(n):
            if self.w_q[h].shape != self.w_k[h].shape:
                raise ShapeMismatchError(f"head {h}: W_Q {self.w_q[h].shape} != W_K {self.w_k[h].shape}")
            value_width += self.w_v[h].shape[1]
        if self.w_o.ndim != 2 or self.w_o.shape[0] != value_width:
            raise ShapeMismatchError(
                f"W_O has {self.w_o.shape[0]} rows, concatenated heads give {value_width}"
            )

    @property
    def n_heads(self) -> int:
        return len(self.w_q)


# =============================================================================
# Feature Pipeline
# =============================================================================

def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def feature_map(x: np.ndarray, cfg: FeatureMapConfig = FeatureMapConfig()) -> np.ndarray:
    """phi(x) = ELU(x) + 1 + epsilon, element-wise."""
    return elu(np.asarray(x, dtype=np.float64)) + 1.0 + cfg.epsilon


def gate_values(raw_x: np.ndarray, g: GateParams) -> np.ndarray:
    hidden = elu(raw_x @ g.w1 + g.b1)
    return expit(hidden @ g.w2 + g.b2)


def apply_gate(phi_x: np.ndarray, raw_x: np.ndarray, g: GateParams) -> np.ndarray:
    phi_x = np.asarray(phi_x, dtype=np.float64)
    raw_x = np.asarray(raw_x, dtype=np.float64)
    if phi_x.shape != raw_x.shape:
        raise ShapeMismatchError(f"phi {phi_x.shape} and raw {raw_x.shape} differ")
    if phi_x.ndim != 2 or phi_x.shape[1] != g.dim:
        raise ShapeMismatchError(f"gate expects {g.dim} features, got shape {phi_x.shape}")
    return gate_values(raw_x, g) * phi_x


def normalize_rows(x: np.ndarray, affine: AffineParams) -> np.ndarray:
    """Per-token standardization followed by the learned affine map."""
    if affine.scale.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"affine has {affine.scale.shape[0]} features, input {x.shape[1]}")
    centered = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + NORM_EPSILON)
    return centered / std * affine.scale + affine.shift


def head_features(batch: AttentionBatch, head: HeadConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Feature matrices phi_q, phi_k after normalization, feature map and gates."""
    out = []
    for raw, affine, gate in (
        (batch.q, head.norm_q, head.gate_q),
        (batch.k, head.norm_k, head.gate_k),
    ):
        z = normalize_rows(raw, affine) if head.pre_map_normalization else raw
        phi = feature_map(z, head.feature_map)
        if gate is not None:
            phi = apply_gate(phi, raw, gate)
        out.append(phi)
    return out[0], out[1]


# =============================================================================
# Quadratic Mechanisms
# =============================================================================

def softmax_attention(batch: AttentionBatch) -> np.ndarray:
    scores = batch.q @ batch.k.T / math.sqrt(batch.dim)
    return softmax(scores, axis=1) @ batch.v


def _bias_matrix(positions: np.ndarray, rates: DecayRates, mode: BiasMode) -> np.ndarray:
    dx = positions[None, :, 0] - positions[:, None, 0]   # x_j - x_i
    dy = positions[None, :, 1] - positions[:, None, 1]
    if mode == BiasMode.NONE:
        return np.ones_like(dx)
    if mode == BiasMode.DIRECTIONAL:
        return np.exp(rates.alpha_x * dx + rates.alpha_y * dy)
    if mode == BiasMode.SYMMETRIC:
        return np.exp(-rates.alpha_x * np.abs(dx) - rates.alpha_y * np.abs(dy))
    if mode == BiasMode.EUCLIDEAN:
        return np.exp(-np.hypot(rates.alpha_x * dx, rates.alpha_y * dy))
    raise InvalidInputError(f"unknown bias mode {mode!r}")


def dense_psla_reference(
    batch: AttentionBatch,
    head: HeadConfig,
    mode: BiasMode = BiasMode.DIRECTIONAL,
    causal: bool = False,
    max_length: int = DENSE_MAX_LENGTH,
) -> np.ndarray:
    """O(L^2) oracle with explicit weights phi(q_i).phi(k_j) * bias(i, j), row-normalized."""
    if batch.length > max_length:
        raise GuardExceededError(
            f"dense reference refuses L={batch.length} (guard {max_length})"
        )
    mode = BiasMode(mode)
    phi_q, phi_k = head_features(batch, head)
    weights = (phi_q @ phi_k.T) * _bias_matrix(batch.positions, reparameterize(head.decay), mode)
    if causal:
        weights = np.tril(weights)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ batch.v


# =============================================================================
# Linear Mechanisms
# =============================================================================

def _normalized_linear(qf: np.ndarray, kf: np.ndarray, v: np.ndarray) -> np.ndarray:
    kv = kf.T @ v                  # d x d_v
    z = kf.sum(axis=0)             # d
    return (qf @ kv) / (qf @ z)[:, None]


def _causal_linear(qf: np.ndarray, kf: np.ndarray, v: np.ndarray) -> np.ndarray:
    L, d = qf.shape
    state = np.zeros((d, v.shape[1]))
    z = np.zeros(d)
    out = np.empty((L, v.shape[1]))
    for i in range(L):
        state += np.outer(kf[i], v[i])
        z += kf[i]
        out[i] = (qf[i] @ state) / (qf[i] @ z)
    return out


def linear_attention(batch: AttentionBatch, cfg: FeatureMapConfig = FeatureMapConfig()) -> np.ndarray:
    return _normalized_linear(feature_map(batch.q, cfg), feature_map(batch.k, cfg), batch.v)


def psla_rank1(batch: AttentionBatch, head: HeadConfig, causal: bool = False) -> np.ndarray:
    """Linear attention with the rank-1 directional decay bias; never builds an L x L matrix."""
    phi_q, phi_k = head_features(batch, head)
    d_q, d_k = bias_factors(batch.positions, reparameterize(head.decay))
    qf = phi_q * d_q[:, None]
    kf = phi_k * d_k[:, None]
    if causal:
        return _causal_linear(qf, kf, batch.v)
    return _normalized_linear(qf, kf, batch.v)


# =============================================================================
# Symmetric Decay Scans
# =============================================================================

def _bidirectional_decay_scan(values: np.ndarray, decay: np.ndarray) -> np.ndarray:
    """sum_j prod(decay between i and j) * values[j] along axis 0.

    decay[i] links positions i and i+1. Forward pass is inclusive of i,
    backward pass exclusive, so the diagonal is counted once.
    """
    n = values.shape[0]
    forward = np.empty_like(values)
    forward[0] = values[0]
    for i in range(1, n):
        forward[i] = decay[i - 1] * forward[i - 1] + values[i]
    backward = np.zeros_like(values)
    for i in range(n - 2, -1, -1):
        backward[i] = decay[i] * (backward[i + 1] + values[i + 1])
    return forward + backward


def _symmetric_scan_output(phi_q: np.ndarray, phi_k: np.ndarray, v: np.ndarray, scan) -> np.ndarray:
    """Numerator and denominator (ones column) through `scan`, SCAN_BLOCK value columns at a time."""
    extended = np.hstack([v, np.ones((v.shape[0], 1))])
    out = np.empty_like(extended)
    for start in range(0, extended.shape[1], SCAN_BLOCK):
        block = extended[:, start:start + SCAN_BLOCK]
        accum = scan(phi_k[:, :, None] * block[:, None, :])       # L x d x b
        out[:, start:start + SCAN_BLOCK] = np.einsum("ld,ldb->lb", phi_q, accum)
    return out[:, :-1] / out[:, -1:]


def psla_symmetric_1d(batch: AttentionBatch, head: HeadConfig) -> np.ndarray:
    """Exact exp(-alpha_x |x_i - x_j|) kernel on tokens sorted by x on one row."""
    pos = batch.positions
    if not np.all(pos[:, 1] == pos[0, 1]):
        raise InvalidInputError("1D symmetric scan needs all tokens on one row (equal y)")
    gaps = np.diff(pos[:, 0])
    if np.any(gaps < 0.0):
        raise InvalidInputError("1D symmetric scan needs tokens sorted ascending by x")
    rates = reparameterize(head.decay)
    decay = np.exp(-rates.alpha_x * gaps)
    phi_q, phi_k = head_features(batch, head)
    return _symmetric_scan_output(
        phi_q, phi_k, batch.v, lambda values: _bidirectional_decay_scan(values, decay)
    )


def psla_symmetric_grid(batch: AttentionBatch, head: HeadConfig, grid: Tuple[int, int]) -> np.ndarray:
    """Exact exp(-alpha_x|dx| - alpha_y|dy|) kernel on a full W x H grid, row-major.

    Separable: a bidirectional scan down each column, then along each row.
    """
    width, height = grid
    if width < 1 or height < 1 or width * height != batch.length:
        raise InvalidInputError(f"grid {width}x{height} does not hold {batch.length} tokens")
    if not np.allclose(batch.positions, grid_centers(width, height), rtol=0.0, atol=1e-12):
        raise InvalidInputError(f"positions are not the cell centers of a {width}x{height} grid")
    rates = reparameterize(head.decay)
    decay_y = np.full(max(height - 1, 0), math.exp(-rates.alpha_y / height))
    decay_x = np.full(max(width - 1, 0), math.exp(-rates.alpha_x / width))

    def scan(values: np.ndarray) -> np.ndarray:
        tail = values.shape[1:]
        cube = values.reshape((height, width) + tail)
        cube = _bidirectional_decay_scan(cube, decay_y)
        cube = np.swapaxes(_bidirectional_decay_scan(np.swapaxes(cube, 0, 1), decay_x), 0, 1)
        return cube.reshape(values.shape)

    phi_q, phi_k = head_features(batch, head)
    return _symmetric_scan_output(phi_q, phi_k, batch.v, scan)


# =============================================================================
# Multi-Head
# =============================================================================

def multihead_concat(
    heads: Sequence[HeadConfig],
    projections: MultiHeadProjections,
    batch: AttentionBatch,
) -> np.ndarray:
    """Per-head psla_rank1 outputs concatenated in head order, before W_O."""
    if len(heads) != projections.n_heads:
        raise ShapeMismatchError(f"{len(heads)} head configs for {projections.n_heads} projections")
    outputs: List[np.ndarray] = []
    for h, head in enumerate(heads):
        for name, w, width in (("W_Q", projections.w_q[h], batch.dim),
                               ("W_K", projections.w_k[h], batch.dim),
                               ("W_V", projections.w_v[h], batch.value_dim)):
            if w.ndim != 2 or w.shape[0] != width:
                raise ShapeMismatchError(f"head {h}: {name} {w.shape} does not take {width} inputs")
        sub = AttentionBatch(
            q=batch.q @ projections.w_q[h],
            k=batch.k @ projections.w_k[h],
            v=batch.v @ projections.w_v[h],
            positions=batch.positions,
        )
        outputs.append(psla_rank1(sub, head))
    return np.hstack(outputs)


def multihead_psla(
    heads: Sequence[HeadConfig],
    projections: MultiHeadProjections,
    batch: AttentionBatch,
) -> np.ndarray:
    return multihead_concat(heads, projections, batch) @ projections.w_o
