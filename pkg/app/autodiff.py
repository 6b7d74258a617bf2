"""
Reverse-Mode Tape
=================
A small recording tape over the matrix primitives one PSLA head needs, plus
the central finite-difference oracle it is checked against.

Usage:
    tape = Tape()
    x = tape.variable(np.array(3.0), "x")
    loss = tape.mul(x, x)
    grads = tape.backward(loss)        # {"x": array(6.)}

No general broadcasting: every primitive states the shapes it accepts.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from app.attention import AffineParams, AttentionBatch, GateParams, HeadConfig, NORM_EPSILON
from app.errors import InvalidInputError, NonScalarLossError, ShapeMismatchError
from app.kernel import DecayParams

logger = logging.getLogger(__name__)

# =============================================================================
# Constants
# =============================================================================

DEFAULT_STEP = 1e-5                 # central-difference step
DEFAULT_TOLERANCE = 1e-4            # relative error accepted by check_gradients
RELATIVE_FLOOR = 1e-12              # denominator floor of the relative error


# =============================================================================
# Tape
# =============================================================================

Vjp = Callable[[np.ndarray], Tuple[np.ndarray, ...]]


class TapeNode:
    """One recorded value; inputs always precede it on the tape, so the graph is acyclic."""

    __slots__ = ("op", "inputs", "value", "adjoint", "vjp", "name", "index")

    def __init__(self, op: str, inputs: Tuple["TapeNode", ...], value: np.ndarray,
                 vjp: Optional[Vjp], name: Optional[str], index: int):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.adjoint = np.zeros_like(value)
        self.vjp = vjp
        self.name = name
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, shape={self.shape}, name={self.name!r})"


def _same_shape(op: str, a: TapeNode, b: TapeNode):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


class Tape:
    def __init__(self):
        self.nodes: List[TapeNode] = []

    def _record(self, op: str, inputs: Tuple[TapeNode, ...], value, vjp: Optional[Vjp],
                name: Optional[str] = None) -> TapeNode:
        node = TapeNode(op, inputs, np.asarray(value, dtype=np.float64), vjp, name, len(self.nodes))
        self.nodes.append(node)
        return node

    def variable(self, value, name: str) -> TapeNode:
        return self._record("variable", (), np.array(value, dtype=np.float64), None, name)

    def constant(self, value) -> TapeNode:
        return self._record("constant", (), np.array(value, dtype=np.float64), None)

    # -- element-wise ---------------------------------------------------------

    def add(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("add", a, b)
        return self._record("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("sub", a, b)
        return self._record("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def neg(self, a: TapeNode) -> TapeNode:
        return self._record("neg", (a,), -a.value, lambda g: (-g,))

    def mul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def div(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("div", a, b)
        av, bv = a.value, b.value
        return self._record("div", (a, b), av / bv, lambda g: (g / bv, -g * av / (bv * bv)))

    def scale(self, a: TapeNode, c: float) -> TapeNode:
        return self._record("scale", (a,), a.value * c, lambda g: (g * c,))

    def shift(self, a: TapeNode, c: float) -> TapeNode:
        return self._record("shift", (a,), a.value + c, lambda g: (g,))

    def exp(self, a: TapeNode) -> TapeNode:
        e = np.exp(a.value)
        return self._record("exp", (a,), e, lambda g: (g * e,))

    def elu(self, a: TapeNode) -> TapeNode:
        x = a.value
        negative = np.minimum(x, 0.0)
        value = np.where(x > 0.0, x, np.expm1(negative))
        slope = np.where(x > 0.0, 1.0, np.exp(negative))
        return self._record("elu", (a,), value, lambda g: (g * slope,))

    def sigmoid(self, a: TapeNode) -> TapeNode:
        s = expit(a.value)
        return self._record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))

    def sqrt(self, a: TapeNode) -> TapeNode:
        r = np.sqrt(a.value)
        return self._record("sqrt", (a,), r, lambda g: (g / (2.0 * r),))

    # -- broadcasting helpers -------------------------------------------------

    def mul_scalar(self, x: TapeNode, s: TapeNode) -> TapeNode:
        """x * s with s a 0-d node."""
        if s.shape != ():
            raise ShapeMismatchError(f"mul_scalar: expected a scalar, got {s.shape}")
        xv, sv = x.value, s.value
        return self._record("mul_scalar", (x, s), xv * sv,
                            lambda g: (g * sv, np.sum(g * xv)))

    def row_scale(self, x: TapeNode, r: TapeNode) -> TapeNode:
        """x[i, :] * r[i]."""
        self._check_rows("row_scale", x, r)
        xv, rv = x.value, r.value
        return self._record("row_scale", (x, r), xv * rv[:, None],
                            lambda g: (g * rv[:, None], np.sum(g * xv, axis=1)))

    def row_shift(self, x: TapeNode, r: TapeNode) -> TapeNode:
        """x[i, :] + r[i]."""
        self._check_rows("row_shift", x, r)
        return self._record("row_shift", (x, r), x.value + r.value[:, None],
                            lambda g: (g, np.sum(g, axis=1)))

    def row_div(self, x: TapeNode, r: TapeNode) -> TapeNode:
        """x[i, :] / r[i]."""
        self._check_rows("row_div", x, r)
        xv, rv = x.value, r.value
        return self._record(
            "row_div", (x, r), xv / rv[:, None],
            lambda g: (g / rv[:, None], -np.sum(g * xv, axis=1) / (rv * rv)),
        )

    def col_scale(self, x: TapeNode, c: TapeNode) -> TapeNode:
        """x[:, j] * c[j]."""
        self._check_cols("col_scale", x, c)
        xv, cv = x.value, c.value
        return self._record("col_scale", (x, c), xv * cv[None, :],
                            lambda g: (g * cv[None, :], np.sum(g * xv, axis=0)))

    def add_bias(self, x: TapeNode, b: TapeNode) -> TapeNode:
        """x[:, j] + b[j]."""
        self._check_cols("add_bias", x, b)
        return self._record("add_bias", (x, b), x.value + b.value[None, :],
                            lambda g: (g, np.sum(g, axis=0)))

    @staticmethod
    def _check_rows(op: str, x: TapeNode, r: TapeNode):
        if x.value.ndim != 2 or r.shape != (x.shape[0],):
            raise ShapeMismatchError(f"{op}: {x.shape} against per-row {r.shape}")

    @staticmethod
    def _check_cols(op: str, x: TapeNode, c: TapeNode):
        if x.value.ndim != 2 or c.shape != (x.shape[1],):
            raise ShapeMismatchError(f"{op}: {x.shape} against per-column {c.shape}")

    # -- linear algebra and reductions -----------------------------------------

    def matmul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        """Matrix @ matrix or matrix @ vector."""
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
            raise ShapeMismatchError(f"matmul: {av.shape} @ {bv.shape}")
        if bv.ndim == 1:
            return self._record("matmul", (a, b), av @ bv,
                                lambda g: (np.outer(g, bv), av.T @ g))
        return self._record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: TapeNode) -> TapeNode:
        if a.value.ndim != 2:
            raise ShapeMismatchError(f"transpose: needs a matrix, got {a.shape}")
        return self._record("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))

    def sum(self, a: TapeNode) -> TapeNode:
        shape = a.shape
        return self._record("sum", (a,), np.sum(a.value), lambda g: (np.full(shape, g),))

    def sum_rows(self, a: TapeNode) -> TapeNode:
        """Row sums of a matrix (L x d -> L)."""
        if a.value.ndim != 2:
            raise ShapeMismatchError(f"sum_rows: needs a matrix, got {a.shape}")
        shape = a.shape
        return self._record("sum_rows", (a,), a.value.sum(axis=1),
                            lambda g: (np.broadcast_to(g[:, None], shape).copy(),))

    # -- backward -------------------------------------------------------------

    def backward(self, loss: TapeNode) -> Dict[str, np.ndarray]:
        """Adjoints of every named variable with respect to a scalar loss."""
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.adjoint = np.zeros_like(node.value)
        loss.adjoint = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.index + 1]):
            if node.vjp is None or not np.any(node.adjoint):
                continue
            for parent, grad in zip(node.inputs, node.vjp(node.adjoint)):
                parent.adjoint = parent.adjoint + np.reshape(grad, parent.shape)
        return {node.name: node.adjoint.copy() for node in self.nodes if node.op == "variable"}


# =============================================================================
# Gradient Checking
# =============================================================================

Params = Dict[str, np.ndarray]
TapedLoss = Callable[[Tape, Dict[str, TapeNode]], TapeNode]


@dataclass
class GradEntry:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    abs_error: float
    rel_error: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "size": int(self.analytic.size),
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "passed": self.passed,
        }


@dataclass
class GradReport:
    tolerance: float
    entries: List[GradEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst_relative_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def failures(self) -> List[str]:
        return [e.name for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_relative_error": self.worst_relative_error,
            "entries": [e.to_dict() for e in self.entries],
        }


def _run(loss_fn: TapedLoss, params: Params) -> Tuple[Tape, TapeNode]:
    tape = Tape()
    nodes = {name: tape.variable(value, name) for name, value in params.items()}
    return tape, loss_fn(tape, nodes)


def evaluate(loss_fn: TapedLoss, params: Params) -> float:
    _, loss = _run(loss_fn, params)
    return float(loss.value)


def gradient(loss_fn: TapedLoss, params: Params) -> Params:
    tape, loss = _run(loss_fn, params)
    return tape.backward(loss)


def finite_difference(loss_fn: Callable[[Params], float], params: Params,
                      h: float = DEFAULT_STEP) -> Params:
    """(f(theta + h e) - f(theta - h e)) / 2h for every coordinate of every parameter."""
    if not h > 0.0:
        raise InvalidInputError(f"step h={h} must be positive")
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    grads: Params = {}
    for name, value in work.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn(work)
            flat[i] = original - h
            minus = loss_fn(work)
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * h)
        grads[name] = grad
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - f| / max(max|a|, max|f|, 1e-12), per parameter."""
    if analytic.size == 0:
        return 0.0
    diff = float(np.max(np.abs(analytic - numeric)))
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), RELATIVE_FLOOR)
    return diff / scale


def check_gradients(loss_fn: TapedLoss, params: Params,
                    tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_STEP) -> GradReport:
    analytic = gradient(loss_fn, params)
    numeric = finite_difference(lambda p: evaluate(loss_fn, p), params, h)
    report = GradReport(tolerance=tolerance)
    for name in params:
        a, f = analytic[name], numeric[name]
        rel = relative_error(a, f)
        abs_err = float(np.max(np.abs(a - f))) if a.size else 0.0
        report.entries.append(GradEntry(name, a, f, abs_err, rel, rel <= tolerance))
    if not report.passed:
        logger.warning("[GradCheck] failed parameters: %s (worst rel err %.3e)",
                       ", ".join(report.failures()), report.worst_relative_error)
    return report


# =============================================================================
# Taped PSLA Head
# =============================================================================

def psla_head_params(batch: AttentionBatch, head: HeadConfig) -> Params:
    """Flat parameter map of one head: inputs, raw decay scalars, gates, affines."""
    params: Params = {
        "q": batch.q.copy(),
        "k": batch.k.copy(),
        "v": batch.v.copy(),
        "alpha_raw_x": np.array(head.decay.alpha_raw_x),
        "alpha_raw_y": np.array(head.decay.alpha_raw_y),
    }
    for side, gate in (("q", head.gate_q), ("k", head.gate_k)):
        if gate is not None:
            for part in ("w1", "b1", "w2", "b2"):
                params[f"gate_{side}.{part}"] = getattr(gate, part).copy()
    if head.pre_map_normalization:
        for side, affine in (("q", head.norm_q), ("k", head.norm_k)):
            params[f"norm_{side}.scale"] = affine.scale.copy()
            params[f"norm_{side}.shift"] = affine.shift.copy()
    return params


def _taped_features(tape: Tape, nodes: Dict[str, TapeNode], side: str,
                    head: HeadConfig) -> TapeNode:
    raw = nodes[side]
    z = raw
    if head.pre_map_normalization:
        d = raw.shape[1]
        mean = tape.scale(tape.sum_rows(raw), 1.0 / d)
        centered = tape.row_shift(raw, tape.neg(mean))
        var = tape.scale(tape.sum_rows(tape.mul(centered, centered)), 1.0 / d)
        std = tape.sqrt(tape.shift(var, NORM_EPSILON))
        z = tape.add_bias(tape.col_scale(tape.row_div(centered, std), nodes[f"norm_{side}.scale"]),
                          nodes[f"norm_{side}.shift"])
    phi = tape.shift(tape.elu(z), 1.0 + head.feature_map.epsilon)
    if f"gate_{side}.w1" in nodes:
        hidden = tape.elu(tape.add_bias(tape.matmul(raw, nodes[f"gate_{side}.w1"]),
                                        nodes[f"gate_{side}.b1"]))
        gate = tape.sigmoid(tape.add_bias(tape.matmul(hidden, nodes[f"gate_{side}.w2"]),
                                          nodes[f"gate_{side}.b2"]))
        phi = tape.mul(gate, phi)
    return phi


def _taped_rate(tape: Tape, raw: TapeNode, decay: DecayParams) -> TapeNode:
    return tape.shift(tape.scale(tape.sigmoid(raw), decay.span), decay.alpha_min)


def psla_head_forward(tape: Tape, nodes: Dict[str, TapeNode], positions: np.ndarray,
                      head: HeadConfig) -> TapeNode:
    """Taped psla_rank1; decay bounds and epsilon come from `head`, values from `nodes`."""
    phi_q = _taped_features(tape, nodes, "q", head)
    phi_k = _taped_features(tape, nodes, "k", head)
    alpha_x = _taped_rate(tape, nodes["alpha_raw_x"], head.decay)
    alpha_y = _taped_rate(tape, nodes["alpha_raw_y"], head.decay)
    exponent = tape.add(tape.mul_scalar(tape.constant(positions[:, 0]), alpha_x),
                        tape.mul_scalar(tape.constant(positions[:, 1]), alpha_y))
    qf = tape.row_scale(phi_q, tape.exp(tape.neg(exponent)))
    kf = tape.row_scale(phi_k, tape.exp(exponent))
    kf_t = tape.transpose(kf)
    numerator = tape.matmul(qf, tape.matmul(kf_t, nodes["v"]))
    key_sum = tape.matmul(kf_t, tape.constant(np.ones(positions.shape[0])))
    return tape.row_div(numerator, tape.matmul(qf, key_sum))


def psla_head_loss(batch: AttentionBatch, head: HeadConfig,
                   weights: Optional[np.ndarray] = None) -> TapedLoss:
    """Scalar loss sum(W * psla_rank1(...)); W = ones gives sum of the output."""
    positions = batch.positions
    w = np.ones_like(batch.v) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != batch.v.shape:
        raise ShapeMismatchError(f"loss weights {w.shape} do not match output {batch.v.shape}")

    def loss_fn(tape: Tape, nodes: Dict[str, TapeNode]) -> TapeNode:
        out = psla_head_forward(tape, nodes, positions, head)
        return tape.sum(tape.mul(out, tape.constant(w)))

    return loss_fn


def head_from_params(head: HeadConfig, params: Params) -> HeadConfig:
    """Rebuild a HeadConfig carrying the parameter values in `params`."""
    decay = DecayParams(float(params["alpha_raw_x"]), float(params["alpha_raw_y"]),
                        head.decay.alpha_min, head.decay.alpha_max)
    gates = {}
    for side in ("q", "k"):
        if f"gate_{side}.w1" in params:
            gates[side] = GateParams(*(params[f"gate_{side}.{p}"] for p in ("w1", "b1", "w2", "b2")))
        else:
            gates[side] = None
    norms = {side: None for side in ("q", "k")}
    if head.pre_map_normalization:
        for side in ("q", "k"):
            norms[side] = AffineParams(params[f"norm_{side}.scale"], params[f"norm_{side}.shift"])
    return HeadConfig(decay=decay, feature_map=head.feature_map,
                      gate_q=gates["q"], gate_k=gates["k"],
                      pre_map_normalization=head.pre_map_normalization,
                      norm_q=norms["q"], norm_k=norms["k"])


def random_head_problem(L: int, d: int, gated: bool, normalized: bool,
                        rng: np.random.Generator, gate_hidden: int = 3
                        ) -> Tuple[AttentionBatch, HeadConfig, np.ndarray]:
    """Random batch, head and loss weights for gradient checks.

    Gate second layers are random rather than zero so every gate parameter
    carries a nonzero gradient.
    """
    positions = rng.uniform(0.0, 1.0, size=(L, 2))
    batch = AttentionBatch(q=rng.normal(size=(L, d)), k=rng.normal(size=(L, d)),
                           v=rng.normal(size=(L, d)), positions=positions)

    def gate() -> GateParams:
        return GateParams(w1=rng.normal(0.0, 0.5, size=(d, gate_hidden)),
                          b1=rng.normal(0.0, 0.1, size=gate_hidden),
                          w2=rng.normal(0.0, 0.5, size=(gate_hidden, d)),
                          b2=np.full(d, -2.0) + rng.normal(0.0, 0.1, size=d))

    def affine() -> AffineParams:
        return AffineParams(scale=1.0 + 0.1 * rng.normal(size=d), shift=0.1 * rng.normal(size=d))

    head = HeadConfig(
        decay=DecayParams(alpha_raw_x=float(rng.normal(0.0, 0.5)),
                          alpha_raw_y=float(rng.normal(0.0, 0.5))),
        gate_q=gate() if gated else None,
        gate_k=gate() if gated else None,
        pre_map_normalization=normalized,
        norm_q=affine() if normalized else None,
        norm_k=affine() if normalized else None,
    )
    weights = rng.normal(size=(L, d))
    return batch, head, weights


def check_psla_head(L: int, d: int, gated: bool, normalized: bool, seed: int = 0,
                    tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_STEP) -> GradReport:
    rng = np.random.default_rng(seed)
    batch, head, weights = random_head_problem(L, d, gated, normalized, rng)
    report = check_gradients(psla_head_loss(batch, head, weights), psla_head_params(batch, head),
                             tolerance=tolerance, h=h)
    logger.debug("[GradCheck] L=%d d=%d gated=%s normalized=%s worst=%.3e",
                 L, d, gated, normalized, report.worst_relative_error)
    return report
