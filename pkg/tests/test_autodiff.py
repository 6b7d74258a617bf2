import numpy as np
import pytest

from app.attention import psla_rank1
from app.autodiff import (
    Tape,
    check_gradients,
    check_psla_head,
    evaluate,
    finite_difference,
    gradient,
    head_from_params,
    psla_head_loss,
    psla_head_params,
    random_head_problem,
    relative_error,
)
from app.errors import NonScalarLossError, ShapeMismatchError


def test_square_gradient():
    tape = Tape()
    x = tape.variable(np.array(3.0), "x")
    grads = tape.backward(tape.mul(x, x))
    assert float(grads["x"]) == pytest.approx(6.0)


def test_reused_node_accumulates():
    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]), "x")
    y = tape.add(tape.exp(x), tape.scale(x, 3.0))
    grads = tape.backward(tape.sum(y))
    np.testing.assert_allclose(grads["x"], np.exp([1.0, 2.0]) + 3.0)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.variable(np.ones(3), "x")
    with pytest.raises(NonScalarLossError):
        tape.backward(tape.exp(x))


def test_shape_checks():
    tape = Tape()
    a = tape.variable(np.ones((2, 3)), "a")
    b = tape.variable(np.ones((2, 2)), "b")
    with pytest.raises(ShapeMismatchError):
        tape.add(a, b)
    with pytest.raises(ShapeMismatchError):
        tape.matmul(a, b)


def test_matmul_and_row_ops_against_differences(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "r": rng.uniform(1, 2, size=3)}

    def loss(tape, nodes):
        prod = tape.matmul(nodes["a"], nodes["b"])
        scaled = tape.row_div(tape.row_scale(prod, nodes["r"]), tape.sqrt(nodes["r"]))
        return tape.sum(tape.sigmoid(tape.elu(scaled)))

    report = check_gradients(loss, params)
    assert report.passed, report.to_dict()


def test_finite_difference_of_quadratic():
    grads = finite_difference(lambda p: float(np.sum(p["w"] ** 2)), {"w": np.array([1.0, -2.0])})
    np.testing.assert_allclose(grads["w"], [2.0, -4.0], rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_taped_head_matches_forward(rng):
    batch, head, weights = random_head_problem(7, 3, gated=True, normalized=True, rng=rng)
    params = psla_head_params(batch, head)
    loss = evaluate(psla_head_loss(batch, head, weights), params)
    assert loss == pytest.approx(float(np.sum(weights * psla_rank1(batch, head))), rel=1e-12)


def test_head_from_params_round_trip(rng):
    batch, head, _ = random_head_problem(4, 2, gated=True, normalized=True, rng=rng)
    params = psla_head_params(batch, head)
    rebuilt = head_from_params(head, params)
    np.testing.assert_array_equal(psla_rank1(batch, rebuilt), psla_rank1(batch, head))


def test_gradient_names_cover_every_parameter(rng):
    batch, head, weights = random_head_problem(3, 2, gated=True, normalized=True, rng=rng)
    params = psla_head_params(batch, head)
    grads = gradient(psla_head_loss(batch, head, weights), params)
    assert set(grads) == set(params)
    assert "gate_k.w2" in grads and "norm_q.shift" in grads


@pytest.mark.parametrize("gated", [False, True])
@pytest.mark.parametrize("normalized", [False, True])
@pytest.mark.parametrize("L", [2, 5, 16])
def test_psla_head_gradients(L, gated, normalized):
    report = check_psla_head(L, 4, gated, normalized, seed=L)
    assert report.passed, report.failures()
    assert report.worst_relative_error <= 1e-4
