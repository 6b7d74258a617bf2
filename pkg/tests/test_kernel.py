import math

import numpy as np
import pytest

from app.errors import InvalidInputError
from app.kernel import (
    Coord2D,
    DecayParams,
    DecayRates,
    bias_factors,
    decay_rate,
    decay_weight,
    decay_weight_axis,
    grid_cell_center,
    grid_centers,
    manhattan_distance,
    pairwise_manhattan,
    reparameterize,
    reparameterize_grad,
)


def test_coord_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        Coord2D(1.2, 0.5)
    with pytest.raises(InvalidInputError):
        Coord2D(0.5, float("nan"))


def test_manhattan_distance():
    assert manhattan_distance(Coord2D(0.0, 0.0), Coord2D(0.5, 0.25)) == pytest.approx(0.75)
    assert manhattan_distance(Coord2D(0.3, 0.3), Coord2D(0.3, 0.3)) == 0.0


def test_decay_weight_is_one_on_diagonal():
    a = Coord2D(0.4, 0.9)
    assert decay_weight(a, a, DecayRates(1.5, 1.5)) == 1.0


def test_decay_weight_is_separable(rng):
    rates = DecayRates(1.3, 1.7)
    for _ in range(20):
        a = Coord2D(*rng.uniform(0, 1, 2))
        b = Coord2D(*rng.uniform(0, 1, 2))
        expected = decay_weight_axis(a.x - b.x, rates.alpha_x) * decay_weight_axis(a.y - b.y, rates.alpha_y)
        assert decay_weight(a, b, rates) == pytest.approx(expected, rel=1e-14)


def test_decay_weight_monotone_in_distance():
    rates = DecayRates(1.5, 1.5)
    origin = Coord2D(0.0, 0.0)
    weights = [decay_weight(origin, Coord2D(x, 0.0), rates) for x in np.linspace(0, 1, 11)]
    assert all(w1 > w2 for w1, w2 in zip(weights, weights[1:]))


def test_reparameterize_midpoint_and_bounds():
    rates = reparameterize(DecayParams())
    assert rates.alpha_x == pytest.approx(1.5)
    assert rates.alpha_y == pytest.approx(1.5)
    extreme = reparameterize(DecayParams(1e3, -1e3))
    assert 1.2 < extreme.alpha_y < extreme.alpha_x < 1.8


@pytest.mark.parametrize("raw_x, raw_y", [(40.0, -40.0), (1e300, -1e300)])
def test_saturated_raws_stay_off_the_bounds(raw_x, raw_y):
    rates = reparameterize(DecayParams(raw_x, raw_y, 1.2, 1.8))
    assert 1.2 < rates.alpha_y < 1.5 < rates.alpha_x < 1.8


def test_reparameterization_range_over_many_samples():
    rng = np.random.default_rng(0)
    raw = np.concatenate([rng.normal(scale=50.0, size=1_000_000), [-1e6, -745.0, -40.0, 40.0, 745.0, 1e6]])
    for lo, hi in ((1.2, 1.8), (0.0, 0.6)):
        rates = decay_rate(raw, lo, hi)
        assert np.all(rates > lo) and np.all(rates < hi)


def test_reparameterize_grad_matches_difference():
    params = DecayParams(0.4, -1.1)
    h = 1e-6
    gx, gy = reparameterize_grad(params)
    up = reparameterize(DecayParams(0.4 + h, -1.1))
    down = reparameterize(DecayParams(0.4 - h, -1.1))
    assert gx == pytest.approx((up.alpha_x - down.alpha_x) / (2 * h), rel=1e-6)
    assert gy == pytest.approx(0.6 * math.exp(1.1) / (1 + math.exp(1.1)) ** 2, rel=1e-12)


def test_decay_params_validation():
    with pytest.raises(InvalidInputError):
        DecayParams(alpha_min=1.8, alpha_max=1.2)
    with pytest.raises(InvalidInputError):
        DecayParams(alpha_min=-0.1)
    with pytest.raises(InvalidInputError):
        DecayRates(-1.0, 0.0)
    DecayRates(0.0, 0.0)


def test_grid_centers_row_major():
    centers = grid_centers(3, 2)
    assert centers.shape == (6, 2)
    np.testing.assert_allclose(centers[4], [0.5, 0.75])
    c = grid_cell_center(4, 3, 2)
    assert (c.x, c.y) == (centers[4, 0], centers[4, 1])
    with pytest.raises(InvalidInputError):
        grid_cell_center(6, 3, 2)


def test_bias_factors_product_is_directional_kernel(rng):
    pos = rng.uniform(0, 1, size=(5, 2))
    rates = DecayRates(1.4, 1.6)
    d_q, d_k = bias_factors(pos, rates)
    dense = np.exp(rates.alpha_x * (pos[None, :, 0] - pos[:, None, 0])
                   + rates.alpha_y * (pos[None, :, 1] - pos[:, None, 1]))
    np.testing.assert_allclose(np.outer(d_q, d_k), dense, rtol=1e-13)


def test_pairwise_manhattan_symmetric(rng):
    dist = pairwise_manhattan(rng.uniform(0, 1, size=(7, 2)))
    np.testing.assert_array_equal(dist, dist.T)
    np.testing.assert_array_equal(np.diag(dist), 0.0)
