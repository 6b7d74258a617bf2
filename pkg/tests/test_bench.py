import numpy as np
import pytest

from app import bench
from app.attention import DENSE_MAX_LENGTH
from app.bench import (
    BenchRecord,
    Mechanism,
    check_against_oracle,
    crossover_table,
    find_crossover,
    fit_scaling,
    grid_shape,
    make_inputs,
    memory_model,
    parse_mechanism,
    pin_single_thread,
    run_benchmarks,
    time_forward,
)
from app.errors import GuardExceededError, InsufficientDataError, InvalidInputError


def record(mechanism, L, seconds):
    return BenchRecord(mechanism, L, 64, 5, seconds, seconds, 0)


def test_grid_shape_is_exact():
    for L in (1, 7, 12, 512, 1000, 4096):
        width, height = grid_shape(L)
        assert width * height == L
        assert height <= width
    assert grid_shape(4096) == (64, 64)
    assert grid_shape(512) == (32, 16)


def test_inputs_are_deterministic():
    a, _, grid = make_inputs(24, 4, seed=3)
    b, _, _ = make_inputs(24, 4, seed=3)
    np.testing.assert_array_equal(a.q, b.q)
    assert grid == (6, 4)


@pytest.mark.parametrize("mechanism", [m.value for m in Mechanism])
def test_every_mechanism_matches_its_oracle(mechanism):
    assert check_against_oracle(mechanism, 36, 4, seed=1) <= 1e-9


def test_unknown_mechanism():
    with pytest.raises(InvalidInputError):
        parse_mechanism("flash")


def test_time_forward_record():
    rec = time_forward("psla_rank1", 64, 8, reps=5, warmup=0)
    assert rec.reps == 5 and rec.L == 64
    assert rec.median_s > 0 and rec.trimmed_mean_s > 0
    assert rec.modeled_bytes == memory_model("psla_rank1", 64, 8, 8)


def test_time_forward_guards():
    with pytest.raises(InvalidInputError):
        time_forward("softmax", 16, 4, reps=3)
    with pytest.raises(GuardExceededError):
        time_forward("softmax", 20000, 4)


def test_run_benchmarks_row_count():
    records = run_benchmarks(["softmax", "linear"], [16, 32, 64], d=4, reps=5, warmup=0)
    assert [(r.mechanism, r.L) for r in records] == [
        ("softmax", 16), ("softmax", 32), ("softmax", 64),
        ("linear", 16), ("linear", 32), ("linear", 64),
    ]


def test_run_benchmarks_caps_oracle_length(monkeypatch):
    checked = []
    monkeypatch.setattr(bench, "check_against_oracle", lambda m, L, d, seed: checked.append((m, L)))
    monkeypatch.setattr(bench, "time_forward",
                        lambda m, L, d, reps, seed, warmup: BenchRecord(m, L, d, reps, 1.0, 1.0, 0))
    records = run_benchmarks(["psla_rank1", "linear"], [8192, 16384], d=4, reps=5)
    assert checked == [("psla_rank1", DENSE_MAX_LENGTH), ("linear", DENSE_MAX_LENGTH)]
    assert [r.L for r in records] == [8192, 16384, 8192, 16384]


def test_pin_single_thread_allows_work():
    with pin_single_thread():
        assert float(np.ones((4, 4)).sum()) == 16.0


def test_memory_model_ratio():
    ratios = [memory_model("softmax", L, 64, 64) / memory_model("psla_rank1", L, 64, 64)
              for L in (512, 1024, 2048, 4096, 8192)]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    assert ratios[3] >= 10.0


def test_psla_memory_is_linear_in_length():
    sizes = [memory_model("psla_rank1", L, 64, 64) for L in (1000, 2000, 3000)]
    assert sizes[2] - sizes[1] == sizes[1] - sizes[0]


def test_fit_recovers_exponent():
    lengths = [512, 1024, 2048, 4096]
    records = [record("x", L, 1e-9 * L ** 2) for L in lengths]
    fit = fit_scaling(records)
    assert fit.slope == pytest.approx(2.0)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_needs_span():
    with pytest.raises(InsufficientDataError):
        fit_scaling([record("x", L, 1.0) for L in (512, 1024, 2048)])
    with pytest.raises(InsufficientDataError):
        fit_scaling([record("x", L, 1.0) for L in (512, 600, 700, 800)])
    with pytest.raises(InvalidInputError):
        fit_scaling([record("x", 512, 1.0), record("y", 1024, 1.0)])


def test_crossover():
    slow = [record("softmax", L, t) for L, t in ((512, 1.0), (1024, 4.0), (2048, 16.0))]
    fast = [record("psla_rank1", L, t) for L, t in ((512, 2.0), (1024, 4.0), (2048, 8.0))]
    assert find_crossover(slow, fast) == 2048
    assert find_crossover(fast, slow) == 512
    rows = crossover_table(slow + fast)
    assert {"baseline": "softmax", "challenger": "psla_rank1", "crossover_L": 2048} in rows


def test_crossover_needs_same_grid():
    with pytest.raises(InvalidInputError):
        find_crossover([record("a", 512, 1.0)], [record("b", 1024, 1.0)])


@pytest.mark.slow
def test_scaling_slopes_and_crossover():
    lengths = [512, 1024, 2048, 4096, 8192]
    records = run_benchmarks(["softmax", "psla_rank1"], lengths, d=64, reps=5)
    soft = fit_scaling([r for r in records if r.mechanism == "softmax"])
    psla = fit_scaling([r for r in records if r.mechanism == "psla_rank1"])
    assert 1.6 <= soft.slope <= 2.4 and soft.r_squared >= 0.9
    assert 0.7 <= psla.slope <= 1.4 and psla.r_squared >= 0.9
    rows = crossover_table(records)
    assert any(r["baseline"] == "softmax" and r["crossover_L"] is not None for r in rows)
