import numpy as np
import pytest

from app.errors import InsufficientDataError, InvalidInputError, SingularSystemError
from app.pdn import (
    CapacitorModel,
    FrequencyBand,
    MeshPdnSpec,
    build_admittance,
    dpp_reward,
    fit_decay,
    impedance_profile,
    kron_reduce,
    mesh_edges,
    probe_impedance,
    transfer_impedance,
)


@pytest.fixture
def mesh():
    return MeshPdnSpec(width=4, height=3)


def test_mesh_edges_count(mesh):
    # 3 rows of 3 horizontal links + 2 rows of 4 vertical links
    assert len(mesh_edges(mesh)) == 17


def test_admittance_symmetric_with_positive_real_diagonal(mesh):
    y = build_admittance(mesh, 5e8, [(5, CapacitorModel())])
    np.testing.assert_array_equal(y, y.T)
    assert np.all(y.diagonal().real > 0)


def test_duplicate_placement_rejected(mesh):
    with pytest.raises(InvalidInputError):
        build_admittance(mesh, 1e9, [(2, CapacitorModel()), (2, CapacitorModel())])


def test_kron_equals_inverse_sub_block(rng):
    for n in (3, 17, 60):
        a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        y = a + a.T + n * np.eye(n)
        ports = [n - 1, 0, n // 2]
        np.testing.assert_allclose(kron_reduce(y, ports), np.linalg.inv(y)[np.ix_(ports, ports)],
                                   rtol=1e-10, atol=1e-12)


def test_kron_two_node_closed_form():
    y0, y1, g = 0.5 + 0.2j, 0.1 + 0.0j, 2.0 - 0.3j
    y = np.array([[y0 + g, -g], [-g, y1 + g]])
    expected = (y1 + g) / ((y0 + g) * (y1 + g) - g * g)
    assert kron_reduce(y, [0])[0, 0] == pytest.approx(expected, rel=1e-12)


def test_kron_all_ports_is_inverse(rng):
    y = rng.normal(size=(4, 4)) + 5 * np.eye(4)
    np.testing.assert_allclose(kron_reduce(y, [0, 1, 2, 3]), np.linalg.inv(y), rtol=1e-12)


def test_kron_rejects_bad_ports():
    with pytest.raises(InvalidInputError):
        kron_reduce(np.eye(3), [])
    with pytest.raises(InvalidInputError):
        kron_reduce(np.eye(3), [0, 0])
    with pytest.raises(InvalidInputError):
        kron_reduce(np.eye(3), [3])


def test_singular_internal_block_reports_condition():
    y = np.array([[2.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
    with pytest.raises(SingularSystemError) as info:
        kron_reduce(y, [0])
    assert info.value.condition_number is not None


def test_transfer_impedance_reciprocal(mesh):
    caps = [(7, CapacitorModel())]
    assert transfer_impedance(mesh, 3e8, 1, 10, caps) == transfer_impedance(mesh, 3e8, 10, 1, caps)


def test_profile_matches_kron(mesh):
    z = impedance_profile(mesh, 7e8, probe=5)
    assert z[5] == pytest.approx(probe_impedance(mesh, 7e8, 5), rel=1e-12)
    assert z[9] == pytest.approx(transfer_impedance(mesh, 7e8, 9, 5), rel=1e-10)


def test_reward_zero_without_capacitors(mesh):
    assert dpp_reward(mesh, [], FrequencyBand(n_points=3), probe=5) == 0.0


def test_reward_positive_next_to_probe(mesh):
    assert dpp_reward(mesh, [6], FrequencyBand(n_points=5), probe=5) > 0.0


def test_reward_rejects_capacitor_on_probe(mesh):
    with pytest.raises(InvalidInputError):
        dpp_reward(mesh, [5], FrequencyBand(n_points=3), probe=5)


def test_reward_ignores_placement_order(mesh):
    band = FrequencyBand(n_points=4)
    assert dpp_reward(mesh, [1, 9, 6], band, 5) == dpp_reward(mesh, [9, 6, 1], band, 5)


def test_band_points():
    band = FrequencyBand()
    f = band.frequencies()
    assert len(f) == 20
    assert f[0] == pytest.approx(1e8) and f[-1] == pytest.approx(2e9)
    assert band.geometric_mean() == pytest.approx(np.sqrt(2e17))
    with pytest.raises(InvalidInputError):
        FrequencyBand(f_min=2e9, f_max=1e8)


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        MeshPdnSpec(width=1, height=1)
    with pytest.raises(InvalidInputError):
        MeshPdnSpec(r_seg=0.0)
    assert MeshPdnSpec(width=2, height=1).n_nodes == 2


def test_decay_law_on_default_mesh():
    spec = MeshPdnSpec(width=8, height=8)
    fit = fit_decay(spec, FrequencyBand().geometric_mean(), probe=27)
    assert fit.slope < 0
    assert fit.r_squared >= 0.9
    assert fit.n_points == 63


def test_default_electrical_values():
    spec = MeshPdnSpec()
    assert (spec.r_seg, spec.l_seg, spec.c_node, spec.g_node) == (1.0, 10e-12, 1e-12, 4.0)


def test_decay_fit_needs_room():
    with pytest.raises(InsufficientDataError):
        fit_decay(MeshPdnSpec(width=3, height=8), 1e9, probe=0)
