import numpy as np
import pytest

from app.attention import AttentionBatch, HeadConfig
from app.dpp import DppInstance
from app.kernel import DecayParams
from app.pdn import FrequencyBand, MeshPdnSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, L=6, d=3, d_v=None, positions=None):
    d_v = d if d_v is None else d_v
    if positions is None:
        positions = rng.uniform(0.0, 1.0, size=(L, 2))
    return AttentionBatch(rng.normal(size=(L, d)), rng.normal(size=(L, d)),
                          rng.normal(size=(L, d_v)), positions)


@pytest.fixture
def batch(rng):
    return random_batch(rng)


@pytest.fixture
def head():
    return HeadConfig(decay=DecayParams(0.3, -0.7))


def make_instance(width=3, height=3, k=2, probe=4, keep_out=()):
    return DppInstance(
        width=width, height=height, probe=probe, keep_out=tuple(keep_out), k_caps=k,
        mesh=MeshPdnSpec(width=width, height=height),
        band=FrequencyBand(n_points=4),
    )


@pytest.fixture
def small_instance():
    return make_instance()
