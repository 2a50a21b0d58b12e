import numpy as np
import pytest

from pcdyn import ParticleSystem, PhaseState


@pytest.fixture
def two_body_attracting():
    """Opposite charges, unequal masses; the workhorse radiating pair."""
    return ParticleSystem.direct([1.0, -1.0], [1.0, 2.0])


@pytest.fixture
def two_body_state():
    return PhaseState([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]],
                      [[0.0, 0.3, 0.0], [0.0, -0.3, 0.0]])


@pytest.fixture
def equal_ratio_system():
    """Charge-to-mass ratio 1/2 for both particles (exactly, in binary)."""
    return ParticleSystem.direct([1.0, 2.0], [2.0, 4.0])


def random_separated_positions(rng, n, scale=2.0, min_sep=0.8):
    """Random positions with a guaranteed minimum pairwise separation."""
    while True:
        r = rng.normal(size=(n, 3)) * scale
        iu = np.triu_indices(n, 1)
        if n < 2 or np.min(np.linalg.norm(r[iu[0]] - r[iu[1]], axis=-1)) > min_sep:
            return r
