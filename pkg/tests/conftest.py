import numpy as np
import pytest

from safelmdp.env import FiniteSet, LinearMdpSpec


def random_finite_spec(rng, S=3, A=3, H=2, d=3, tau=0.5, sigma=0.0):
    """Small finite-action linear MDP with simplex features and anchor 0 safe."""
    mu = rng.dirichlet(np.ones(S), size=(H, d))
    theta = rng.random((H, d))
    gamma = rng.random((H, d))
    gamma[:, 0] *= tau  # the first vertex is always safe
    geoms = []
    for _ in range(S):
        feats = rng.dirichlet(np.ones(d), size=A)
        if not np.all(gamma @ feats[0] < tau):
            feats[0] = 0.9 * np.eye(d)[0] + 0.1 * feats[0]
            feats[0] /= feats[0].sum()
        geoms.append(FiniteSet(feats, 0))
    return LinearMdpSpec(d=d, H=H, mu=mu, theta=theta, gamma=gamma, tau=tau,
                         geometries=geoms, sigma=sigma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
