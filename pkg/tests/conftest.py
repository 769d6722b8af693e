import numpy as np
import pytest

from nemon.measures import parametrize_bounded_measure
from nemon.network import Activation, ImplicitNetwork

A_EX = np.array([[-1.0, 0.5], [2.0, -3.0]])


def random_net(rng, n=6, r=3, q=3, gamma=0.9, activation=None, t_scale=2.0, bias_only=False, eta=None):
    """Well-posed network with mu_inf(A) <= gamma (eta = 1) via the free parametrisation."""
    T = rng.uniform(-t_scale, t_scale, (n, n)) / np.sqrt(n)
    A = parametrize_bounded_measure(T, gamma)
    B = rng.standard_normal((n, r))
    C = rng.standard_normal((q, n))
    act = activation or Activation.relu()
    if bias_only:
        return ImplicitNetwork(A, B, C, activation=act, b=rng.standard_normal(q), eta=eta)
    return ImplicitNetwork(A, B, C, rng.standard_normal((q, r)), eta=eta, activation=act)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
