import math

import numpy as np
import pytest

from fbsdefilter.model import StateSpaceModel


def make_model_1d(drift, divergence=None, sigma=1.0, obs_map=None, obs_noise=1.0,
                  mean0=0.0, var0=1.0):
    """Compact scalar-model builder for tests."""
    norm = 1.0 / math.sqrt(2.0 * math.pi * var0)

    def density(x):
        z = np.asarray(x, dtype=float)[..., 0] - mean0
        return norm * np.exp(-0.5 * z * z / var0)

    def sampler(n, rng):
        return mean0 + math.sqrt(var0) * rng.standard_normal((n, 1))

    return StateSpaceModel(
        dim_state=1,
        dim_obs=1,
        drift=drift,
        drift_divergence=divergence,
        diffusion=lambda t: np.array([[sigma]]),
        obs_map=obs_map if obs_map is not None else (lambda x: np.asarray(x, dtype=float)),
        obs_noise=lambda t: np.array([[obs_noise]]),
        initial_density=density,
        initial_sampler=sampler,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
