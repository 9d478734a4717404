"""Shared generators for the test suite."""

import numpy as np

from lgssmix.model import LgssmParams, TimeSeriesSample


def rand_spd(rng, m, base=0.3):
    G = rng.normal(size=(m, m))
    return G @ G.T / m + base * np.eye(m)


def rand_params(rng, d, n, stable=True):
    """A well-conditioned random parameter set.

    With stable=True the transition matrix has a negative-definite symmetric
    part, keeping moderate-horizon filtering well scaled.
    """
    A = rng.normal(size=(d, d)) * 0.4
    if stable:
        A = A - (0.6 + d * 0.1) * np.eye(d)
    return LgssmParams(
        mu=rng.normal(size=d) * 0.7,
        A=A,
        C=rng.normal(size=(n, d)),
        Gamma=rand_spd(rng, d),
        Sigma=rand_spd(rng, n),
        P=rand_spd(rng, d),
    )


def rand_timestamps(rng, T, lo=0.2, hi=2.0):
    gaps = rng.uniform(lo, hi, size=T - 1)
    return np.concatenate([[0.0], np.cumsum(gaps)])


def rand_series(rng, T, n, sid="s", timestamps=None):
    """A series with arbitrary (not model-generated) observations."""
    if timestamps is None:
        timestamps = rand_timestamps(rng, T)
    return TimeSeriesSample(id=sid, timestamps=timestamps,
                            observations=rng.normal(size=(T, n)))
