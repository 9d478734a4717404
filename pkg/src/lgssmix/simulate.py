"""Forward simulation of the discretized model and the three-class
synthetic benchmark.

The state recursion is x_1 = mu + u with u ~ N(0, P), then
x_k = (Id + delta_k A) x_{k-1} + w_k with w_k ~ N(0, delta_k Gamma);
observations are y_k = C x_k + v_k with v_k ~ N(0, Sigma / delta_k) and
delta_1 taken as 1.  Gaussian draws go through the symmetric PSD square
root of each covariance (eigendecomposition with negative eigenvalues
clipped to zero) applied to standard normals.

The benchmark has three classes of sizes 40/50/30 in dimension d=5, n=2.
Per series, the length is uniform on {25..75} and timestamps accumulate
integer increments uniform on {1..5} starting at 0, then get divided by
the terminal time so they span [0, 1]; series are then sampled from the
generating parameters at those rescaled timestamps, so the returned truth
model is exactly the distribution of the returned data.
"""

from __future__ import annotations

import numpy as np

from .initialization import random_cluster
from .model import (
    LgssmixError,
    LgssmParams,
    MixtureModel,
    TimeSeriesSample,
    step_deltas,
)

BENCHMARK_CLASS_SIZES = (40, 50, 30)
BENCHMARK_D = 5
BENCHMARK_N = 2
BENCHMARK_LENGTH_RANGE = (25, 75)
BENCHMARK_INCREMENT_RANGE = (1, 5)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(np.asarray(S, dtype=np.float64))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _check_timestamps(timestamps: np.ndarray) -> np.ndarray:
    t = np.asarray(timestamps, dtype=np.float64)
    if t.ndim != 1 or t.shape[0] < 2:
        raise LgssmixError("need at least two timestamps")
    if t[0] != 0.0:
        raise LgssmixError("timestamps must start at 0")
    if np.any(np.diff(t) <= 0):
        raise LgssmixError("timestamps must be strictly increasing")
    return t


def sample_series(theta: LgssmParams, timestamps, seed=0,
                  series_id: str = "sim") -> TimeSeriesSample:
    """One draw from the model at the given timestamps.

    Draw order is fixed (initial state, then one transition draw per later
    step, then one observation draw per step), so output is deterministic
    given the seed; `seed` may also be a SeedSequence or Generator to
    continue an existing stream.
    """
    t = _check_timestamps(timestamps)
    deltas = step_deltas(t)
    T, d, n = t.shape[0], theta.d, theta.n
    rng = np.random.default_rng(seed)
    sqrt_P = _psd_sqrt(theta.P)
    sqrt_Gamma = _psd_sqrt(theta.Gamma)
    sqrt_Sigma = _psd_sqrt(theta.Sigma)
    x = np.empty((T, d))
    x[0] = theta.mu + sqrt_P @ rng.standard_normal(d)
    for k in range(1, T):
        Ak = np.eye(d) + deltas[k] * theta.A
        x[k] = Ak @ x[k - 1] + np.sqrt(deltas[k]) * (
            sqrt_Gamma @ rng.standard_normal(d))
    y = np.empty((T, n))
    for k in range(T):
        y[k] = theta.C @ x[k] + (sqrt_Sigma @ rng.standard_normal(n)) \
            / np.sqrt(deltas[k])
    return TimeSeriesSample(id=series_id, timestamps=t, observations=y)


def noiseless_trajectory(theta: LgssmParams, timestamps) -> np.ndarray:
    """Mean path: x_1 = mu, x_k = (Id + delta_k A) x_{k-1}, y_k = C x_k."""
    t = _check_timestamps(timestamps)
    deltas = step_deltas(t)
    T, d = t.shape[0], theta.d
    x = np.empty((T, d))
    x[0] = theta.mu
    for k in range(1, T):
        x[k] = (np.eye(d) + deltas[k] * theta.A) @ x[k - 1]
    return x @ theta.C.T


def benchmark_truth(seed=0) -> MixtureModel:
    """The three generating parameter sets for a benchmark seed; mixing
    weights are the class shares."""
    root = np.random.SeedSequence(seed)
    truth_ss, _ = root.spawn(2)
    rng = np.random.default_rng(truth_ss)
    clusters = tuple(random_cluster(rng, BENCHMARK_D, BENCHMARK_N)
                     for _ in BENCHMARK_CLASS_SIZES)
    pi = np.array(BENCHMARK_CLASS_SIZES, dtype=np.float64)
    return MixtureModel(clusters=clusters, pi=pi / pi.sum())


def generate_benchmark(seed=0):
    """Three-class synthetic dataset: (dataset, labels, truth model).

    The generating parameters are drawn from the seed (the protocol fixes
    only their construction, not their values) and returned so evaluations
    can compare against the actual truth.
    """
    truth = benchmark_truth(seed)
    root = np.random.SeedSequence(seed)
    _, series_ss = root.spawn(2)
    n_total = sum(BENCHMARK_CLASS_SIZES)
    children = series_ss.spawn(n_total)
    labels = np.repeat(np.arange(len(BENCHMARK_CLASS_SIZES)),
                       BENCHMARK_CLASS_SIZES)
    lo_T, hi_T = BENCHMARK_LENGTH_RANGE
    lo_inc, hi_inc = BENCHMARK_INCREMENT_RANGE
    dataset = []
    for i in range(n_total):
        rng = np.random.default_rng(children[i])
        T = int(rng.integers(lo_T, hi_T + 1))
        increments = rng.integers(lo_inc, hi_inc + 1, size=T - 1)
        t = np.concatenate([[0.0], np.cumsum(increments, dtype=np.float64)])
        t /= t[-1]
        series = sample_series(truth.clusters[labels[i]], t, seed=rng,
                               series_id=f"sim{i:03d}")
        dataset.append(series)
    return dataset, labels, truth
