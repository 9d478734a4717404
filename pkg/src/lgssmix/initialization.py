"""Starting points for the mixture EM.

Three constructions:

* identity: deterministic, spreads the state means of the M clusters evenly
  over [-1, 1] and uses mildly contractive shared dynamics.
* random: seeded draws; diagonal stable transition, binary observation
  rows, and SPD covariances of the form G G^T / dim + 0.1 I.
* k-means: fits one model per series from a common start (with one random
  orthogonal transition per restart), embeds every fitted parameter set in a
  fixed-length vector, clusters the vectors, and reads the M centers back as
  cluster parameters.  Mixing weights are the cluster membership shares.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels as _k
from .model import (
    PSD_FLOOR,
    LgssmixError,
    LgssmParams,
    MixtureModel,
    TimeSeriesSample,
    step_deltas,
    symmetrize_floor,
    validate_dataset,
)

KMEANS_MAX_ITER = 100
INIT_PRIOR_SCALE = 1e4
INIT_NOISE_SCALE = 0.05


class FewerPointsThanClusters(LgssmixError):
    def __init__(self, n_points, M):
        super().__init__(f"cannot form {M} clusters from {n_points} points")


class SeriesInitFailed(LgssmixError):
    def __init__(self, series_id):
        self.series_id = series_id
        super().__init__(f"series {series_id!r}: every restart failed to fit")


def param_vector_length(d: int, n: int) -> int:
    return d + d * d + n * d + d * (d + 1) + n * (n + 1) // 2


def vectorize(params: LgssmParams) -> np.ndarray:
    """Embed a parameter set in R^L: mu, A row-major, C row-major, then the
    lower-triangular halves of P, Gamma, Sigma."""
    d, n = params.d, params.n
    td = np.tril_indices(d)
    tn = np.tril_indices(n)
    return np.concatenate([
        params.mu,
        params.A.ravel(),
        params.C.ravel(),
        params.P[td],
        params.Gamma[td],
        params.Sigma[tn],
    ])


def devectorize(vec: np.ndarray, d: int, n: int) -> LgssmParams:
    """Inverse of vectorize; covariances are re-symmetrized and floored."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (param_vector_length(d, n),):
        raise LgssmixError(
            f"parameter vector has length {vec.shape}, expected "
            f"({param_vector_length(d, n)},)")
    pos = 0

    def take(count):
        nonlocal pos
        out = vec[pos:pos + count]
        pos += count
        return out

    mu = take(d).copy()
    A = take(d * d).reshape(d, d).copy()
    C = take(n * d).reshape(n, d).copy()

    def sym(m):
        tril = np.tril_indices(m)
        X = np.zeros((m, m))
        X[tril] = take(m * (m + 1) // 2)
        X = X + X.T - np.diag(np.diag(X))
        return symmetrize_floor(X)

    P = sym(d)
    Gamma = sym(d)
    Sigma = sym(n)
    return LgssmParams(mu=mu, A=A, C=C, Gamma=Gamma, Sigma=Sigma, P=P)


def identity_observation(n: int, d: int) -> np.ndarray:
    """Identity block in the top-left corner; the leftover columns cycle
    through the columns of I_n (d > n) and leftover rows through the rows of
    I_d (n > d)."""
    C = np.zeros((n, d))
    m = min(n, d)
    C[:m, :m] = np.eye(m)
    for j in range(n, d):
        C[:, j] = np.eye(n)[:, (j - n) % n]
    for i in range(d, n):
        C[i, :] = np.eye(d)[(i - d) % d, :]
    return C


def init_identity(M: int, d: int, n: int) -> MixtureModel:
    """Deterministic start: cluster l (1-based) gets state mean
    (-1 + 2 (l-1) / (M-1)) * ones (all zeros when M = 1)."""
    clusters = []
    for l in range(M):
        level = 0.0 if M == 1 else -1.0 + 2.0 * l / (M - 1)
        clusters.append(LgssmParams(
            mu=np.full(d, level),
            A=-1.5 * np.eye(d),
            C=identity_observation(n, d),
            Gamma=0.1 * np.eye(d),
            Sigma=0.1 * np.eye(n),
            P=0.1 * np.eye(d),
        ))
    return MixtureModel(clusters=tuple(clusters), pi=np.full(M, 1.0 / M))


def random_spd(rng: np.random.Generator, m: int) -> np.ndarray:
    G = rng.normal(size=(m, m))
    return G @ G.T / m + 0.1 * np.eye(m)


def random_cluster(rng: np.random.Generator, d: int, n: int) -> LgssmParams:
    """One seeded random parameter set (draw order: mu, A, C, Gamma, Sigma, P)."""
    mu = rng.uniform(0.0, 1.0, size=d)
    A = np.diag(rng.uniform(-1.9, -0.1, size=d))
    C = np.ones((n, d))
    if n > 1:
        C[1:] = rng.integers(0, 2, size=(n - 1, d)).astype(np.float64)
    Gamma = random_spd(rng, d)
    Sigma = random_spd(rng, n)
    P = random_spd(rng, d)
    return LgssmParams(mu=mu, A=A, C=C, Gamma=Gamma, Sigma=Sigma, P=P)


def init_random(M: int, d: int, n: int, seed: int = 0) -> MixtureModel:
    rng = np.random.default_rng(seed)
    clusters = tuple(random_cluster(rng, d, n) for _ in range(M))
    return MixtureModel(clusters=clusters, pi=np.full(M, 1.0 / M))


def _series_param_vectors(dataset, d, restarts, seed, tol, max_iter, threads=1):
    """Fit every series from `restarts` starts and return the winning
    parameter vector and log likelihood per series.

    Restart transition matrices are drawn sequentially from a per-series
    stream, so runs with more restarts extend (never reshuffle) the starts
    of runs with fewer.
    """
    info = validate_dataset(dataset)
    n = info.n_features
    children = np.random.SeedSequence(seed).spawn(len(dataset))

    def fit_one(i):
        series = dataset[i]
        rng = np.random.default_rng(children[i])
        orths = np.empty((restarts, d, d))
        for r in range(restarts):
            G = rng.normal(size=(d, d))
            orths[r] = np.linalg.qr(G)[0]
        y = series.observations
        deltas = step_deltas(series.timestamps)
        out = _k._best_single_fit(y, deltas, orths, tol, max_iter, PSD_FLOOR,
                                  _k.GAMMA_QUAD_ON_LAG, INIT_PRIOR_SCALE,
                                  INIT_NOISE_SCALE)
        bmu, bA, bC, bG, bS, bP, best_ll, n_ok, statuses = out
        if n_ok == 0:
            raise SeriesInitFailed(series.id)
        params = LgssmParams(mu=bmu, A=bA, C=bC, Gamma=bG, Sigma=bS, P=bP)
        return vectorize(params), float(best_ll)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fit_one, range(len(dataset))))
    else:
        results = [fit_one(i) for i in range(len(dataset))]
    points = np.array([r[0] for r in results])
    logliks = np.array([r[1] for r in results])
    return points, logliks


def kmeans_plusplus(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; degenerate all-zero distances fall back to a
    uniform draw, which is what re-seeds duplicate centers."""
    N = points.shape[0]
    centers = np.empty((M, points.shape[1]))
    idx = int(rng.integers(N))
    centers[0] = points[idx]
    dist_sq = ((points - centers[0]) ** 2).sum(axis=1)
    for m in range(1, M):
        total = dist_sq.sum()
        if total > 0:
            probs = dist_sq / total
            idx = int(rng.choice(N, p=probs))
        else:
            idx = int(rng.integers(N))
        centers[m] = points[idx]
        dist_sq = np.minimum(dist_sq, ((points - centers[m]) ** 2).sum(axis=1))
    return centers


def kmeans_lloyd(points: np.ndarray, M: int, seed: int = 0):
    """Standard Lloyd iterations on raw vectors with k-means++ seeding.

    Ties in assignment go to the lowest cluster index.  A cluster left empty
    after assignment steals the point farthest from its own center (choosing
    among points whose cluster keeps at least two members).  Stops when the
    labels stabilize or after 100 iterations.  Returns (labels, centers).
    """
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    if N < M:
        raise FewerPointsThanClusters(N, M)
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(points, M, rng)
    labels = np.full(N, -1)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        counts = np.bincount(new_labels, minlength=M)
        for m in range(M):
            if counts[m] > 0:
                continue
            own = d2[np.arange(N), new_labels]
            eligible = counts[new_labels] >= 2
            if not eligible.any():
                continue
            masked = np.where(eligible, own, -np.inf)
            j = int(masked.argmax())
            counts[new_labels[j]] -= 1
            new_labels[j] = m
            counts[m] = 1
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for m in range(M):
            member = labels == m
            if member.any():
                centers[m] = points[member].mean(axis=0)
    return labels, centers


def build_initial_model(dataset, M: int, d: int, options) -> MixtureModel:
    """Dispatch on options.init; the seed feeds the random and k-means
    constructions."""
    info = validate_dataset(dataset)
    n = info.n_features
    if options.init == "identity":
        return init_identity(M, d, n)
    if options.init == "random":
        return init_random(M, d, n, seed=options.seed)
    return init_kmeans(dataset, M, d, restarts=options.kmeans_restarts,
                       seed=options.seed, tol=options.tol,
                       max_iter=options.max_iter, threads=options.threads)


def init_kmeans(dataset, M: int, d: int, restarts: int = 30, seed: int = 0,
                tol: float = 0.1, max_iter: int = 1000, threads: int = 1) -> MixtureModel:
    """Per-series fits -> parameter vectors -> k-means -> cluster centers."""
    dataset = list(dataset)
    if len(dataset) < M:
        raise FewerPointsThanClusters(len(dataset), M)
    info = validate_dataset(dataset)
    n = info.n_features
    points, _ = _series_param_vectors(dataset, d, restarts, seed, tol,
                                      max_iter, threads)
    labels, centers = kmeans_lloyd(points, M, seed=seed)
    clusters = tuple(devectorize(centers[m], d, n) for m in range(M))
    shares = np.bincount(labels, minlength=M) / len(dataset)
    return MixtureModel(clusters=clusters, pi=shares)
