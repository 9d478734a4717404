"""The clustering engine: EM over a mixture of linear Gaussian state space
models.

Each iteration makes two passes over the dataset.  The first computes the
log marginal likelihood of every series under every cluster; cluster weights
are folded in and normalized in the log domain (subtract the row max before
exponentiating), giving the responsibilities and the observed-data log
likelihood of the current model.  The second pass re-runs the filter and
smoother per (series, cluster) pair with nonzero responsibility and folds
the weighted moment sums into per-cluster accumulators on the fly, so no
per-pair arrays are ever materialized.  The closed-form M step then solves
each cluster independently and updates the mixing weights to the mean
responsibility.

Termination: the elementwise absolute parameter change summed over all
clusters (mixing weights excluded) must drop below options.tol.

Determinism contract: series are split into fixed contiguous chunks of
CHUNK indices; each chunk accumulates serially inside one compiled kernel
call, and chunk results are merged in ascending chunk order regardless of
which worker finished first.  Results are therefore bit-identical across
thread counts.

Degeneracies: a cluster whose total responsibility falls below 1e-8 * N has
its parameters redrawn from the random-initialization construction using
the run's seed stream (mixing weight reset to 1/N, then renormalized) and
the event is recorded in the trace.  A non-finite iterate aborts the loop
and the last finite model is returned with converged=False.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

from . import _kernels as _k
from .em_single import SingularNormalEquations
from .initialization import random_cluster
from .kalman import NonFiniteState, SingularInnovation, SingularPrediction
from .model import (
    PSD_FLOOR,
    FitOptions,
    FitReport,
    LgssmixError,
    LgssmParams,
    MixtureModel,
    TraceEntry,
    param_delta,
    step_deltas,
    validate_dataset,
)
from .selection import abic

PI_FLOOR = 1e-300
EMPTY_CLUSTER_FRACTION = 1e-8


class NonFiniteIterate(LgssmixError):
    """An M step produced non-finite parameters."""

    def __init__(self, l):
        self.cluster = l
        super().__init__(f"cluster {l}: M step produced non-finite parameters")


class Responsibilities(NamedTuple):
    """Posterior cluster membership of every series.

    log_weights[i, l] = log p(Y^i | theta_l) + log pi_l; probs is its
    row-wise softmax; per_series_loglik[i] = logsumexp(log_weights[i]).
    """

    log_weights: np.ndarray
    probs: np.ndarray
    per_series_loglik: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.per_series_loglik.sum())


class _FlatData(NamedTuple):
    y_flat: np.ndarray
    deltas_flat: np.ndarray
    offsets: np.ndarray
    n_series: int


def _flatten(dataset) -> _FlatData:
    info = validate_dataset(dataset)
    offsets = np.zeros(info.n_series + 1, dtype=np.int64)
    np.cumsum(info.lengths, out=offsets[1:])
    y_flat = np.ascontiguousarray(
        np.concatenate([s.observations for s in dataset], axis=0))
    deltas_flat = np.concatenate([step_deltas(s.timestamps) for s in dataset])
    return _FlatData(y_flat, deltas_flat, offsets, info.n_series)


def _stack(model: MixtureModel):
    return (np.stack([c.mu for c in model.clusters]),
            np.stack([c.A for c in model.clusters]),
            np.stack([c.C for c in model.clusters]),
            np.stack([c.Gamma for c in model.clusters]),
            np.stack([c.Sigma for c in model.clusters]),
            np.stack([c.P for c in model.clusters]))


def _chunk_ranges(N):
    return [(i0, min(i0 + _k.CHUNK, N)) for i0 in range(0, N, _k.CHUNK)]


def _map_chunks(fn, ranges, pool):
    if pool is not None and len(ranges) > 1:
        return list(pool.map(fn, ranges))
    return [fn(r) for r in ranges]


def _raise_annotated(status, i, l, k, dataset):
    sid = dataset[i].id if 0 <= i < len(dataset) else i
    if status == _k.SINGULAR_INNOVATION:
        err = SingularInnovation(k)
    elif status == _k.NONFINITE_STATE:
        err = NonFiniteState(k)
    elif status == _k.SINGULAR_PREDICTION:
        err = SingularPrediction(k)
    else:
        err = LgssmixError(f"kernel status {status}")
    err.args = (f"series {sid!r} (index {i}), cluster {l}: {err.args[0]}",)
    err.series_index = i
    err.cluster = l
    raise err


def _loglik_matrix(flat, stacked, pool, dataset):
    """(N, M) log marginal likelihoods; chunk results keep ascending order."""
    ranges = _chunk_ranges(flat.n_series)

    def run(rg):
        i0, i1 = rg
        return _k._loglik_chunk(flat.y_flat, flat.deltas_flat, flat.offsets,
                                i0, i1, *stacked, PSD_FLOOR)

    results = _map_chunks(run, ranges, pool)
    for out, status, i, l, k in results:
        if status != _k.OK:
            _raise_annotated(status, i, l, k, dataset)
    return np.vstack([r[0] for r in results])


def _resp_from_logliks(logliks, pi) -> Responsibilities:
    log_pi = np.log(np.maximum(np.asarray(pi, dtype=np.float64), PI_FLOOR))
    log_w = logliks + log_pi[None, :]
    row_max = log_w.max(axis=1, keepdims=True)
    ex = np.exp(log_w - row_max)
    tot = ex.sum(axis=1, keepdims=True)
    probs = ex / tot
    per_series = row_max[:, 0] + np.log(tot[:, 0])
    return Responsibilities(log_w, probs, per_series)


def responsibilities(dataset, model: MixtureModel, threads: int = 1) -> Responsibilities:
    """Posterior membership probabilities of every series under `model`."""
    dataset = list(dataset)
    flat = _flatten(dataset)
    if dataset[0].n_features != model.n:
        raise LgssmixError(
            f"dataset has {dataset[0].n_features} features, model expects {model.n}")
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        logliks = _loglik_matrix(flat, _stack(model), pool, dataset)
    finally:
        if pool is not None:
            pool.shutdown()
    return _resp_from_logliks(logliks, model.pi)


def _accumulate_all(flat, stacked, probs, pool, dataset):
    """Weighted per-cluster moment sums, merged in ascending chunk order."""
    ranges = _chunk_ranges(flat.n_series)

    def run(rg):
        i0, i1 = rg
        return _k._estep_chunk(flat.y_flat, flat.deltas_flat, flat.offsets,
                               i0, i1, *stacked, probs, PSD_FLOOR)

    results = _map_chunks(run, ranges, pool)
    for r in results:
        status, i, l, k = r[5], r[6], r[7], r[8]
        if status != _k.OK:
            _raise_annotated(status, i, l, k, dataset)
    scal = results[0][0].copy()
    vec = results[0][1].copy()
    mats = results[0][2].copy()
    ymat = results[0][3].copy()
    yy = results[0][4].copy()
    for r in results[1:]:
        scal += r[0]
        vec += r[1]
        mats += r[2]
        ymat += r[3]
        yy += r[4]
    return scal, vec, mats, ymat, yy


def _solve_mstep(model, sums, n_series, options, rng):
    """Closed-form per-cluster updates from merged sums.

    Returns (new_model, warnings).  Clusters with vanishing responsibility
    mass are redrawn from the random construction instead of solved.
    """
    scal, vec, mats, ymat, yy = sums
    fixed = options.fixed_params
    flags = tuple(name in fixed for name in
                  ("mu", "A", "C", "Gamma", "Sigma", "P"))
    warnings = []
    clusters = []
    redrawn = []
    for l in range(model.M):
        if scal[l, 0] < EMPTY_CLUSTER_FRACTION * n_series:
            clusters.append(random_cluster(rng, model.d, model.n))
            redrawn.append(l)
            warnings.append(
                f"cluster {l} empty (weight {scal[l, 0]:.3e}); redrawn")
            continue
        prev = model.clusters[l]
        out = _k._mstep_from_sums(scal[l], vec[l], mats[l], ymat[l], yy[l],
                                  PSD_FLOOR, _k.GAMMA_QUAD_ON_LAG, *flags,
                                  prev.mu, prev.A, prev.C, prev.Gamma,
                                  prev.Sigma, prev.P)
        mu, A, C, Gamma, Sigma, P, status = out
        if status == _k.SINGULAR_NORMAL_EQS:
            raise SingularNormalEquations(
                f"cluster {l}: normal equations not positive definite")
        if status == _k.NONFINITE_STATE:
            raise NonFiniteIterate(l)
        for arr in (mu, A, C, Gamma, Sigma, P):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteIterate(l)
        clusters.append(LgssmParams(mu=mu, A=A, C=C, Gamma=Gamma,
                                    Sigma=Sigma, P=P))
    if "pi" in fixed:
        pi = np.asarray(model.pi, dtype=np.float64).copy()
    else:
        pi = scal[:, 0] / n_series
    for l in redrawn:
        pi[l] = 1.0 / n_series
    pi = pi / pi.sum()
    return MixtureModel(clusters=tuple(clusters), pi=pi), tuple(warnings)


def mixture_mstep(dataset, model: MixtureModel, resp: Responsibilities,
                  options: FitOptions = FitOptions(), threads: int = 1):
    """One standalone M step under `model` with the given responsibilities.

    Inside fit_mixture the run's own seed stream handles empty-cluster
    redraws; here a fresh stream is built from options.seed.
    """
    dataset = list(dataset)
    flat = _flatten(dataset)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        sums = _accumulate_all(flat, _stack(model), resp.probs, pool, dataset)
    finally:
        if pool is not None:
            pool.shutdown()
    rng = np.random.default_rng(options.seed)
    new_model, _ = _solve_mstep(model, sums, flat.n_series, options, rng)
    return new_model


def assign_clusters(resp: Responsibilities) -> np.ndarray:
    """Row-wise argmax of the membership probabilities, ties to the lowest
    cluster index."""
    return resp.probs.argmax(axis=1)


def fit_mixture(dataset, model0: MixtureModel,
                options: FitOptions = FitOptions()) -> FitReport:
    """Run mixture EM from model0 until the parameter change drops below
    options.tol or options.max_iter iterations are reached.

    The trace records, per iteration, the observed-data log likelihood of
    the model the iteration started from, the parameter change produced by
    its M step, and any degeneracy warnings.  The report's loglik, abic,
    responsibilities and assignments come from a final E pass over the
    returned model.
    """
    dataset = list(dataset)
    flat = _flatten(dataset)
    if dataset[0].n_features != model0.n:
        raise LgssmixError(
            f"dataset has {dataset[0].n_features} features, model expects {model0.n}")
    rng = np.random.default_rng(options.seed)
    pool = (ThreadPoolExecutor(max_workers=options.threads)
            if options.threads > 1 else None)
    model = model0
    trace = []
    converged = False
    iterations = 0
    last_good = None  # (model, resp) with a finite E pass
    aborted = False
    try:
        for s in range(options.max_iter):
            try:
                logliks = _loglik_matrix(flat, _stack(model), pool, dataset)
            except NonFiniteState:
                if last_good is None:
                    raise
                model, resp = last_good
                aborted = True
                break
            resp = _resp_from_logliks(logliks, model.pi)
            last_good = (model, resp)
            try:
                sums = _accumulate_all(flat, _stack(model), resp.probs, pool,
                                       dataset)
                new_model, warnings = _solve_mstep(model, sums,
                                                   flat.n_series, options, rng)
            except (NonFiniteState, NonFiniteIterate):
                aborted = True
                break
            delta = param_delta(new_model, model)
            if not np.isfinite(delta):
                aborted = True
                break
            trace.append(TraceEntry(iteration=s + 1, loglik=resp.loglik,
                                    param_delta=delta, warnings=warnings))
            model = new_model
            iterations = s + 1
            if delta < options.tol:
                converged = True
                break
        if aborted:
            model, resp = last_good
        else:
            try:
                logliks = _loglik_matrix(flat, _stack(model), pool, dataset)
                resp = _resp_from_logliks(logliks, model.pi)
            except NonFiniteState:
                if last_good is None:
                    raise
                model, resp = last_good
                aborted = True
    finally:
        if pool is not None:
            pool.shutdown()
    loglik = resp.loglik
    report_abic = abic(loglik, model.M, model.d, model.n, flat.n_series)
    return FitReport(
        model=model,
        responsibilities=resp.probs,
        assignments=assign_clusters(resp),
        trace=tuple(trace),
        loglik=loglik,
        abic=report_abic,
        converged=converged and not aborted,
        iterations=iterations,
    )
