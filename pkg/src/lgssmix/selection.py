"""Model selection and external evaluation.

ABIC scores a fitted mixture by penalized likelihood: -2 log L plus
p * log((N+2)/24) where p counts free parameters (symmetric matrices count
their lower triangle, the mixing weights count M-1) and N is the number of
series.  Lower is better; note the penalty factor flips sign at N = 22.

Cluster similarity compares a predicted labeling with ground truth by the
best label permutation: build the confusion matrix C[true, pred], maximize
the trace over column permutations (exhaustively up to M = 8, by optimal
linear assignment above), and divide by N.

grid_select fits every (M, d) cell of a grid several times with seeds
derived from (base seed, M, d, repeat) and ranks cells by mean ABIC.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import permutations
from math import log

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import FitOptions, LgssmixError

EXHAUSTIVE_PERMUTATION_MAX = 8


class LabelOutOfRange(LgssmixError):
    def __init__(self, value, M):
        super().__init__(f"label {value} outside 0..{M - 1}")


def free_parameter_count(M: int, d: int, n: int) -> int:
    per_cluster = d + d * d + n * d + d * (d + 1) // 2 + d * (d + 1) // 2 \
        + n * (n + 1) // 2
    return M * per_cluster + (M - 1)


def abic(loglik: float, M: int, d: int, n: int, N: int) -> float:
    """-2 loglik + p log((N+2)/24) with loglik the observed-data mixture
    log likelihood."""
    p = free_parameter_count(M, d, n)
    return -2.0 * loglik + p * log((N + 2) / 24.0)


def confusion_matrix(true_labels, predicted, M: int) -> np.ndarray:
    true_labels = np.asarray(true_labels)
    predicted = np.asarray(predicted)
    if true_labels.shape != predicted.shape or true_labels.ndim != 1:
        raise LgssmixError("label vectors must be 1-D and equal length")
    out = np.zeros((M, M), dtype=np.int64)
    for t, p in zip(true_labels.tolist(), predicted.tolist()):
        for v in (t, p):
            if not 0 <= v < M:
                raise LabelOutOfRange(v, M)
        out[t, p] += 1
    return out


def cluster_similarity(true_labels, predicted, M: int):
    """Trace-maximizing label match.

    Returns (similarity, perm, permuted_confusion) where perm[t] is the
    predicted label paired with true label t and permuted_confusion is
    C[:, perm], so matched counts sit on the diagonal.  Ties between
    permutations go to the lexicographically smallest.
    """
    C = confusion_matrix(true_labels, predicted, M)
    N = len(np.asarray(true_labels))
    if M <= EXHAUSTIVE_PERMUTATION_MAX:
        best_trace = -1
        best_perm = None
        for perm in permutations(range(M)):
            tr = sum(C[t, perm[t]] for t in range(M))
            if tr > best_trace:
                best_trace = tr
                best_perm = perm
        perm = np.array(best_perm, dtype=np.int64)
    else:
        rows, cols = linear_sum_assignment(-C)
        perm = np.empty(M, dtype=np.int64)
        perm[rows] = cols
        best_trace = int(C[rows, cols].sum())
    similarity = int(best_trace) / N
    return similarity, perm, C[:, perm]


@dataclass(frozen=True)
class GridRow:
    """One fit of one grid cell.  Failed fits carry nan scores and the
    error message; similarity is None when no labels were supplied."""

    M: int
    d: int
    repeat: int
    seed: int
    abic: float
    loglik: float
    similarity: float | None
    converged: bool
    error: str = ""


@dataclass(frozen=True)
class GridResult:
    rows: tuple

    def cell_stats(self):
        """{(M, d): (mean abic, std abic, successful repeats)} in grid
        order; cells with no successful repeat get (nan, nan, 0)."""
        order = []
        buckets = {}
        for row in self.rows:
            key = (row.M, row.d)
            if key not in buckets:
                buckets[key] = []
                order.append(key)
            if np.isfinite(row.abic):
                buckets[key].append(row.abic)
        stats = {}
        for key in order:
            vals = buckets[key]
            if vals:
                stats[key] = (float(np.mean(vals)), float(np.std(vals)),
                              len(vals))
            else:
                stats[key] = (float("nan"), float("nan"), 0)
        return stats

    @property
    def best(self):
        """(M, d) of the lowest mean ABIC; ties go to the earliest cell in
        grid order; None when every cell failed."""
        best_key = None
        best_mean = np.inf
        for key, (mean, _, n_ok) in self.cell_stats().items():
            if n_ok > 0 and mean < best_mean:
                best_mean = mean
                best_key = key
        return best_key


def _cell_seed(base_seed: int, M: int, d: int, repeat: int) -> int:
    ss = np.random.SeedSequence((base_seed, M, d, repeat))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def grid_select(dataset, M_values, d_values, repeats: int = 1,
                options: FitOptions = FitOptions(), labels=None) -> GridResult:
    """Fit every (M, d, repeat) combination and rank cells by mean ABIC.

    Cells run in parallel across options.threads workers while each inner
    fit runs single-threaded; by the deterministic-reduction contract this
    changes nothing in the results.  When labels are given, each row also
    reports the permutation-optimal similarity (confusion size max(M,
    max label + 1)).  Rows where the fit raised are marked failed and the
    search continues.
    """
    from .em_mixture import fit_mixture
    from .initialization import build_initial_model

    dataset = list(dataset)
    M_values = list(M_values)
    d_values = list(d_values)
    if not M_values or not d_values or repeats < 1:
        raise LgssmixError("empty model-selection grid")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != len(dataset):
            raise LgssmixError("one label per series required")
    cells = [(M, d, r) for M in M_values for d in d_values
             for r in range(repeats)]

    def run_cell(cell):
        M, d, r = cell
        seed = _cell_seed(options.seed, M, d, r)
        opts = replace(options, seed=seed, threads=1)
        try:
            model0 = build_initial_model(dataset, M, d, opts)
            report = fit_mixture(dataset, model0, opts)
        except LgssmixError as err:
            return GridRow(M=M, d=d, repeat=r, seed=seed, abic=float("nan"),
                           loglik=float("nan"), similarity=None,
                           converged=False, error=str(err))
        similarity = None
        if labels is not None:
            M_sim = max(M, int(labels.max()) + 1)
            similarity, _, _ = cluster_similarity(labels,
                                                  report.assignments, M_sim)
        return GridRow(M=M, d=d, repeat=r, seed=seed, abic=report.abic,
                       loglik=report.loglik, similarity=similarity,
                       converged=report.converged)

    if options.threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            rows = tuple(pool.map(run_cell, cells))
    else:
        rows = tuple(run_cell(c) for c in cells)
    return GridResult(rows=rows)
