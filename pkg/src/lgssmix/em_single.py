"""EM for a single state space model on one series.

The E-step is the filter/smoother pass.  The M-step is closed form in the
smoothed second moments Omega_k and Omega_{k,k-1}; with W = sum of step gaps
handled per term it reads

    mu    = x_smooth[0]
    A     = (sum_{k>=2} (Omega_{k,k-1} - Omega_{k-1}))
            (sum_{k>=2} dt_k Omega_{k-1})^{-1}
    C     = (sum_k dt_k y_k x_smooth[k]^T) (sum_k dt_k Omega_k)^{-1}
    P     = Omega_1 - x_smooth[0] x_smooth[0]^T
    Sigma = (1/T) sum_k dt_k (y_k y_k^T - C x_k y_k^T - y_k x_k^T C^T
                              + C Omega_k C^T)          with the new C
    Gamma = (1/(T-1)) sum_{k>=2} (1/dt_k)(Omega_k - Omega_{k,k-1} A_k^T
                              - A_k Omega_{k,k-1}^T + A_k Omega_{k-1} A_k^T)
            with A_k = I + dt_k A built from the new A.

Updates happen in exactly that order.  Covariance updates are symmetrized
and eigenvalue-floored.  The normal equations for A and C are solved through
a positive definite factorization with one diagonal jitter retry.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _kernels as _k
from .kalman import kalman_filter, raise_for_status, rts_smooth
from .model import (
    PSD_FLOOR,
    LgssmixError,
    LgssmParams,
    SmoothedStats,
    TimeSeriesSample,
    step_deltas,
)


class SingularNormalEquations(LgssmixError):
    def __init__(self):
        super().__init__("normal equations for A or C are singular")


class SingleFitResult(NamedTuple):
    params: LgssmParams
    loglik: float
    iterations: int
    converged: bool


def single_estep(series: TimeSeriesSample, theta: LgssmParams) -> SmoothedStats:
    """Filter and smooth one series under theta."""
    return rts_smooth(series, theta, kalman_filter(series, theta))


def accumulate_stats(series: TimeSeriesSample, stats: SmoothedStats,
                     weight: float = 1.0):
    """Weighted sufficient-statistic sums for the closed-form update."""
    y = series.observations
    d = stats.x_smooth.shape[1]
    n = y.shape[1]
    scal = np.zeros(3)
    vec = np.zeros(d)
    mats = np.zeros((9, d, d))
    ymat = np.zeros((n, d))
    yy = np.zeros((n, n))
    _k._accumulate(y, step_deltas(series.timestamps), stats.x_smooth,
                   stats.P_smooth, stats.J, weight, scal, vec, mats, ymat, yy)
    return scal, vec, mats, ymat, yy


def mstep_from_sums(scal, vec, mats, ymat, yy,
                    fixed=frozenset(), prev: LgssmParams | None = None) -> LgssmParams:
    """Closed-form update from accumulated sums; `fixed` names are copied
    from `prev` instead of being re-estimated."""
    if fixed and prev is None:
        raise ValueError("fixed parameters require the previous values")
    if prev is None:
        d = vec.shape[0]
        n = ymat.shape[0]
        z = np.zeros
        prev = LgssmParams(mu=z(d), A=z((d, d)), C=z((n, d)),
                           Gamma=np.eye(d), Sigma=np.eye(n), P=np.eye(d))
    mu, A, C, Gamma, Sigma, P, status = _k._mstep_from_sums(
        scal, vec, mats, ymat, yy, PSD_FLOOR, _k.GAMMA_QUAD_ON_LAG,
        "mu" in fixed, "A" in fixed, "C" in fixed,
        "Gamma" in fixed, "Sigma" in fixed, "P" in fixed,
        prev.mu, prev.A, prev.C, prev.Gamma, prev.Sigma, prev.P)
    if status != _k.OK:
        raise SingularNormalEquations()
    return LgssmParams(mu=mu, A=A, C=C, Gamma=Gamma, Sigma=Sigma, P=P)


def single_mstep(series: TimeSeriesSample, stats: SmoothedStats) -> LgssmParams:
    """One closed-form parameter update from smoothed statistics."""
    scal, vec, mats, ymat, yy = accumulate_stats(series, stats)
    return mstep_from_sums(scal, vec, mats, ymat, yy)


def fit_single(series: TimeSeriesSample, theta0: LgssmParams,
               tol: float = 0.1, max_iter: int = 1000) -> SingleFitResult:
    """Alternate E and M steps until the parameter delta drops below tol.

    The parameter delta is the sum of elementwise absolute differences
    across all six parameter blocks.  A failure on the very first pass
    raises; a later numerical blow-up returns the last iterate that
    completed a pass, flagged not converged.
    """
    y = series.observations
    if y.shape[1] != theta0.n:
        raise LgssmixError(
            f"series has {y.shape[1]} features but parameters expect {theta0.n}")
    out = _k._fit_single(y, step_deltas(series.timestamps), theta0.mu,
                         theta0.A, theta0.C, theta0.Gamma, theta0.Sigma,
                         theta0.P, tol, max_iter, PSD_FLOOR,
                         _k.GAMMA_QUAD_ON_LAG)
    mu, A, C, Gamma, Sigma, P, loglik, iterations, converged, status, bad_k = out
    if status == _k.SINGULAR_NORMAL_EQS:
        raise SingularNormalEquations()
    raise_for_status(status, bad_k)
    params = LgssmParams(mu=mu, A=A, C=C, Gamma=Gamma, Sigma=Sigma, P=P)
    return SingleFitResult(params, float(loglik), int(iterations), bool(converged))
