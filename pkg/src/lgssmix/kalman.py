"""Kalman filtering and smoothing on an irregular time grid.

The filter consumes one series and one parameter set.  Each step first
discretizes the continuous parameters with the local gap dt_k (transition
I + dt_k A, process noise dt_k Gamma, observation noise Sigma / dt_k) and then
applies the standard predict/update recursion

    x_pred_k = A_k x_filt_{k-1}
    P_pred_k = A_k P_filt_{k-1} A_k^T + dt_k Gamma
    K_k      = P_pred_k C^T (C P_pred_k C^T + Sigma / dt_k)^{-1}
    x_filt_k = x_pred_k + K_k (y_k - C x_pred_k)
    P_filt_k = (I - K_k C) P_pred_k

initialized from x_pred_1 = mu, P_pred_1 = P.  The fixed-interval smoother
runs the backward recursion with gains
J_k = P_filt_k A_{k+1}^T P_pred_{k+1}^{-1}.

Innovation covariances are factorized rather than inverted; a factorization
that fails gets one diagonal jitter retry before the step is reported as
singular.  All covariance recursions re-symmetrize their outputs.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _kernels as _k
from .model import (
    PSD_FLOOR,
    LgssmixError,
    LgssmParams,
    SmoothedStats,
    TimeSeriesSample,
    step_deltas,
)


class SingularInnovation(LgssmixError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"innovation covariance not positive definite at step {k}")


class NonFiniteState(LgssmixError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"filter state became non-finite at step {k}")


class SingularPrediction(LgssmixError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"predicted covariance not positive definite at step {k}")


def raise_for_status(status: int, k: int) -> None:
    if status == _k.SINGULAR_INNOVATION:
        raise SingularInnovation(k)
    if status == _k.NONFINITE_STATE:
        raise NonFiniteState(k)
    if status == _k.SINGULAR_PREDICTION:
        raise SingularPrediction(k)


class KalmanPass(NamedTuple):
    """Per-step byproducts of the forward pass."""

    gain: np.ndarray        # T x d x n
    innovation: np.ndarray  # T x n
    innovation_cov: np.ndarray  # T x n x n
    logdens: np.ndarray     # T, per-step log density contributions


class FilterResult(NamedTuple):
    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    loglik: float
    kpass: KalmanPass


def _check_shapes(y: np.ndarray, theta: LgssmParams) -> None:
    if y.shape[1] != theta.n:
        raise LgssmixError(
            f"series has {y.shape[1]} features but parameters expect {theta.n}")


def _filter_arrays(y: np.ndarray, deltas: np.ndarray, theta: LgssmParams) -> FilterResult:
    out = _k._filter(y, deltas, theta.mu, theta.A, theta.C, theta.Gamma,
                     theta.Sigma, theta.P, PSD_FLOOR)
    x_pred, P_pred, x_filt, P_filt, gain, innov, innov_cov, logdens, loglik, status, bad_k = out
    raise_for_status(status, bad_k)
    return FilterResult(x_pred, P_pred, x_filt, P_filt, float(loglik),
                        KalmanPass(gain, innov, innov_cov, logdens))


def kalman_filter(series: TimeSeriesSample, theta: LgssmParams) -> FilterResult:
    """Forward pass over one series.  Raises SingularInnovation or
    NonFiniteState with the failing step index."""
    y = series.observations
    _check_shapes(y, theta)
    return _filter_arrays(y, step_deltas(series.timestamps), theta)


def _smooth_arrays(y: np.ndarray, deltas: np.ndarray, theta: LgssmParams,
                   filt: FilterResult) -> SmoothedStats:
    x_s, P_s, J, status, bad_k = _k._smooth(
        deltas, theta.A, filt.x_pred, filt.P_pred, filt.x_filt, filt.P_filt,
        PSD_FLOOR)
    raise_for_status(status, bad_k)
    omega = P_s + np.einsum("ki,kj->kij", x_s, x_s)
    omega_cross = (np.einsum("kij,kmj->kim", P_s[1:], J)
                   + np.einsum("ki,kj->kij", x_s[1:], x_s[:-1]))
    return SmoothedStats(
        x_pred=filt.x_pred, P_pred=filt.P_pred,
        x_filt=filt.x_filt, P_filt=filt.P_filt,
        x_smooth=x_s, P_smooth=P_s, J=J,
        Omega=omega, OmegaCross=omega_cross, loglik=filt.loglik)


def rts_smooth(series: TimeSeriesSample, theta: LgssmParams,
               filt: FilterResult | None = None) -> SmoothedStats:
    """Fixed-interval smoother; runs the forward pass first if not given."""
    y = series.observations
    _check_shapes(y, theta)
    deltas = step_deltas(series.timestamps)
    if filt is None:
        filt = _filter_arrays(y, deltas, theta)
    return _smooth_arrays(y, deltas, theta, filt)


def log_marginal(series: TimeSeriesSample, theta: LgssmParams) -> float:
    """log p(Y | theta) accumulated over the innovation densities."""
    y = series.observations
    _check_shapes(y, theta)
    ll, status, bad_k = _k._loglik(y, step_deltas(series.timestamps), theta.mu,
                                   theta.A, theta.C, theta.Gamma, theta.Sigma,
                                   theta.P, PSD_FLOOR)
    raise_for_status(status, bad_k)
    return float(ll)
