"""Compiled numerical kernels.

Everything here operates on plain float64 ndarrays and reports failures
through integer status codes instead of exceptions, so the wrappers in the
public modules can raise typed errors with context.  All kernels are
deterministic: no randomness, no reductions whose order depends on thread
count.  They release the GIL so chunk-level thread pools scale.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Status codes shared with the wrapper modules.
OK = 0
SINGULAR_INNOVATION = 1
NONFINITE_STATE = 2
SINGULAR_PREDICTION = 3
SINGULAR_NORMAL_EQS = 4

# The transition-noise update has two algebraically inequivalent forms whose
# quadratic term uses either the lagged second moment Omega_{k-1} (True) or
# the cross moment Omega_{k,k-1} (False).  Only the lagged form collapses to
# the single-model update when N = M = 1, so it is the default; the other is
# kept selectable for audits.
GAMMA_QUAD_ON_LAG = True

# Series per work chunk.  Fixed so that accumulation order, and therefore
# every bit of the result, is independent of how many threads execute chunks.
CHUNK = 8

_LOG_2PI = np.log(2.0 * np.pi)


@njit(cache=True, nogil=True)
def _chol(a):
    """Lower Cholesky factor of a; flag is False when a is not positive
    definite (or not finite) instead of raising."""
    m = a.shape[0]
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not np.isfinite(s) or s <= 0.0:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True, nogil=True)
def _chol_solve(L, B):
    """Solve (L L^T) X = B for X, given the lower factor L.  B is (m, p)."""
    m, p = B.shape
    X = B.copy()
    for c in range(p):
        for i in range(m):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(m - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, m):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True, nogil=True)
def _chol_with_jitter(a, floor):
    """Factor a, retrying once with `floor` added to the diagonal."""
    L, ok = _chol(a)
    if ok:
        return L, True
    aj = a.copy()
    for i in range(a.shape[0]):
        aj[i, i] += floor
    return _chol(aj)


@njit(cache=True, nogil=True)
def _sym_floor(X, floor):
    """Symmetrize and clip eigenvalues below `floor`; inputs clearing half
    the floor pass through untouched so the operation is idempotent.
    Non-finite input passes through so the caller classifies it instead of
    crashing the eigensolver."""
    Xs = 0.5 * (X + X.T)
    if not np.all(np.isfinite(Xs)):
        return Xs
    w, V = np.linalg.eigh(Xs)
    if w[0] >= 0.5 * floor:
        return Xs
    wc = np.maximum(w, floor)
    Y = (V * wc) @ V.T
    return 0.5 * (Y + Y.T)


@njit(cache=True, nogil=True)
def _filter(y, deltas, mu, A, C, Gamma, Sigma, P, floor):
    """Forward pass.  Returns predicted/filtered moments, gain, innovation
    mean/covariance, per-step log density, total log likelihood, status and
    the step index at failure (-1 when OK)."""
    T, n = y.shape
    d = mu.shape[0]
    x_pred = np.zeros((T, d))
    P_pred = np.zeros((T, d, d))
    x_filt = np.zeros((T, d))
    P_filt = np.zeros((T, d, d))
    gain = np.zeros((T, d, n))
    innov = np.zeros((T, n))
    innov_cov = np.zeros((T, n, n))
    logdens = np.zeros(T)
    eye_d = np.eye(d)
    loglik = 0.0
    status = OK
    bad_k = -1
    for k in range(T):
        dt = deltas[k]
        if k == 0:
            xp = mu.copy()
            Pp = P.copy()
        else:
            Ak = eye_d + dt * A
            xp = Ak @ x_filt[k - 1]
            Pp = Ak @ P_filt[k - 1] @ Ak.T + dt * Gamma
            Pp = 0.5 * (Pp + Pp.T)
        x_pred[k] = xp
        P_pred[k] = Pp
        S = C @ Pp @ C.T + Sigma / dt
        S = 0.5 * (S + S.T)
        L, ok = _chol_with_jitter(S, floor)
        if not ok:
            status = SINGULAR_INNOVATION
            bad_k = k
            break
        innov_cov[k] = S
        nu = y[k] - C @ xp
        innov[k] = nu
        # K = Pp C^T S^{-1}, computed as the transpose of S^{-1} (C Pp).
        K = np.ascontiguousarray(_chol_solve(L, C @ Pp).T)
        gain[k] = K
        xf = xp + K @ nu
        Pf = Pp - K @ (C @ Pp)
        Pf = 0.5 * (Pf + Pf.T)
        x_filt[k] = xf
        P_filt[k] = Pf
        alpha = _chol_solve(L, nu.reshape(n, 1))
        quad = 0.0
        for j in range(n):
            quad += nu[j] * alpha[j, 0]
        ld = 0.0
        for j in range(n):
            ld += np.log(L[j, j])
        lk = -0.5 * (n * _LOG_2PI + 2.0 * ld + quad)
        logdens[k] = lk
        loglik += lk
        if not np.isfinite(loglik) or not np.isfinite(xf).all():
            status = NONFINITE_STATE
            bad_k = k
            break
    return x_pred, P_pred, x_filt, P_filt, gain, innov, innov_cov, logdens, loglik, status, bad_k


@njit(cache=True, nogil=True)
def _loglik(y, deltas, mu, A, C, Gamma, Sigma, P, floor):
    """Marginal log likelihood only; no per-step storage."""
    T, n = y.shape
    d = mu.shape[0]
    eye_d = np.eye(d)
    xf = mu.copy()
    Pf = P.copy()
    loglik = 0.0
    for k in range(T):
        dt = deltas[k]
        if k == 0:
            xp = xf
            Pp = Pf
        else:
            Ak = eye_d + dt * A
            xp = Ak @ xf
            Pp = Ak @ Pf @ Ak.T + dt * Gamma
            Pp = 0.5 * (Pp + Pp.T)
        S = C @ Pp @ C.T + Sigma / dt
        S = 0.5 * (S + S.T)
        L, ok = _chol_with_jitter(S, floor)
        if not ok:
            return 0.0, SINGULAR_INNOVATION, k
        nu = y[k] - C @ xp
        K = np.ascontiguousarray(_chol_solve(L, C @ Pp).T)
        xf = xp + K @ nu
        Pf = Pp - K @ (C @ Pp)
        Pf = 0.5 * (Pf + Pf.T)
        alpha = _chol_solve(L, nu.reshape(n, 1))
        quad = 0.0
        for j in range(n):
            quad += nu[j] * alpha[j, 0]
        ld = 0.0
        for j in range(n):
            ld += np.log(L[j, j])
        loglik += -0.5 * (n * _LOG_2PI + 2.0 * ld + quad)
        if not np.isfinite(loglik) or not np.isfinite(xf).all():
            return 0.0, NONFINITE_STATE, k
    return loglik, OK, -1


@njit(cache=True, nogil=True)
def _smooth(deltas, A, x_pred, P_pred, x_filt, P_filt, floor):
    """Backward pass.  Returns smoothed moments and the gains J_k."""
    T, d = x_filt.shape
    x_s = np.zeros((T, d))
    P_s = np.zeros((T, d, d))
    J = np.zeros((T - 1, d, d))
    eye_d = np.eye(d)
    x_s[T - 1] = x_filt[T - 1]
    P_s[T - 1] = P_filt[T - 1]
    status = OK
    bad_k = -1
    for k in range(T - 2, -1, -1):
        dtn = deltas[k + 1]
        An = eye_d + dtn * A
        L, ok = _chol_with_jitter(P_pred[k + 1], floor)
        if not ok:
            status = SINGULAR_PREDICTION
            bad_k = k + 1
            break
        # J_k = P_filt[k] An^T P_pred[k+1]^{-1}, via the transposed solve.
        Jk = np.ascontiguousarray(_chol_solve(L, An @ P_filt[k]).T)
        J[k] = Jk
        x_s[k] = x_filt[k] + Jk @ (x_s[k + 1] - x_pred[k + 1])
        Ps = P_filt[k] + Jk @ (P_s[k + 1] - P_pred[k + 1]) @ Jk.T
        P_s[k] = 0.5 * (Ps + Ps.T)
    return x_s, P_s, J, status, bad_k


@njit(cache=True, nogil=True)
def _accumulate(y, deltas, x_s, P_s, J, w, scal, vec, mats, ymat, yy):
    """Fold one weighted series into the sufficient-statistic sums.

    scal: [sum w, sum w*T, sum w*(T-1)]
    vec:  sum w * x_s[0]
    mats: 0 omega1          = w * Omega_1
          1 cross           = w * sum_{k>=2} Omega_{k,k-1}
          2 lag             = w * sum_{k>=2} Omega_{k-1}
          3 dt_lag          = w * sum_{k>=2} dt_k Omega_{k-1}
          4 dt_cross        = w * sum_{k>=2} dt_k Omega_{k,k-1}
          5 inv_dt_omega    = w * sum_{k>=2} Omega_k / dt_k
          6 inv_dt_cross    = w * sum_{k>=2} Omega_{k,k-1} / dt_k
          7 inv_dt_lag      = w * sum_{k>=2} Omega_{k-1} / dt_k
          8 dt_omega        = w * sum_{k>=1} dt_k Omega_k
    ymat: w * sum_k dt_k y_k x_s[k]^T
    yy:   w * sum_k dt_k y_k y_k^T
    """
    T, n = y.shape
    scal[0] += w
    scal[1] += w * T
    scal[2] += w * (T - 1)
    vec += w * x_s[0]
    om_prev = P_s[0] + np.outer(x_s[0], x_s[0])
    mats[0] += w * om_prev
    dt = deltas[0]
    mats[8] += (w * dt) * om_prev
    ymat += (w * dt) * np.outer(y[0], x_s[0])
    yy += (w * dt) * np.outer(y[0], y[0])
    for k in range(1, T):
        dt = deltas[k]
        om = P_s[k] + np.outer(x_s[k], x_s[k])
        omc = P_s[k] @ J[k - 1].T + np.outer(x_s[k], x_s[k - 1])
        mats[1] += w * omc
        mats[2] += w * om_prev
        mats[3] += (w * dt) * om_prev
        mats[4] += (w * dt) * omc
        mats[5] += (w / dt) * om
        mats[6] += (w / dt) * omc
        mats[7] += (w / dt) * om_prev
        mats[8] += (w * dt) * om
        ymat += (w * dt) * np.outer(y[k], x_s[k])
        yy += (w * dt) * np.outer(y[k], y[k])
        om_prev = om


@njit(cache=True, nogil=True)
def _mstep_from_sums(scal, vec, mats, ymat, yy, floor, gamma_on_lag,
                     fix_mu, fix_A, fix_C, fix_Gamma, fix_Sigma, fix_P,
                     mu_prev, A_prev, C_prev, Gamma_prev, Sigma_prev, P_prev):
    """One closed-form update from accumulated sums.

    Blocks are computed in the fixed order mu, A, C, P, Sigma, Gamma; Sigma
    uses the final C and Gamma the final A, whether updated or held fixed.
    Non-finite sums (accumulator overflow) are reported as NONFINITE_STATE
    rather than misclassified as singular systems.
    """
    d = vec.shape[0]
    n = ymat.shape[0]
    W = scal[0]

    finite = np.all(np.isfinite(scal)) and np.all(np.isfinite(vec)) \
        and np.all(np.isfinite(mats)) and np.all(np.isfinite(ymat)) \
        and np.all(np.isfinite(yy))
    if not finite:
        return (mu_prev.copy(), A_prev.copy(), C_prev.copy(),
                Gamma_prev.copy(), Sigma_prev.copy(), P_prev.copy(),
                NONFINITE_STATE)

    if fix_mu:
        mu = mu_prev.copy()
    else:
        mu = vec / W

    if fix_A:
        A = A_prev.copy()
    else:
        G = 0.5 * (mats[3] + mats[3].T)
        L, ok = _chol_with_jitter(G, floor)
        if not ok:
            return mu, A_prev, C_prev, Gamma_prev, Sigma_prev, P_prev, SINGULAR_NORMAL_EQS
        A = np.ascontiguousarray(_chol_solve(L, np.ascontiguousarray((mats[1] - mats[2]).T)).T)

    if fix_C:
        C = C_prev.copy()
    else:
        G = 0.5 * (mats[8] + mats[8].T)
        L, ok = _chol_with_jitter(G, floor)
        if not ok:
            return mu, A, C_prev, Gamma_prev, Sigma_prev, P_prev, SINGULAR_NORMAL_EQS
        C = np.ascontiguousarray(_chol_solve(L, np.ascontiguousarray(ymat.T)).T)

    if fix_P:
        P = P_prev.copy()
    else:
        P = (mats[0] - np.outer(vec, mu) - np.outer(mu, vec) + W * np.outer(mu, mu)) / W
        P = _sym_floor(P, floor)

    if fix_Sigma:
        Sigma = Sigma_prev.copy()
    else:
        Sigma = (yy - (ymat @ C.T).T - ymat @ C.T + C @ mats[8] @ C.T) / scal[1]
        Sigma = _sym_floor(Sigma, floor)

    if fix_Gamma:
        Gamma = Gamma_prev.copy()
    else:
        if gamma_on_lag:
            G0 = mats[5] - mats[6] - mats[6].T + mats[7]
            G1 = mats[2] - mats[1]
            Gamma = (G0 + G1 @ A.T + A @ G1.T + A @ mats[3] @ A.T) / scal[2]
        else:
            Gamma = (mats[5] - mats[6].T + A @ (mats[1] - mats[1].T)
                     + A @ mats[4] @ A.T) / scal[2]
        Gamma = _sym_floor(Gamma, floor)

    return mu, A, C, Gamma, Sigma, P, OK


@njit(cache=True, nogil=True)
def _param_delta_one(mu1, A1, C1, G1, S1, P1, mu2, A2, C2, G2, S2, P2):
    return (np.abs(mu1 - mu2).sum() + np.abs(A1 - A2).sum()
            + np.abs(C1 - C2).sum() + np.abs(G1 - G2).sum()
            + np.abs(S1 - S2).sum() + np.abs(P1 - P2).sum())


@njit(cache=True, nogil=True)
def _fit_single(y, deltas, mu0, A0, C0, Gamma0, Sigma0, P0,
                tol, max_iter, floor, gamma_on_lag):
    """Full EM loop for one series.

    Returns (mu, A, C, Gamma, Sigma, P, loglik, iterations, converged,
    status, bad_k).  A first-iteration failure propagates through status; a
    later blow-up returns the last iterate that completed a pass, flagged
    not converged.
    """
    d = mu0.shape[0]
    n = y.shape[1]
    mu, A, C = mu0.copy(), A0.copy(), C0.copy()
    Gamma, Sigma, P = Gamma0.copy(), Sigma0.copy(), P0.copy()
    mu_b, A_b, C_b = mu.copy(), A.copy(), C.copy()
    Gamma_b, Sigma_b, P_b = Gamma.copy(), Sigma.copy(), P.copy()
    last_loglik = -np.inf
    converged = 0
    iterations = 0
    for s in range(max_iter):
        xp, Pp, xf, Pf, _, _, _, _, ll, status, bad_k = _filter(
            y, deltas, mu, A, C, Gamma, Sigma, P, floor)
        if status != OK:
            if s == 0 or status != NONFINITE_STATE:
                return mu, A, C, Gamma, Sigma, P, last_loglik, iterations, 0, status, bad_k
            return mu_b, A_b, C_b, Gamma_b, Sigma_b, P_b, last_loglik, iterations, 0, OK, -1
        x_s, P_s, J, status, bad_k = _smooth(deltas, A, xp, Pp, xf, Pf, floor)
        if status != OK:
            return mu, A, C, Gamma, Sigma, P, last_loglik, iterations, 0, status, bad_k
        # A completed expectation pass: remember this iterate as the fallback.
        mu_b, A_b, C_b = mu.copy(), A.copy(), C.copy()
        Gamma_b, Sigma_b, P_b = Gamma.copy(), Sigma.copy(), P.copy()
        last_loglik = ll
        scal = np.zeros(3)
        vec = np.zeros(d)
        mats = np.zeros((9, d, d))
        ymat = np.zeros((n, d))
        yy = np.zeros((n, n))
        _accumulate(y, deltas, x_s, P_s, J, 1.0, scal, vec, mats, ymat, yy)
        mu_n, A_n, C_n, Gamma_n, Sigma_n, P_n, status = _mstep_from_sums(
            scal, vec, mats, ymat, yy, floor, gamma_on_lag,
            False, False, False, False, False, False,
            mu, A, C, Gamma, Sigma, P)
        if status != OK:
            if s == 0 or status != NONFINITE_STATE:
                return mu, A, C, Gamma, Sigma, P, last_loglik, iterations, 0, status, -1
            return mu_b, A_b, C_b, Gamma_b, Sigma_b, P_b, last_loglik, iterations, 0, OK, -1
        finite = (np.isfinite(mu_n).all() and np.isfinite(A_n).all()
                  and np.isfinite(C_n).all() and np.isfinite(Gamma_n).all()
                  and np.isfinite(Sigma_n).all() and np.isfinite(P_n).all())
        if not finite:
            return mu_b, A_b, C_b, Gamma_b, Sigma_b, P_b, last_loglik, iterations, 0, OK, -1
        delta = _param_delta_one(mu_n, A_n, C_n, Gamma_n, Sigma_n, P_n,
                                 mu, A, C, Gamma, Sigma, P)
        mu, A, C, Gamma, Sigma, P = mu_n, A_n, C_n, Gamma_n, Sigma_n, P_n
        iterations = s + 1
        if delta < tol:
            converged = 1
            break
    ll, status, bad_k = _loglik(y, deltas, mu, A, C, Gamma, Sigma, P, floor)
    if status != OK:
        return (mu_b, A_b, C_b, Gamma_b, Sigma_b, P_b, last_loglik, iterations,
                0, OK, -1)
    return mu, A, C, Gamma, Sigma, P, ll, iterations, converged, OK, -1


@njit(cache=True, nogil=True)
def _best_single_fit(y, deltas, orths, tol, max_iter, floor, gamma_on_lag,
                     init_prior_scale, init_noise_scale):
    """Fit one series from every restart's starting point, keep the best.

    orths holds one starting transition matrix per restart.  Restarts whose
    fit fails are skipped; ties in log likelihood keep the earliest restart.
    Returns the winning parameters, its log likelihood, the number of
    restarts that succeeded, and per-restart status codes.
    """
    R = orths.shape[0]
    d = orths.shape[1]
    n = y.shape[1]
    mu0 = np.zeros(d)
    C0 = np.ones((n, d))
    P0 = np.eye(d) * init_prior_scale
    Gamma0 = np.eye(d) * init_noise_scale
    Sigma0 = np.eye(n) * init_noise_scale
    best_ll = -np.inf
    n_ok = 0
    statuses = np.zeros(R, dtype=np.int64)
    bmu = np.zeros(d)
    bA = np.zeros((d, d))
    bC = np.zeros((n, d))
    bG = np.zeros((d, d))
    bS = np.zeros((n, n))
    bP = np.zeros((d, d))
    for r in range(R):
        mu, A, C, Gamma, Sigma, P, ll, _, _, status, _ = _fit_single(
            y, deltas, mu0, orths[r], C0, Gamma0, Sigma0, P0,
            tol, max_iter, floor, gamma_on_lag)
        statuses[r] = status
        if status != OK or not np.isfinite(ll):
            continue
        n_ok += 1
        if ll > best_ll:
            best_ll = ll
            bmu, bA, bC, bG, bS, bP = mu, A, C, Gamma, Sigma, P
    return bmu, bA, bC, bG, bS, bP, best_ll, n_ok, statuses


@njit(cache=True, nogil=True)
def _loglik_chunk(y_flat, deltas_flat, offsets, i0, i1,
                  mus, As, Cs, Gammas, Sigmas, Ps, floor):
    """Log marginal likelihood of each series in [i0, i1) under each cluster."""
    M = mus.shape[0]
    out = np.zeros((i1 - i0, M))
    status = OK
    bad_i = -1
    bad_l = -1
    bad_k = -1
    for i in range(i0, i1):
        y = y_flat[offsets[i]:offsets[i + 1]]
        dts = deltas_flat[offsets[i]:offsets[i + 1]]
        for l in range(M):
            ll, st, k = _loglik(y, dts, mus[l], As[l], Cs[l], Gammas[l],
                                Sigmas[l], Ps[l], floor)
            if st != OK:
                return out, st, i, l, k
            out[i - i0, l] = ll
    return out, status, bad_i, bad_l, bad_k


@njit(cache=True, nogil=True)
def _estep_chunk(y_flat, deltas_flat, offsets, i0, i1,
                 mus, As, Cs, Gammas, Sigmas, Ps, resp, floor):
    """Accumulate weighted sufficient statistics for series in [i0, i1).

    Series with exactly zero responsibility for a cluster contribute exact
    zeros, so they are skipped without changing the result.
    """
    M = mus.shape[0]
    d = mus.shape[1]
    n = Cs.shape[1]
    scal = np.zeros((M, 3))
    vec = np.zeros((M, d))
    mats = np.zeros((M, 9, d, d))
    ymat = np.zeros((M, n, d))
    yy = np.zeros((M, n, n))
    for i in range(i0, i1):
        y = y_flat[offsets[i]:offsets[i + 1]]
        dts = deltas_flat[offsets[i]:offsets[i + 1]]
        for l in range(M):
            w = resp[i, l]
            if w == 0.0:
                continue
            xp, Pp, xf, Pf, _, _, _, _, _, st, k = _filter(
                y, dts, mus[l], As[l], Cs[l], Gammas[l], Sigmas[l], Ps[l], floor)
            if st != OK:
                return scal, vec, mats, ymat, yy, st, i, l, k
            x_s, P_s, J, st, k = _smooth(dts, As[l], xp, Pp, xf, Pf, floor)
            if st != OK:
                return scal, vec, mats, ymat, yy, st, i, l, k
            _accumulate(y, dts, x_s, P_s, J, w, scal[l], vec[l], mats[l],
                        ymat[l], yy[l])
    return scal, vec, mats, ymat, yy, OK, -1, -1, -1
