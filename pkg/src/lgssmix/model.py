"""Core value types for mixtures of linear Gaussian state space models.

A single state space model over an irregular time grid t_1 < ... < t_T is
parameterized by (mu, A, C, Gamma, Sigma, P).  With step sizes
dt_k = t_k - t_{k-1} (and dt_1 := 1 by convention) the discrete system is

    x_1 = mu + u,              u   ~ N(0, P)
    x_k = (I + dt_k A) x_{k-1} + w_k,   w_k ~ N(0, dt_k Gamma)
    y_k = C x_k + v_k,         v_k ~ N(0, Sigma / dt_k)

so that dense sampling carries low per-step process noise and high
per-observation noise, and sparse sampling the reverse.  A mixture holds M
such parameter sets plus mixing weights pi.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Eigenvalue floor applied to every stored covariance matrix.  Updates and
# deserialization clip below this, so factorizations downstream start from
# matrices that are at worst barely definite.
PSD_FLOOR = 1e-9

PARAM_FIELDS = ("mu", "A", "C", "Gamma", "Sigma", "P")
FIXABLE_FIELDS = PARAM_FIELDS + ("pi",)


class LgssmixError(Exception):
    """Base class for all errors raised by this package."""


class NonIncreasingTimestamps(LgssmixError):
    def __init__(self, series_id, k):
        self.series_id = series_id
        self.k = k
        super().__init__(
            f"series {series_id!r}: timestamps not strictly increasing at step {k}"
        )


class DimensionMismatch(LgssmixError):
    def __init__(self, series_id, detail=""):
        self.series_id = series_id
        super().__init__(f"series {series_id!r}: dimension mismatch {detail}".rstrip())


class NonFiniteValue(LgssmixError):
    def __init__(self, series_id, k, j):
        self.series_id = series_id
        self.k = k
        self.j = j
        super().__init__(
            f"series {series_id!r}: non-finite value at step {k}, coordinate {j}"
        )


class TooShort(LgssmixError):
    def __init__(self, series_id):
        self.series_id = series_id
        super().__init__(f"series {series_id!r}: needs at least 2 observations")


class ShapeMismatch(LgssmixError):
    pass


def symmetrize_floor(X: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Symmetrize X and clip eigenvalues below `floor` up to `floor`.

    A matrix whose spectrum already clears half the floor is returned as-is:
    reconstruction after clipping lands within rounding error of the floor,
    and accepting that band makes the operation idempotent, which keeps
    serialization round trips bit-identical.
    """
    Xs = 0.5 * (X + X.T)
    w, V = np.linalg.eigh(Xs)
    if w[0] >= 0.5 * floor:
        return Xs
    w = np.maximum(w, floor)
    Y = (V * w) @ V.T
    return 0.5 * (Y + Y.T)


def _as_array(x, shape, name) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    if a.shape != shape:
        raise ShapeMismatch(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeSeriesSample:
    """One observed series: strictly increasing timestamps and a T x n block."""

    id: str
    timestamps: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _freeze(np.atleast_1d(self.timestamps)))
        y = np.atleast_1d(self.observations)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "observations", _freeze(y))

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def n_features(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class LgssmParams:
    """Parameters of one state space model; immutable after construction."""

    mu: np.ndarray
    A: np.ndarray
    C: np.ndarray
    Gamma: np.ndarray
    Sigma: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        d = mu.shape[0]
        A = _as_array(self.A, (d, d), "A")
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if C.shape[1] != d:
            raise ShapeMismatch(f"C: expected {d} columns, got {C.shape[1]}")
        n = C.shape[0]
        Gamma = _as_array(self.Gamma, (d, d), "Gamma")
        Sigma = _as_array(self.Sigma, (n, n), "Sigma")
        P = _as_array(self.P, (d, d), "P")
        for name, val in (("mu", mu), ("A", A), ("C", C), ("Gamma", Gamma),
                          ("Sigma", Sigma), ("P", P)):
            if not np.all(np.isfinite(val)):
                raise ShapeMismatch(f"{name}: contains non-finite entries")
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "C", _freeze(C))
        object.__setattr__(self, "Gamma", _freeze(Gamma))
        object.__setattr__(self, "Sigma", _freeze(Sigma))
        object.__setattr__(self, "P", _freeze(P))

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def floored(self) -> "LgssmParams":
        """Copy with covariances symmetrized and eigenvalue-floored."""
        return LgssmParams(
            mu=self.mu,
            A=self.A,
            C=self.C,
            Gamma=symmetrize_floor(self.Gamma),
            Sigma=symmetrize_floor(self.Sigma),
            P=symmetrize_floor(self.P),
        )


@dataclass(frozen=True)
class MixtureModel:
    """M state space models plus mixing weights."""

    clusters: tuple
    pi: np.ndarray

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise ShapeMismatch("mixture needs at least one cluster")
        d, n = clusters[0].d, clusters[0].n
        for c in clusters:
            if c.d != d or c.n != n:
                raise ShapeMismatch("clusters disagree on (d, n)")
        pi = np.atleast_1d(np.asarray(self.pi, dtype=np.float64))
        if pi.shape != (len(clusters),):
            raise ShapeMismatch(f"pi: expected shape ({len(clusters)},), got {pi.shape}")
        if np.any(pi < 0) or not np.isfinite(pi).all():
            raise ShapeMismatch("pi: entries must be finite and non-negative")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise ShapeMismatch(f"pi: must sum to 1, got {pi.sum()!r}")
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "pi", _freeze(pi))

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def d(self) -> int:
        return self.clusters[0].d

    @property
    def n(self) -> int:
        return self.clusters[0].n


@dataclass(frozen=True)
class SmoothedStats:
    """Filter and smoother output for one series under one parameter set.

    Omega[k] = P_smooth[k] + outer(x_smooth[k], x_smooth[k]) and
    OmegaCross[k-1] = P_smooth[k] @ J[k-1].T + outer(x_smooth[k], x_smooth[k-1])
    are the second-moment blocks consumed by the M-step.
    """

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    x_smooth: np.ndarray
    P_smooth: np.ndarray
    J: np.ndarray
    Omega: np.ndarray
    OmegaCross: np.ndarray
    loglik: float


@dataclass(frozen=True)
class FitOptions:
    """Knobs shared by the fitting entry points."""

    tol: float = 0.1
    max_iter: int = 1000
    seed: int = 0
    threads: int = 1
    init: str = "identity"
    kmeans_restarts: int = 30
    fixed_params: frozenset = frozenset()

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.init not in ("identity", "random", "kmeans"):
            raise ValueError(f"unknown init {self.init!r}")
        bad = set(self.fixed_params) - set(FIXABLE_FIELDS)
        if bad:
            raise ValueError(f"unknown fixed parameter names: {sorted(bad)}")
        object.__setattr__(self, "fixed_params", frozenset(self.fixed_params))


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    loglik: float
    param_delta: float
    warnings: tuple = ()


@dataclass(frozen=True)
class FitReport:
    """Everything a mixture fit produces."""

    model: MixtureModel
    responsibilities: np.ndarray
    assignments: np.ndarray
    trace: tuple
    loglik: float
    abic: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class DatasetInfo:
    n_series: int
    n_features: int
    lengths: tuple


def validate_dataset(dataset: Sequence[TimeSeriesSample]) -> DatasetInfo:
    """Check a dataset and return (N, n, per-series lengths).

    Raises NonIncreasingTimestamps, DimensionMismatch, NonFiniteValue, or
    TooShort on the first violation found, scanning series in order.
    """
    dataset = list(dataset)
    if not dataset:
        raise ShapeMismatch("dataset is empty")
    n = dataset[0].n_features
    lengths = []
    for s in dataset:
        t, y = s.timestamps, s.observations
        if t.ndim != 1 or y.ndim != 2 or t.shape[0] != y.shape[0]:
            raise DimensionMismatch(s.id, f"timestamps {t.shape} vs observations {y.shape}")
        if y.shape[1] != n:
            raise DimensionMismatch(s.id, f"has {y.shape[1]} features, dataset has {n}")
        if y.shape[0] < 2:
            raise TooShort(s.id)
        if not np.all(np.isfinite(t)):
            k = int(np.flatnonzero(~np.isfinite(t))[0])
            raise NonFiniteValue(s.id, k, -1)
        bad = ~np.isfinite(y)
        if bad.any():
            k, j = np.argwhere(bad)[0]
            raise NonFiniteValue(s.id, int(k), int(j))
        diffs = np.diff(t)
        if np.any(diffs <= 0):
            k = int(np.flatnonzero(diffs <= 0)[0]) + 1
            raise NonIncreasingTimestamps(s.id, k)
        lengths.append(y.shape[0])
    return DatasetInfo(len(dataset), n, tuple(lengths))


def step_deltas(timestamps: np.ndarray) -> np.ndarray:
    """Per-step gaps dt_k = t_k - t_{k-1}, with dt_1 := 1."""
    t = np.asarray(timestamps, dtype=np.float64)
    out = np.empty(t.shape[0])
    out[0] = 1.0
    out[1:] = np.diff(t)
    return out


def param_delta(a: MixtureModel, b: MixtureModel) -> float:
    """Sum of elementwise absolute differences over all cluster parameters.

    Mixing weights are excluded on purpose: the convergence check tracks the
    state space parameters only.
    """
    if a.M != b.M or a.d != b.d or a.n != b.n:
        raise ShapeMismatch(
            f"models disagree on shape: ({a.M},{a.d},{a.n}) vs ({b.M},{b.d},{b.n})"
        )
    total = 0.0
    for ca, cb in zip(a.clusters, b.clusters):
        for name in PARAM_FIELDS:
            total += float(np.abs(getattr(ca, name) - getattr(cb, name)).sum())
    return total


def model_to_dict(model: MixtureModel) -> dict:
    return {
        "M": model.M,
        "d": model.d,
        "n": model.n,
        "pi": model.pi.tolist(),
        "clusters": [
            {
                "mu": c.mu.tolist(),
                "A": c.A.tolist(),
                "C": c.C.tolist(),
                "Gamma": c.Gamma.tolist(),
                "Sigma": c.Sigma.tolist(),
                "P": c.P.tolist(),
            }
            for c in model.clusters
        ],
    }


def model_from_dict(obj: dict) -> MixtureModel:
    M, d, n = int(obj["M"]), int(obj["d"]), int(obj["n"])
    raw = obj["clusters"]
    if len(raw) != M:
        raise ShapeMismatch(f"model file declares M={M} but has {len(raw)} clusters")
    clusters = []
    for c in raw:
        params = LgssmParams(
            mu=_as_array(c["mu"], (d,), "mu"),
            A=_as_array(c["A"], (d, d), "A"),
            C=_as_array(c["C"], (n, d), "C"),
            Gamma=_as_array(c["Gamma"], (d, d), "Gamma"),
            Sigma=_as_array(c["Sigma"], (n, n), "Sigma"),
            P=_as_array(c["P"], (d, d), "P"),
        )
        clusters.append(params.floored())
    return MixtureModel(clusters=tuple(clusters), pi=np.asarray(obj["pi"], dtype=np.float64))


def save_model(model: MixtureModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path) -> MixtureModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
