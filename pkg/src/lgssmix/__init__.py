"""Clustering of irregularly sampled multivariate time series with
mixtures of linear Gaussian state space models.

The discrete model for a series observed at timestamps t_1 < ... < t_T
with gaps dt_k advances a latent state x_k in R^d:

    x_1 = mu + u,            u   ~ N(0, P)
    x_k = (Id + dt_k A) x_{k-1} + w_k,   w_k ~ N(0, dt_k Gamma)
    y_k = C x_k + v_k,       v_k ~ N(0, Sigma / dt_k)

Each cluster carries one parameter set (mu, A, C, Gamma, Sigma, P); EM
alternates per-series posterior statistics (Kalman filter + RTS
smoother) with closed-form weighted parameter updates.
"""

from .em_mixture import (
    NonFiniteIterate,
    Responsibilities,
    assign_clusters,
    fit_mixture,
    mixture_mstep,
    responsibilities,
)
from .em_single import SingularNormalEquations, fit_single, single_estep, single_mstep
from .initialization import (
    FewerPointsThanClusters,
    SeriesInitFailed,
    build_initial_model,
    devectorize,
    init_identity,
    init_kmeans,
    init_random,
    param_vector_length,
    vectorize,
)
from .kalman import (
    NonFiniteState,
    SingularInnovation,
    SingularPrediction,
    kalman_filter,
    log_marginal,
    rts_smooth,
)
from .model import (
    PSD_FLOOR,
    DimensionMismatch,
    FitOptions,
    FitReport,
    LgssmParams,
    LgssmixError,
    MixtureModel,
    NonFiniteValue,
    NonIncreasingTimestamps,
    ShapeMismatch,
    TimeSeriesSample,
    TooShort,
    TraceEntry,
    load_model,
    param_delta,
    save_model,
    step_deltas,
    symmetrize_floor,
    validate_dataset,
)
from .selection import (
    GridResult,
    GridRow,
    LabelOutOfRange,
    abic,
    cluster_similarity,
    confusion_matrix,
    free_parameter_count,
    grid_select,
)
from .simulate import benchmark_truth, generate_benchmark, noiseless_trajectory, sample_series

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "FewerPointsThanClusters",
    "FitOptions",
    "FitReport",
    "GridResult",
    "GridRow",
    "LabelOutOfRange",
    "LgssmParams",
    "LgssmixError",
    "MixtureModel",
    "NonFiniteIterate",
    "NonFiniteState",
    "NonFiniteValue",
    "NonIncreasingTimestamps",
    "PSD_FLOOR",
    "Responsibilities",
    "SeriesInitFailed",
    "ShapeMismatch",
    "SingularInnovation",
    "SingularNormalEquations",
    "SingularPrediction",
    "TimeSeriesSample",
    "TooShort",
    "TraceEntry",
    "abic",
    "assign_clusters",
    "benchmark_truth",
    "build_initial_model",
    "cluster_similarity",
    "confusion_matrix",
    "devectorize",
    "fit_mixture",
    "fit_single",
    "free_parameter_count",
    "generate_benchmark",
    "grid_select",
    "init_identity",
    "init_kmeans",
    "init_random",
    "kalman_filter",
    "load_model",
    "log_marginal",
    "mixture_mstep",
    "noiseless_trajectory",
    "param_delta",
    "param_vector_length",
    "responsibilities",
    "rts_smooth",
    "sample_series",
    "save_model",
    "single_estep",
    "single_mstep",
    "step_deltas",
    "symmetrize_floor",
    "validate_dataset",
    "vectorize",
]
