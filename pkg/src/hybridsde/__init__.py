"""Variational inference for 1-d SDEs with closed-form linear control and neural residuals."""

from .dataio import Dataset, RawSeries, ingest_fred_csv, prepare_dataset, synth_ou
from .lingauss import (
    ConditionalMoments,
    LinearSDEParams,
    ObservationSet,
    PosteriorMarginal,
    fit_linear,
    marginal_loglik,
    optimal_control,
    ou_conditional_moments,
    posterior_marginals,
)
from .mafbm import (
    AugmentedSystem,
    MafbmConfig,
    MafbmWeights,
    augmented_conditional_moments,
    augmented_optimal_control,
    build_augmented,
    fit_omega,
)
from .sdesim import (
    ElboEstimate,
    PathBatch,
    SdeModel,
    SimConfig,
    build_model,
    control_eval,
    elbo,
    elbo_with_grads,
    simulate,
)
from .trainer import (
    LossRecord,
    TrainConfig,
    TrainResult,
    checkpoint_load,
    checkpoint_save,
    compare_variants,
    stage1_fit,
    train,
)

__all__ = [
    "AugmentedSystem",
    "ConditionalMoments",
    "Dataset",
    "ElboEstimate",
    "LinearSDEParams",
    "LossRecord",
    "MafbmConfig",
    "MafbmWeights",
    "ObservationSet",
    "PathBatch",
    "PosteriorMarginal",
    "RawSeries",
    "SdeModel",
    "SimConfig",
    "TrainConfig",
    "TrainResult",
    "augmented_conditional_moments",
    "augmented_optimal_control",
    "build_augmented",
    "build_model",
    "checkpoint_load",
    "checkpoint_save",
    "compare_variants",
    "control_eval",
    "elbo",
    "elbo_with_grads",
    "fit_linear",
    "fit_omega",
    "ingest_fred_csv",
    "marginal_loglik",
    "optimal_control",
    "ou_conditional_moments",
    "posterior_marginals",
    "prepare_dataset",
    "simulate",
    "stage1_fit",
    "synth_ou",
    "train",
]

__version__ = "0.1.0"
