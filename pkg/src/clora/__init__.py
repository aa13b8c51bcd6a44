"""Contextual low-rank adapters with per-input variational uncertainty.

Desk-scale, framework-free: a small differentiable core with hand-derived
backward passes, adapter variants (deterministic, mean-field, diagonal /
full / contextual cores), an ELBO fine-tuning loop with flipout batching,
calibration metrics, and a reproducible experiment harness.
"""

from .adapters import (
    AdapterConfig,
    AdapterStack,
    ContextualModule,
    Variant,
    adapter_forward,
    context_forward,
    stochastic_param_count,
)
from .datasets import DatasetBundle, DatasetSpec, ShiftSpec, generate_dataset
from .evaluation import (
    CalibrationReport,
    PredictionSet,
    TemperatureFit,
    accuracy,
    ece,
    evaluate,
    fit_temperature,
    nll,
)
from .harness import (
    AdapterParams,
    EvalSpec,
    ExperimentSpec,
    ResultsRow,
    report,
    run_experiment,
    run_suite,
)
from .model import (
    AdaptedModel,
    Backbone,
    BackboneConfig,
    forward,
    predictive,
    pretrain_backbone,
)
from .numerics import (
    GradBuffer,
    NumericError,
    RealMatrix,
    SeededRng,
    ShapeError,
    check_gradients,
    elementwise,
    log_softmax_nll,
    matmul,
    sample_standard_normal,
)
from .training import (
    CheckpointState,
    TrainConfig,
    TrainData,
    checkpoint_criterion,
    elbo_terms,
    step_phi,
    step_theta,
    train,
)
from .variational import (
    DiagonalGaussian,
    FixedPrior,
    FlipoutNoise,
    flipout_perturb,
    kl_to_prior,
    reparam_sample,
)

__version__ = "0.1.0"
