"""Robust single-neuron regression via SGD on a convex surrogate."""

from .activations import (
    Activation,
    ActivationError,
    antiderivative,
    certify_unbounded,
    derivative,
    evaluate,
    make_activation,
    truncate_positive,
)
from .datasets import (
    Batch,
    NoiseModel,
    PlantedInstance,
    generate,
    make_noise,
    plant_instance,
    truncate_labels,
    truncate_nonmonotone,
)
from .diagnostics import (
    LandscapeReport,
    SharpnessReport,
    TailReport,
    check_landscape,
    check_tail_facts,
    fit_convergence,
    probe_noise_free_sharpness,
    probe_noisy_sharpness,
)
from .distributions import (
    ConfigError,
    DistributionSpec,
    DomainError,
    Estimate,
    MarginCertificate,
    estimate_margin,
    h2,
    h2_inverse,
    h4,
    h4_inverse,
    make_distribution,
    rng_for,
    sample,
    tail_h,
)
from .learner import (
    LearnerConfig,
    NumericAbort,
    TrainTrace,
    baseline_l2_gd,
    derive_params,
    stop_check,
    train,
)
from .surrogate import (
    finite_difference_grad,
    l2_grad,
    l2_loss,
    noise_free_grad,
    surrogate_grad,
    surrogate_loss,
)

__version__ = "0.1.0"
