"""Robust low-rank Tucker decomposition with pseudo-Huber and quantile losses."""

from .initialization import (
    InitConfig,
    auto_delta,
    completion_init,
    estimate_noise_scale,
    estimate_tau_auto,
    estimate_tau_robust,
    spectral_init,
    truncate_entries,
)
from .losses import LossKind, LossSpec, drho, loss_value, rho, vanilla_gradient
from .riemannian import (
    DegeneratePointError,
    StepSchedule,
    TangentVector,
    dense_tangent,
    retract_dense,
    retract_efficient,
    step_at,
    tangent_norm,
    tangent_project,
)
from .solvers import (
    DivergenceError,
    IterateTrace,
    ObservationSet,
    SolverConfig,
    complete_sample_split,
    completion_config,
    estimate_signal_diagnostics,
    rsgrad,
    rsgrad_quantile_trim,
    trim,
    trun,
)
from .tensor_core import (
    ShapeError,
    TuckerFactors,
    dof,
    hosvd,
    incoherence,
    kron_others,
    matricize,
    mode_product,
    norms,
    tensorize,
    tucker_reconstruct,
)

__version__ = "0.1.0"
