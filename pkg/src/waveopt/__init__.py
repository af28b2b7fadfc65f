"""Wave-equation optimization toolkit: explicit FD propagation, adjoint
gradients (stored-forward reference and memory-efficient superposed field),
full waveform inversion and transient acoustic topology optimization."""

from .grids import (
    ACOUSTIC,
    RHO_SCALED,
    ConfigError,
    CourantReport,
    Grid,
    MaterialModel,
    SensorArray,
    SourceSpec,
    TimeConfig,
    build_grid,
    cfl_report,
)
from .solver import (
    ResourceBudgetError,
    SolverInstabilityError,
    SolverWindow,
    apply_ghost_material,
    burst_amplitude,
    propagate_step,
    propagate_step_convolutional,
    run_backward,
    run_forward,
)
from .gradients import (
    BufferCounter,
    CalibrationResult,
    GradientResult,
    KernelAccumulator,
    SuperpositionConfig,
    adjoint_source_fwi,
    adjoint_source_tato,
    calibrate_k,
    forward_cost,
    gradient_fd_oracle,
    gradient_reference,
    gradient_superposed,
    kernel_increment,
    ksweep,
    rel_mse,
)
from .optim import AdamState, NumericalDivergenceError, adam_step, clip_bounds
from .fwi import (
    FwiProblem,
    InversionResult,
    clip_indicator,
    cost_fwi,
    invert,
    synthesize_measurements,
)
from .tato import (
    DesignResult,
    TatoProblem,
    beta_schedule,
    chain_rule,
    cost_tato,
    density_filter,
    heaviside_project,
    interpolate_material,
    optimize_design,
    project_derivative,
)

__version__ = "0.1.0"
