"""nmsse: trajectory-ensemble simulation and verification of non-Markovian
Gaussian diffusive unravelings of open quantum systems."""

__version__ = "0.1.0"

from .kernels import (
    BathSpectrum,
    CorrelationKernel,
    KernelGrid,
    OUParams,
    PositivityError,
    QuadratureMap,
    WhiteNoiseSpec,
    bath_kernel,
    build_block_covariance,
    check_positivity,
    exponential_kernel,
    grid_kernel,
    hermitian_equality_residual,
    kernel_from_modes,
    kernel_transform,
    quadrature_kernel,
    scale_kernel,
    white_kernel,
    with_envelope,
)
from .noise import (
    EmpiricalCorrelations,
    NoiseRealization,
    RngStreamSpec,
    estimate_correlations,
    sample_gaussian,
    sample_ou,
    transform_noises,
)
from .novikov import NovikovReport, TestFunctional, novikov_check, novikov_rhs
from .reference import (
    CompareReport,
    DephasingFactor,
    MasterSolution,
    compare,
    dephasing_exact,
    dephasing_factor,
    lindblad_solve,
    tcl2_master,
)
from .scenarios import PRESET_NAMES, CheckResult, Scenario, preset, run_checks
from .unraveling import (
    Closure,
    EnsembleAccumulator,
    SystemModel,
    TrajectoryState,
    drift_generator,
    invariance_check,
    run_ensemble,
    run_trajectory,
    transform_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
