"""Named experiment presets binding models, kernels, closures and checks.

Each preset is a fully specified, immutable run description whose kernel
passes its own positivity gate and whose expected checks encode the
structural claims it exercises (trace preservation in mean, closure
exactness, Markov limit, coherent/quadrature equivalence, eta sweeps).
"""

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .kernels import (
    BathSpectrum,
    CorrelationKernel,
    OUParams,
    QuadratureMap,
    WhiteNoiseSpec,
    bath_kernel,
    build_block_covariance,
    check_positivity,
    exponential_kernel,
    quadrature_kernel,
    scale_kernel,
    white_kernel,
)
from .operators import SIGMA_MINUS, SIGMA_X, SIGMA_Y, SIGMA_Z
from .reference import dephasing_exact, lindblad_solve, tcl2_master
from .unraveling import Closure, EnsembleAccumulator, SystemModel

PRESET_NAMES = (
    "hermitian_single_channel",
    "dephasing_qubit",
    "white_noise_decay",
    "coherent_unraveling",
    "coherent_unraveling_detuned",
    "quadrature_unraveling",
    "eta_sweep",
)

PLUS = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)
EXCITED = np.array([1.0, 0.0], dtype=complex)
PROJ_E = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)

# Five-mode symmetric vacuum comb for the optical presets: Omega in
# {-2,-1,0,1,2} * gamma_b with equal weights |g|^2 = 0.2, so chi(0) = 1 and
# g_{-k} = g_k* holds with real couplings.
_OPTICAL_FREQS = (-2.0, -1.0, 0.0, 1.0, 2.0)
_OPTICAL_G = np.sqrt(0.2)
# lam = 0.2 keeps the second-order closures controlled for the optical runs.
_OPTICAL_LAMBDA = 0.2


def optical_bath() -> BathSpectrum:
    return BathSpectrum(modes=tuple((_OPTICAL_G, w, 0.0) for w in _OPTICAL_FREQS))


@dataclass(frozen=True)
class Scenario:
    name: str
    model: SystemModel
    kernel: CorrelationKernel
    closure: Closure
    grid: np.ndarray
    dt: float
    psi0: np.ndarray
    observables: dict
    default_ensemble: int
    default_seed: int
    checks: tuple = ()
    variants: tuple = ()  # (label, Scenario) pairs for sweep presets
    notes: dict = field(default_factory=dict, compare=False)

    def positivity_grid(self) -> np.ndarray:
        sub = self.grid[:: max(len(self.grid) // 12, 1)]
        return sub if len(sub) >= 2 else self.grid[:2]


class CheckResult(NamedTuple):
    name: str
    measured: float
    bound: float
    passed: bool


def _uniform_grid(t_end: float, dt: float) -> np.ndarray:
    n = int(round(t_end / dt))
    return np.linspace(0.0, t_end, n + 1)


def _hermitian_scenario(name, d_prime_ratio: float, closure: Closure, checks) -> Scenario:
    d = 2.0
    params = OUParams(gamma=1.0, omega=0.0, d=d, d_prime=d_prime_ratio * d)
    model = SystemModel(h_s=np.zeros((2, 2)), couplings=(SIGMA_Z,), lam=1.0)
    return Scenario(
        name=name,
        model=model,
        kernel=exponential_kernel(params),
        closure=closure,
        grid=_uniform_grid(2.0, 0.01),
        dt=0.01,
        psi0=PLUS,
        observables={"sigma_x": SIGMA_X, "sigma_y": SIGMA_Y, "sigma_z": SIGMA_Z},
        default_ensemble=20000,
        default_seed=7041,
        checks=checks,
        notes={"d_prime_ratio": d_prime_ratio},
    )


def _optical_scenario(name, kernel, h_s, checks, notes) -> Scenario:
    model = SystemModel(h_s=h_s, couplings=(1j * SIGMA_MINUS,), lam=_OPTICAL_LAMBDA)
    return Scenario(
        name=name,
        model=model,
        kernel=kernel,
        closure=Closure.CONVOLUTED,
        grid=_uniform_grid(5.0, 0.01),
        dt=0.01,
        psi0=EXCITED,
        observables={"p_excited": PROJ_E, "sigma_x": SIGMA_X},
        default_ensemble=20000,
        default_seed=9313,
        checks=checks,
        notes=notes,
    )


def preset(name: str) -> Scenario:
    """The fully bound scenario for one of the shipped preset names."""
    if name == "dephasing_qubit":
        return _hermitian_scenario(
            name, 0.0, Closure.EXACT_DEPHASING, ("kernel-positivity", "trace-preservation", "dephasing-law")
        )

    if name == "hermitian_single_channel":
        return _hermitian_scenario(
            name, 0.0, Closure.EXACT_DEPHASING, ("kernel-positivity", "trace-preservation")
        )

    if name == "eta_sweep":
        base = _hermitian_scenario(name, 0.0, Closure.EXACT_DEPHASING, ("kernel-positivity", "eta-linearity"))
        variants = tuple(
            (
                f"d_prime_ratio={r:g}",
                _hermitian_scenario(
                    f"{name}[{r:g}]", r, Closure.EXACT_DEPHASING, ("kernel-positivity", "trace-preservation")
                ),
            )
            for r in (0.0, 0.25, 0.5, 0.75, 1.0)
        )
        return dataclasses.replace(base, variants=variants)

    if name == "white_noise_decay":
        epsilon = 0.004
        # The white-noise master equation carries the full delta weight in its
        # one-sided memory integrals, so the scenario kernel is normalized to
        # unit mass on [0, t]: twice the whole-line-normalized regularization.
        kernel = scale_kernel(white_kernel_spec(epsilon), 2.0)
        model = SystemModel(h_s=np.zeros((2, 2)), couplings=(SIGMA_MINUS,), lam=0.5)
        return Scenario(
            name=name,
            model=model,
            kernel=kernel,
            closure=Closure.TCL2,
            grid=_uniform_grid(2.0, 0.001),
            dt=0.001,
            psi0=EXCITED,
            observables={"p_excited": PROJ_E},
            default_ensemble=2000,
            default_seed=5502,
            checks=("kernel-positivity", "tcl2-vs-lindblad"),
            notes={"epsilon": epsilon},
        )

    if name == "coherent_unraveling":
        return _optical_scenario(
            name,
            bath_kernel(optical_bath()),
            np.zeros((2, 2)),
            ("kernel-positivity", "trace-preservation", "populations-vs-tcl2"),
            {"unraveling": "coherent"},
        )

    if name == "coherent_unraveling_detuned":
        omega0, delta = 1.0, 0.3

        def h_rot(t: float) -> np.ndarray:
            return 0.5 * delta * (np.cos(omega0 * t) * SIGMA_X - np.sin(omega0 * t) * SIGMA_Y)

        return _optical_scenario(
            name,
            bath_kernel(optical_bath()),
            h_rot,
            ("kernel-positivity", "trace-preservation"),
            {"unraveling": "coherent", "detuning": delta, "carrier": omega0},
        )

    if name == "quadrature_unraveling":
        result = quadrature_kernel(optical_bath(), QuadratureMap(m=[[1.0]], m_dag=[[1.0]]))
        if result.condition_residual > 1e-10:
            raise ValueError("quadrature preset requires a symmetric spectrum")
        return _optical_scenario(
            name,
            result.kernel,
            np.zeros((2, 2)),
            ("kernel-positivity", "trace-preservation", "populations-vs-tcl2", "real-noise-kernel"),
            {"unraveling": "quadrature"},
        )

    raise ValueError(f"unknown preset {name!r}; options: {PRESET_NAMES}")


def white_kernel_spec(epsilon: float, n: int = 1) -> CorrelationKernel:
    return white_kernel(WhiteNoiseSpec(c=np.zeros((n, n)), epsilon=epsilon))


# ---------------------------------------------------------------------------
# scenario checks
# ---------------------------------------------------------------------------


def _trace_floor(closure: Closure) -> float:
    exact = closure in (Closure.EXACT_DEPHASING, Closure.STOCHASTIC_HAMILTONIAN)
    return 1e-3 if exact else 5e-3


def check_kernel_positivity(sc: Scenario, acc: EnsembleAccumulator | None) -> CheckResult:
    report = check_positivity(build_block_covariance(sc.kernel, sc.positivity_grid()))
    return CheckResult("kernel-positivity", report.min_eigenvalue, 0.0, report.passed)


def check_trace_preservation(sc: Scenario, acc: EnsembleAccumulator) -> CheckResult:
    floor = _trace_floor(sc.closure)
    bound = np.maximum(3.0 * acc.trace_stderr, floor)
    dev = np.abs(acc.trace_mean - 1.0)
    ratio = float(np.max(dev / bound))
    return CheckResult("trace-preservation", ratio, 1.0, ratio <= 1.0)


def check_dephasing_law(sc: Scenario, acc: EnsembleAccumulator) -> CheckResult:
    ref = dephasing_exact(sc.model, sc.kernel, np.outer(sc.psi0, sc.psi0.conj()), sc.grid)
    coher = acc.mean_rho[:, 0, 1]
    se = acc.rho_stderr[:, 0, 1]
    z = np.abs(coher - ref.rho[:, 0, 1]) / np.where(se > 0, se, 1.0)
    measured = float(np.max(z))
    return CheckResult("dephasing-law", measured, 3.0, measured <= 3.0)


def check_tcl2_vs_lindblad(sc: Scenario, acc: EnsembleAccumulator | None) -> CheckResult:
    rho0 = np.outer(sc.psi0, sc.psi0.conj())
    sol = tcl2_master(sc.model, sc.kernel, rho0, sc.grid)
    ref = lindblad_solve(sc.model, rho0, sc.grid)
    p_end = sol.rho[-1, 0, 0].real
    p_ref = ref.rho[-1, 0, 0].real
    measured = abs(p_end - p_ref) / abs(p_ref)
    return CheckResult("tcl2-vs-lindblad", float(measured), 0.05, measured <= 0.05)


def check_populations_vs_tcl2(sc: Scenario, acc: EnsembleAccumulator) -> CheckResult:
    if not sc.model.constant_h:
        raise ValueError("tcl2 comparison requires a constant Hamiltonian")
    rho0 = np.outer(sc.psi0, sc.psi0.conj())
    sol = tcl2_master(sc.model, sc.kernel, rho0, sc.grid)
    pops_ref = sol.populations()
    pops = np.einsum("tii->ti", acc.mean_rho).real
    measured = float(np.max(np.abs(pops - pops_ref)))
    return CheckResult("populations-vs-tcl2", measured, 0.02, measured <= 0.02)


def check_eta_linearity(sc: Scenario, acc: EnsembleAccumulator | None) -> CheckResult:
    """chi - eta scales as (1 - d_prime_ratio) across the sweep variants."""
    taus = np.linspace(0.0, 2.0, 9)
    base = None
    worst = 0.0
    for label, variant in sc.variants:
        r = variant.notes["d_prime_ratio"]
        diff = variant.kernel.chi_at(taus, 0.0)[:, 0, 0] - variant.kernel.eta_at(taus, 0.0)[:, 0, 0]
        if base is None:
            base = diff  # ratio 0 comes first
            continue
        worst = max(worst, float(np.max(np.abs(diff - (1.0 - r) * base))))
    return CheckResult("eta-linearity", worst, 1e-12, worst <= 1e-12)


def check_real_noise_kernel(sc: Scenario, acc: EnsembleAccumulator | None) -> CheckResult:
    """Quadrature preset: chi = eta pointwise and both real."""
    taus = np.linspace(0.0, 5.0, 41)
    chi = sc.kernel.chi_at(taus, 0.0)[:, 0, 0]
    eta = sc.kernel.eta_at(taus, 0.0)[:, 0, 0]
    measured = float(max(np.max(np.abs(chi - eta)), np.max(np.abs(chi.imag))))
    return CheckResult("real-noise-kernel", measured, 1e-12, measured <= 1e-12)


CHECKS = {
    "kernel-positivity": check_kernel_positivity,
    "trace-preservation": check_trace_preservation,
    "dephasing-law": check_dephasing_law,
    "tcl2-vs-lindblad": check_tcl2_vs_lindblad,
    "populations-vs-tcl2": check_populations_vs_tcl2,
    "eta-linearity": check_eta_linearity,
    "real-noise-kernel": check_real_noise_kernel,
}

# checks that can run without an ensemble accumulator
ENSEMBLE_FREE = {"kernel-positivity", "tcl2-vs-lindblad", "eta-linearity", "real-noise-kernel"}


def run_checks(sc: Scenario, acc: EnsembleAccumulator | None, names=None) -> list[CheckResult]:
    results = []
    for name in names if names is not None else sc.checks:
        fn = CHECKS[name]
        if acc is None and name not in ENSEMBLE_FREE:
            continue
        results.append(fn(sc, acc))
    return results
