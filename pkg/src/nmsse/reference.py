"""Deterministic master-equation oracles for validating ensemble averages.

Three solvers:

* ``dephasing_exact`` - single Hermitian channel commuting with H_S; the
  double-commutator equation with prefactor int_0^t Re chi(t,s) ds is exact,
* ``lindblad_solve``  - the white-noise limit, d rho/dt = -i[H, rho]
  + lam^2 ([L_a, rho L_a^dag] + [L_a rho, L_a^dag]),
* ``tcl2_master``     - the second-order time-convolutionless equation with
  the functional derivative replaced by its free-propagation value; depends
  on chi only, never on eta.

All integrate by fixed-step RK4 with closure prefactors evaluated exactly
from the kernel's exponential modes whenever they are available.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .kernels import CorrelationKernel, kernel_time_integral, modes_time_integral
from .operators import dag
from .unraveling import EnsembleAccumulator, SystemModel, tcl2_rate_operators


@dataclass(frozen=True)
class MasterSolution:
    grid: np.ndarray
    rho: np.ndarray  # (N, dim, dim)
    method: str

    def populations(self) -> np.ndarray:
        return np.einsum("tii->ti", self.rho).real


@dataclass(frozen=True)
class DephasingFactor:
    """Gamma(t) = int_0^t dt' int_0^t' ds kappa(t', s) with kappa = Re chi;
    for a single dephasing channel the coherence decays as
    exp(-4 lam^2 Gamma(t))."""

    gamma_fn: Callable[[float], float]

    def __call__(self, t: float) -> float:
        return self.gamma_fn(t)


def dephasing_factor(kernel: CorrelationKernel) -> DephasingFactor:
    def rate(t: float) -> float:
        return float(kernel_time_integral(kernel, "chi", t)[0, 0].real)

    def gamma(t: float) -> float:
        return quad(rate, 0.0, t, limit=400)[0]

    return DephasingFactor(gamma_fn=gamma)


def _rk4_rho(rhs, rho0: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """rhs(node, rho) indexed on the half-step stage grid (2 nodes per step)."""
    n = len(grid)
    dt = grid[1] - grid[0]
    out = np.empty((n,) + rho0.shape, dtype=complex)
    out[0] = rho0
    rho = rho0.astype(complex)
    for i in range(n - 1):
        m0 = 2 * i
        k1 = rhs(m0, rho)
        k2 = rhs(m0 + 1, rho + (dt / 2) * k1)
        k3 = rhs(m0 + 1, rho + (dt / 2) * k2)
        k4 = rhs(m0 + 2, rho + dt * k3)
        rho = rho + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = rho
    return out


def _stage_times(grid: np.ndarray) -> np.ndarray:
    dt = grid[1] - grid[0]
    return grid[0] + (dt / 2.0) * np.arange(2 * (len(grid) - 1) + 1)


def _check_uniform(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2 or np.max(np.abs(np.diff(grid) - (grid[1] - grid[0]))) > 1e-9 * (grid[1] - grid[0]):
        raise ValueError("solver grid must be uniform with at least two points")
    return grid


def dephasing_exact(
    model: SystemModel, kernel: CorrelationKernel, rho0: np.ndarray, grid: np.ndarray
) -> MasterSolution:
    """d rho/dt = -i[H, rho] - lam^2 (int_0^t kappa(t,s) ds) [L, [L, rho]]
    for one Hermitian channel with [H_S, L] = 0."""
    grid = _check_uniform(grid)
    if kernel.n_channels != 1 or len(model.couplings) != 1:
        raise ValueError("dephasing oracle is single-channel")
    L = model.couplings[0]
    if np.max(np.abs(L - dag(L))) > 1e-10:
        raise ValueError("dephasing oracle requires a Hermitian coupling")
    if not model.constant_h:
        raise ValueError("dephasing oracle requires constant h_s")
    h = model.h_s
    if np.linalg.norm(h @ L - L @ h, 2) > 1e-10 * max(1.0, np.linalg.norm(h, 2)):
        raise ValueError("dephasing oracle requires [H_S, L] = 0")
    stages = _stage_times(grid)
    if kernel.has_modes:
        rates = modes_time_integral(kernel.chi_modes, 1, stages)[:, 0, 0].real
    else:
        rates = np.array([kernel_time_integral(kernel, "chi", t)[0, 0].real for t in stages])
    lam2 = model.lam**2

    def rhs(node, rho):
        comm = h @ rho - rho @ h
        inner = L @ rho - rho @ L
        double = L @ inner - inner @ L
        return -1j * comm - lam2 * rates[node] * double

    rho = _rk4_rho(rhs, np.asarray(rho0, dtype=complex), grid)
    return MasterSolution(grid=grid, rho=rho, method="dephasing-exact")


def lindblad_solve(model: SystemModel, rho0: np.ndarray, grid: np.ndarray) -> MasterSolution:
    """White-noise limit: d rho/dt = -i[H, rho]
    + lam^2 sum_a (2 L_a rho L_a^dag - {L_a^dag L_a, rho})."""
    grid = _check_uniform(grid)
    if not model.constant_h:
        raise ValueError("lindblad oracle requires constant h_s")
    h = model.h_s
    lam2 = model.lam**2
    ops = [(L, dag(L), dag(L) @ L) for L in model.couplings]

    def rhs(node, rho):
        out = -1j * (h @ rho - rho @ h)
        for L, Ld, LdL in ops:
            out += lam2 * (2.0 * (L @ rho @ Ld) - LdL @ rho - rho @ LdL)
        return out

    rho = _rk4_rho(rhs, np.asarray(rho0, dtype=complex), grid)
    return MasterSolution(grid=grid, rho=rho, method="lindblad")


def tcl2_master(
    model: SystemModel, kernel: CorrelationKernel, rho0: np.ndarray, grid: np.ndarray
) -> MasterSolution:
    """Second-order time-convolutionless equation,

        d rho/dt = -i[H, rho]
                   - sum_a ( L_a^dag D_a(t) rho - D_a(t) rho L_a^dag ) + h.c.,

    with D_a(t) = lam^2 sum_b int_0^t chi[a,b](t,s) Ltil_b(t-s) ds.  The
    anomalous correlation eta never enters."""
    grid = _check_uniform(grid)
    stages = _stage_times(grid)
    d_chi, _ = tcl2_rate_operators(model, kernel, stages)
    h = model.h_s
    l_dag = [dag(L) for L in model.couplings]

    def rhs(node, rho):
        out = -1j * (h @ rho - rho @ h)
        for a in range(len(l_dag)):
            d = d_chi[node, a]
            term = l_dag[a] @ d @ rho - d @ rho @ l_dag[a]
            out -= term + dag(term)
        return out

    rho = _rk4_rho(rhs, np.asarray(rho0, dtype=complex), grid)
    return MasterSolution(grid=grid, rho=rho, method="tcl2")


# ---------------------------------------------------------------------------
# ensemble vs oracle comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompareReport:
    max_abs_dev: float
    max_z_score: float
    per_time: np.ndarray  # (N, 2): max |dev| and max z at each grid point

    def passes(self, z_bound: float = 3.0) -> bool:
        return self.max_z_score <= z_bound


def compare(acc: EnsembleAccumulator, ref: MasterSolution) -> CompareReport:
    """Entrywise deviation of the ensemble mean state from the oracle, with
    z-scores against the ensemble standard errors."""
    if len(acc.grid) != len(ref.grid) or np.max(np.abs(acc.grid - ref.grid)) > 1e-12:
        raise ValueError("ensemble and reference grids differ")
    dev = np.abs(acc.mean_rho - ref.rho)
    se = acc.rho_stderr
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 1e-12, np.inf, 0.0))
    per_time = np.stack([dev.reshape(len(acc.grid), -1).max(axis=1),
                         z.reshape(len(acc.grid), -1).max(axis=1)], axis=1)
    return CompareReport(
        max_abs_dev=float(dev.max()),
        max_z_score=float(z.max()),
        per_time=per_time,
    )
