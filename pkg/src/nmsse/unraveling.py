"""Trajectory integration of the generalized stochastic wave-vector equation.

Each realization obeys the linear equation

    d|psi>/dt = -i H(t) |psi> - i lam sum_a z_a(t) L_a |psi> + (memory term)

where the memory term replaces the formally exact functional derivative by
one of four explicit closures:

* ``EXACT_DEPHASING``   - commuting Hermitian couplings; the derivative is
                          -i lam L_b |psi(t)> exactly,
* ``TCL2``              - free-propagator replacement acting on the current
                          state (time-convolutionless, second order),
* ``CONVOLUTED``        - free-propagator replacement acting on the stored
                          history |psi(s)> (time-convoluted, second order),
* ``STOCHASTIC_HAMILTONIAN`` - no memory term; valid only when the
                          Hermitian-fluctuation cancellation holds.

Trajectories are integrated by fixed-step RK4 with noise supplied on the
half-step stage grid; no per-step normalization is applied (only the
ensemble-averaged trace is conserved).  Batches of trajectories propagate
simultaneously as (M, dim) arrays, and memory integrals collapse to O(1)
recursions per step whenever the kernel carries exponential modes.
"""

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import (
    CorrelationKernel,
    hermitian_equality_residual,
    kernel_transform,
    modes_time_integral,
    kernel_time_integral,
)
from .noise import EnsembleNoiseSource, NoiseRealization, resample_noise
from .operators import dag, hermitian_propagator, is_hermitian, outer_batch

BLOWUP_NORM = 1.0e6


class TrajectoryBlowup(RuntimeError):
    def __init__(self, indices, step):
        self.indices = list(indices)
        self.step = step
        super().__init__(f"trajectory blow-up (norm > {BLOWUP_NORM:g}) at step {step}: indices {self.indices}")


class Closure(enum.Enum):
    EXACT_DEPHASING = "exact-dephasing"
    TCL2 = "tcl2"
    CONVOLUTED = "convoluted"
    STOCHASTIC_HAMILTONIAN = "stochastic-hamiltonian"

    @classmethod
    def from_string(cls, name: str) -> "Closure":
        for c in cls:
            if c.value == name:
                return c
        raise ValueError(f"unknown closure {name!r}; options: {[c.value for c in cls]}")


@dataclass(frozen=True)
class SystemModel:
    """System Hamiltonian, coupling operators and coupling strength.

    h_s may be a constant Hermitian matrix or a callable t -> matrix for
    interaction-picture scenarios."""

    h_s: np.ndarray | Callable[[float], np.ndarray]
    couplings: tuple
    lam: float = 1.0

    def __post_init__(self):
        couplings = tuple(np.asarray(L, dtype=complex) for L in self.couplings)
        object.__setattr__(self, "couplings", couplings)
        if not callable(self.h_s):
            h = np.asarray(self.h_s, dtype=complex)
            if not is_hermitian(h, 1e-12 * max(1.0, float(np.max(np.abs(h))))):
                raise ValueError("h_s must be Hermitian within 1e-12")
            object.__setattr__(self, "h_s", h)

    @property
    def dim(self) -> int:
        return self.couplings[0].shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.couplings)

    def hamiltonian(self, t: float) -> np.ndarray:
        return self.h_s(t) if callable(self.h_s) else self.h_s

    @property
    def constant_h(self) -> bool:
        return not callable(self.h_s)


@dataclass
class TrajectoryState:
    """Wave vector plus the history buffer consumed by the convoluted closure."""

    psi: np.ndarray
    t: float
    history_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history_psis: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=complex))


def transform_model(model: SystemModel, u: np.ndarray) -> SystemModel:
    """New operator base A_m = sum_a L_a u[a, m]; Hamiltonian and coupling
    strength are untouched."""
    n = model.n_channels
    u = np.asarray(u, dtype=complex)
    if u.shape != (n, n):
        raise ValueError(f"unitary must be {n}x{n}")
    if np.max(np.abs(u @ dag(u) - np.eye(n))) > 1e-12 * n:
        raise ValueError("matrix is not unitary to 1e-12")
    new_ops = tuple(
        sum(u[a, m] * model.couplings[a] for a in range(n)) for m in range(n)
    )
    return SystemModel(h_s=model.h_s, couplings=new_ops, lam=model.lam)


def validate_closure(closure: Closure, model: SystemModel, kernel: CorrelationKernel) -> None:
    if len(model.couplings) != kernel.n_channels:
        raise ValueError("coupling count must match kernel channel count")
    if model.lam == 0.0:
        return  # noise decoupled; every closure term carries lam^2
    if closure is Closure.EXACT_DEPHASING:
        if not model.constant_h:
            raise ValueError("exact-dephasing closure requires a constant Hamiltonian")
        h = model.h_s
        for L in model.couplings:
            if not is_hermitian(L, 1e-10):
                raise ValueError("exact-dephasing closure requires Hermitian couplings")
            if np.linalg.norm(h @ L - L @ h, 2) > 1e-10 * max(1.0, np.linalg.norm(h, 2)):
                raise ValueError("exact-dephasing closure requires [H_S, L] = 0")
    elif closure is Closure.STOCHASTIC_HAMILTONIAN:
        for t, s in ((0.7, 0.2), (1.3, 1.3), (2.9, 0.4)):
            if hermitian_equality_residual(kernel, model.couplings, t, s) > 1e-10:
                raise ValueError(
                    "stochastic-hamiltonian closure requires the Hermitian-fluctuation "
                    "cancellation (sum_a L_a^dag chi = sum_a L_a eta)"
                )
    elif closure is Closure.TCL2:
        if not model.constant_h:
            raise ValueError("tcl2 closure requires a constant Hamiltonian")


# ---------------------------------------------------------------------------
# closure prefactors (shared across all trajectories)
# ---------------------------------------------------------------------------


def _dephasing_prefactor(model: SystemModel, kernel: CorrelationKernel, times: np.ndarray) -> np.ndarray:
    """-lam^2 sum_ab [int_0^t (chi - eta)(t,s) ds] L_a L_b at each time."""
    n = kernel.n_channels
    if kernel.has_modes:
        integ = modes_time_integral(kernel.chi_modes, n, times) - modes_time_integral(
            kernel.eta_modes, n, times
        )
    else:
        integ = np.stack(
            [kernel_time_integral(kernel, "chi", t) - kernel_time_integral(kernel, "eta", t) for t in times]
        )
    pair = np.stack([np.stack([La @ Lb for Lb in model.couplings]) for La in model.couplings])
    return -model.lam**2 * np.einsum("tab,abcd->tcd", integ, pair)


def _mode_eigen_integrals(mu: complex, delta: np.ndarray, times: np.ndarray) -> np.ndarray:
    """int_0^t exp(-(mu + i delta_ij) u) du for every time, shape (T, d, d)."""
    rates = mu + 1j * delta
    out = np.empty(times.shape + delta.shape, dtype=complex)
    small = np.abs(rates) < 1e-14
    safe = np.where(small, 1.0, rates)
    out = (1.0 - np.exp(-safe * times[:, None, None])) / safe
    if np.any(small):
        out = np.where(small, times[:, None, None].astype(complex), out)
    return out


def tcl2_rate_operators(
    model: SystemModel, kernel: CorrelationKernel, times: np.ndarray, fine_step: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """D^chi_a(t) = lam^2 sum_b int_0^t chi[a,b](t,s) Ltil_b(t-s) ds  and the
    eta analogue, with Ltil_b(u) = exp(-iHu) L_b exp(+iHu).  Exact via kernel
    modes when available; composite trapezoid on the evaluation grid
    otherwise.  Shapes (T, n, dim, dim)."""
    if not model.constant_h:
        raise ValueError("tcl2 rate operators require a constant Hamiltonian")
    n, dim = kernel.n_channels, model.dim
    lam2 = model.lam**2
    times = np.asarray(times, dtype=float)
    evals, vecs = np.linalg.eigh(model.h_s)
    delta = evals[:, None] - evals[None, :]
    w_ops = [dag(vecs) @ L @ vecs for L in model.couplings]

    def from_modes(modes):
        out = np.zeros((len(times), n, dim, dim), dtype=complex)
        for amp, mu in modes:
            g = _mode_eigen_integrals(mu, delta, times)  # (T, dim, dim)
            for b in range(n):
                dressed = np.einsum("ij,tij->tij", w_ops[b], g)
                back = np.einsum("pi,tij,qj->tpq", vecs, dressed, np.conj(vecs))
                out[:, :, :, :] += amp[None, :, b, None, None] * back[:, None, :, :]
        return lam2 * out

    if kernel.has_modes:
        return from_modes(kernel.chi_modes), from_modes(kernel.eta_modes)

    if fine_step is None:
        fine_step = float(times[1] - times[0]) if len(times) > 1 else 1.0

    def from_grid(which):
        fn = kernel.chi_at if which == "chi" else kernel.eta_at
        out = np.zeros((len(times), n, dim, dim), dtype=complex)
        for it, t in enumerate(times):
            m = max(int(round(t / fine_step)), 0)
            if m < 1:
                continue
            s = np.linspace(0.0, t, m + 1)
            kv = fn(t, s)  # (m+1, n, n), kv[j, a, b] = kernel[a,b](t, s_j)
            phase = np.exp(-1j * (t - s)[:, None, None] * delta[None, :, :])
            w = np.full(m + 1, t / m)
            w[0] *= 0.5
            w[-1] *= 0.5
            for b in range(n):
                ltil = w_ops[b][None, :, :] * phase
                back = np.einsum("pi,jik,qk->jpq", vecs, ltil, np.conj(vecs))
                out[it] += np.einsum("ja,jpq->apq", kv[:, :, b] * w[:, None], back)
        return lam2 * out

    return from_grid("chi"), from_grid("eta")


def closure_prefactors(
    model: SystemModel, kernel: CorrelationKernel, closure: Closure, times: np.ndarray
) -> np.ndarray | None:
    """The state-independent closure matrix F_cl(t) on the given times, or
    None when the closure contributes no such matrix."""
    if closure is Closure.STOCHASTIC_HAMILTONIAN or closure is Closure.CONVOLUTED:
        return None
    if closure is Closure.EXACT_DEPHASING:
        return _dephasing_prefactor(model, kernel, times)
    d_chi, d_eta = tcl2_rate_operators(model, kernel, times, None)
    out = np.zeros((len(times), model.dim, model.dim), dtype=complex)
    for a, L in enumerate(model.couplings):
        out -= dag(L)[None] @ d_chi[:, a] - L[None] @ d_eta[:, a]
    return out


# ---------------------------------------------------------------------------
# memory integrators for the convoluted closure
# ---------------------------------------------------------------------------


class _ModeMemory:
    """Trapezoid memory integral evaluated by exact per-mode recursions.

    Each (kernel mode k, channel b) pair carries a running state
    U = sum_j w_j exp(-(mu_k + iH)(t_frontier - s_j)) L_b psi_j,
    advanced by one constant factor per stage node."""

    def __init__(self, model: SystemModel, kernel: CorrelationKernel, h: float, m_batch: int, p_step):
        self.lam2 = model.lam**2
        self.h = h
        self.ops = model.couplings
        self.n = len(self.ops)
        dim = model.dim
        readouts, mus, betas = [], [], []
        for amp, mu in kernel.chi_modes:
            for b in range(self.n):
                r = sum(amp[a, b] * dag(self.ops[a]) for a in range(self.n))
                if np.max(np.abs(r)) > 0:
                    readouts.append(r)
                    mus.append(mu)
                    betas.append(b)
        for amp, mu in kernel.eta_modes:
            for b in range(self.n):
                r = -sum(amp[a, b] * self.ops[a] for a in range(self.n))
                if np.max(np.abs(r)) > 0:
                    readouts.append(r)
                    mus.append(mu)
                    betas.append(b)
        self.readout_t = [r.T.copy() for r in readouts]
        self.decay = np.array([np.exp(-mu * h) for mu in mus])
        self.beta = np.array(betas, dtype=int)
        self.n_entries = len(readouts)
        self.p_step = p_step  # None (H = 0), matrix (constant H), or callable node -> matrix
        self.states = np.zeros((self.n_entries, m_batch, dim), dtype=complex)
        self.adv = None
        self.v_last = None
        self.lt = [L.T.copy() for L in self.ops]

    def _v(self, psis):
        return np.stack([psis @ lt for lt in self.lt])  # (n, M, dim)

    def start(self, psi0_batch):
        self.v_last = self._v(psi0_batch)
        self.states[:] = 0.0

    def b_committed(self):
        return self._readout(self.states)

    def enter(self, node):
        x = self.states + (self.h / 2.0) * self.v_last[self.beta]
        x = self.decay[:, None, None] * x
        if self.p_step is not None:
            p = self.p_step(node) if callable(self.p_step) else self.p_step
            x = x @ p.T
        self.adv = x

    def b_frontier(self, psi_est):
        v = self._v(psi_est)
        return self._readout(self.adv + (self.h / 2.0) * v[self.beta])

    def commit(self, psis):
        self.v_last = self._v(psis)
        self.states = self.adv + (self.h / 2.0) * self.v_last[self.beta]

    def _readout(self, states):
        out = np.zeros_like(states[0])
        for e in range(self.n_entries):
            out += states[e] @ self.readout_t[e]
        return -self.lam2 * out


class _RingMemory:
    """Reference trapezoid memory integral over the full stored history.

    Works for any kernel (no mode structure needed); cost grows linearly in
    the number of stored nodes, so it is meant for small batches and for
    cross-checking the recursive path."""

    def __init__(self, model, kernel, fine_times, m_batch, propagators):
        self.lam2 = model.lam**2
        self.kernel = kernel
        self.ops = model.couplings
        self.n = len(self.ops)
        self.times = fine_times
        self.h = fine_times[1] - fine_times[0]
        dim = model.dim
        self.v = np.zeros((self.n, len(fine_times), m_batch, dim), dtype=complex)
        self.committed = -1
        self.frontier = None
        self.propagators = propagators  # (K, dim, dim): exp(-iH lag) per lag index, or per-node U
        self.by_lag = not callable(model.h_s)
        self._cache = None

    def _v_of(self, psis):
        return np.stack([psis @ L.T for L in self.ops])

    def start(self, psi0_batch):
        self.v[:, 0] = self._v_of(psi0_batch)
        self.committed = 0

    def _weight_ops(self, node):
        """w_j-weighted readout operators R[j, b] for history j < node plus the
        endpoint operator at j = node."""
        t = self.times[node]
        s = self.times[: node + 1]
        chi = self.kernel.chi_at(t, s)  # (node+1, n, n)
        eta = self.kernel.eta_at(t, s)
        r = np.zeros((node + 1, self.n, *self.ops[0].shape), dtype=complex)
        for b in range(self.n):
            for a in range(self.n):
                r[:, b] += chi[:, a, b, None, None] * dag(self.ops[a]) - eta[:, a, b, None, None] * self.ops[a]
        if self.by_lag:
            props = self.propagators[node - np.arange(node + 1)]
        else:
            u_node = self.propagators[node]
            props = np.einsum("ij,tkj->tik", u_node, np.conj(self.propagators[: node + 1]))
        r = np.einsum("tbij,tjk->tbik", r, props)
        w = np.full(node + 1, self.h)
        w[0] = self.h / 2.0
        w[-1] = self.h / 2.0
        return r, w

    def b_committed(self):
        node = self.committed
        if node == 0:
            return -self.lam2 * np.zeros_like(self.v[0, 0])
        r, w = self._weight_ops(node)
        acc = np.zeros_like(self.v[0, 0])
        for b in range(self.n):
            for j in range(node + 1):
                acc += w[j] * (self.v[b, j] @ r[j, b].T)
        return -self.lam2 * acc

    def enter(self, node):
        self.frontier = node
        self._cache = self._weight_ops(node)

    def b_frontier(self, psi_est):
        node = self.frontier
        r, w = self._cache
        acc = np.zeros_like(self.v[0, 0])
        for b in range(self.n):
            for j in range(node):
                acc += w[j] * (self.v[b, j] @ r[j, b].T)
        v_est = self._v_of(psi_est)
        for b in range(self.n):
            acc += (self.h / 2.0) * (v_est[b] @ r[node, b].T)
        return -self.lam2 * acc

    def commit(self, psis):
        self.v[:, self.frontier] = self._v_of(psis)
        self.committed = self.frontier


# ---------------------------------------------------------------------------
# the batched RK4 engine
# ---------------------------------------------------------------------------


def _hamiltonian_terms(model: SystemModel, fine_times: np.ndarray):
    """Per-node -iH(t) (or a single matrix) plus the propagator data the
    memory integrators need."""
    dim = model.dim
    h = fine_times[1] - fine_times[0] if len(fine_times) > 1 else 0.0
    if model.constant_h:
        a0 = -1j * model.h_s
        if np.max(np.abs(model.h_s)) == 0.0:
            p_step = None
            lag_props = np.broadcast_to(np.eye(dim, dtype=complex), (len(fine_times), dim, dim))
        else:
            p_step = hermitian_propagator(model.h_s, h)
            lag_props = np.stack([hermitian_propagator(model.h_s, m * h) for m in range(len(fine_times))])
        return a0, p_step, lag_props
    a_nodes = np.stack([-1j * model.hamiltonian(t) for t in fine_times])
    # cumulative midpoint-rule propagators for the memory term
    u = np.empty((len(fine_times), dim, dim), dtype=complex)
    u[0] = np.eye(dim)
    for m in range(1, len(fine_times)):
        mid = 0.5 * (fine_times[m - 1] + fine_times[m])
        u[m] = hermitian_propagator(model.hamiltonian(mid), h) @ u[m - 1]
    p_step = lambda node: u[node] @ dag(u[node - 1])
    return a_nodes, p_step, u


def _integrate_batch(
    model: SystemModel,
    kernel: CorrelationKernel,
    closure: Closure,
    z_fine: np.ndarray,
    fine_times: np.ndarray,
    dt: float,
    psi0: np.ndarray,
    record_stride: int,
    on_record,
    active: np.ndarray | None = None,
):
    """Propagate a batch of trajectories; `on_record(grid_index, psis)` is
    called at every stride-th fine node (including t=0).  Raises
    TrajectoryBlowup listing offending batch indices."""
    m_batch, n, k_nodes = z_fine.shape
    dim = model.dim
    steps = (k_nodes - 1) // 2
    lam = model.lam
    a_term, p_step, lag_props = _hamiltonian_terms(model, fine_times)
    prefactors = closure_prefactors(model, kernel, closure, fine_times)
    const_a = a_term.ndim == 2

    if prefactors is not None:
        a_nodes = (a_term[None] if const_a else a_term) + prefactors
        a_t = np.ascontiguousarray(np.swapaxes(a_nodes, 1, 2))
        const_a = False
    elif const_a:
        a_t = np.ascontiguousarray(a_term.T)
    else:
        a_t = np.ascontiguousarray(np.swapaxes(a_term, 1, 2))

    mem = None
    if closure is Closure.CONVOLUTED:
        if kernel.has_modes:
            mem = _ModeMemory(model, kernel, fine_times[1] - fine_times[0], m_batch, p_step)
        else:
            mem = _RingMemory(model, kernel, fine_times, m_batch, lag_props)

    lt = [np.ascontiguousarray(L.T) for L in model.couplings]
    zc = -1j * lam * z_fine  # (M, n, K)

    def rhs(node, psis, b):
        out = psis @ (a_t if const_a else a_t[node])
        for a in range(n):
            out += zc[:, a, node, None] * (psis @ lt[a])
        if b is not None:
            out = out + b
        return out

    psis = np.broadcast_to(np.asarray(psi0, dtype=complex), (m_batch, dim)).copy()
    if mem is not None:
        mem.start(psis)
    on_record(0, psis)
    limit = BLOWUP_NORM**2
    if active is None:
        active = np.ones(m_batch, dtype=bool)

    for i in range(steps):
        m0, m1, m2 = 2 * i, 2 * i + 1, 2 * i + 2
        b1 = mem.b_committed() if mem else None
        k1 = rhs(m0, psis, b1)
        if mem:
            mem.enter(m1)
        e2 = psis + (dt / 2.0) * k1
        k2 = rhs(m1, e2, mem.b_frontier(e2) if mem else None)
        e3 = psis + (dt / 2.0) * k2
        k3 = rhs(m1, e3, mem.b_frontier(e3) if mem else None)
        if mem:
            mem.commit(e3)
            mem.enter(m2)
        e4 = psis + dt * k3
        k4 = rhs(m2, e4, mem.b_frontier(e4) if mem else None)
        psis = psis + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if mem:
            mem.commit(psis)
        if m2 % record_stride == 0:
            norms2 = np.einsum("md,md->m", psis, np.conj(psis)).real
            bad = active & (norms2 > limit)
            if np.any(bad):
                raise TrajectoryBlowup(np.nonzero(bad)[0], i + 1)
            on_record(m2 // record_stride, psis)
    return psis


# ---------------------------------------------------------------------------
# single-shot drift generator (reference path for the engine)
# ---------------------------------------------------------------------------


def drift_generator(
    model: SystemModel,
    kernel: CorrelationKernel,
    closure: Closure,
    t: float,
    state: TrajectoryState,
    z_t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Generator of d|psi>/dt = T(t)|psi> + b(t) at one time, from scratch.

    T collects -iH, the multiplicative noise term and any state-independent
    closure matrix; b is the affine memory contribution of the convoluted
    closure (zero otherwise).  This is the transparent (uncached) evaluation
    used to validate the batched engine."""
    validate_closure(closure, model, kernel)
    dim = model.dim
    z_t = np.atleast_1d(np.asarray(z_t, dtype=complex))
    gen = -1j * model.hamiltonian(t) - 1j * model.lam * sum(
        z_t[a] * model.couplings[a] for a in range(model.n_channels)
    )
    b = np.zeros(dim, dtype=complex)
    if closure is Closure.EXACT_DEPHASING:
        gen = gen + _dephasing_prefactor(model, kernel, np.array([t]))[0]
    elif closure is Closure.TCL2:
        d_chi, d_eta = tcl2_rate_operators(model, kernel, np.array([t]))
        for a, L in enumerate(model.couplings):
            gen = gen - (dag(L) @ d_chi[0, a] - L @ d_eta[0, a])
    elif closure is Closure.CONVOLUTED:
        if not model.constant_h:
            raise ValueError("convoluted drift_generator requires constant h_s")
        s = state.history_times
        if len(s) >= 2:
            chi = kernel.chi_at(t, s)
            eta = kernel.eta_at(t, s)
            acc = np.zeros(dim, dtype=complex)
            for j, sj in enumerate(s):
                prop = (
                    hermitian_propagator(model.h_s, t - sj)
                    if np.max(np.abs(model.h_s)) > 0
                    else np.eye(dim)
                )
                for bb in range(model.n_channels):
                    r = sum(
                        chi[j, a, bb] * dag(model.couplings[a]) - eta[j, a, bb] * model.couplings[a]
                        for a in range(model.n_channels)
                    )
                    acc_j = r @ prop @ (model.couplings[bb] @ state.history_psis[j])
                    w = (s[min(j + 1, len(s) - 1)] - s[max(j - 1, 0)]) / 2.0
                    acc += w * acc_j
            b = -model.lam**2 * acc
    return gen, b


# ---------------------------------------------------------------------------
# trajectory and ensemble drivers
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryResult:
    times: np.ndarray
    psis: np.ndarray  # (N, dim)
    norm2: np.ndarray
    observables: dict


def _fine_times(grid: np.ndarray, dt: float) -> tuple[np.ndarray, int]:
    """Stage grid with spacing dt/2 covering the scenario grid; returns the
    fine times and the record stride (fine nodes per grid interval)."""
    grid = np.asarray(grid, dtype=float)
    spacing = grid[1] - grid[0]
    if np.max(np.abs(np.diff(grid) - spacing)) > 1e-9 * max(spacing, 1e-30):
        raise ValueError("scenario grid must be uniform")
    q = spacing / dt
    if abs(q - round(q)) > 1e-9:
        raise ValueError("dt must divide the grid spacing")
    q = int(round(q))
    steps = (len(grid) - 1) * q
    fine = grid[0] + (dt / 2.0) * np.arange(2 * steps + 1)
    return fine, 2 * q


def run_trajectory(
    model: SystemModel,
    kernel: CorrelationKernel,
    closure: Closure,
    nr: NoiseRealization,
    dt: float,
    psi0: np.ndarray,
    observables: dict | None = None,
) -> TrajectoryResult:
    """Integrate one realization; reports <psi|psi> and <psi|O|psi> per grid
    point (no per-trajectory normalization)."""
    validate_closure(closure, model, kernel)
    grid = np.asarray(nr.grid, dtype=float)
    spacing = grid[1] - grid[0]
    if abs(spacing - dt / 2.0) <= 1e-9 * dt:
        if (len(grid) - 1) % 2:
            raise ValueError("stage-grid noise needs an even number of steps")
        record_grid, fine, stride = grid[::2], grid, 2
        z = nr.values
    else:
        record_grid = grid
        fine, stride = _fine_times(grid, dt)
        z = resample_noise(nr, fine, smooth=kernel.smooth)
    z = z[None, :, :]
    n_rec = len(record_grid)
    psis_out = np.zeros((n_rec, model.dim), dtype=complex)

    def record(idx, psis):
        psis_out[idx] = psis[0]

    _integrate_batch(model, kernel, closure, z, fine, dt, psi0, stride, record)
    norm2 = np.einsum("td,td->t", psis_out, np.conj(psis_out)).real
    obs = {}
    for name, op in (observables or {}).items():
        obs[name] = np.einsum("td,de,te->t", np.conj(psis_out), op, psis_out)
    return TrajectoryResult(times=record_grid, psis=psis_out, norm2=norm2, observables=obs)


class EnsembleAccumulator:
    """Running sums of outer products, traces and observables over trajectories.

    Merging accumulators is associative and commutative up to float
    reordering, so chunks may be computed in any order (results are reduced
    in chunk-index order to stay bitwise deterministic)."""

    def __init__(self, grid: np.ndarray, dim: int, obs_ops: dict):
        self.grid = np.asarray(grid, dtype=float)
        self.dim = dim
        self.obs_ops = dict(obs_ops)
        n = len(self.grid)
        self.count = 0
        self.blown = 0
        self.rho_sum = np.zeros((n, dim, dim), dtype=complex)
        self.rho_abs2 = np.zeros((n, dim, dim))
        self.trace_sum = np.zeros(n)
        self.trace_sq = np.zeros(n)
        self.obs_sum = {k: np.zeros(n, dtype=complex) for k in self.obs_ops}
        self.obs_abs2 = {k: np.zeros(n) for k in self.obs_ops}

    def add_states(self, idx: int, psis: np.ndarray, active: np.ndarray):
        ps = psis[active]
        outer = outer_batch(ps)
        self.rho_sum[idx] += outer.sum(axis=0)
        self.rho_abs2[idx] += (np.abs(outer) ** 2).sum(axis=0)
        tr = np.einsum("md,md->m", ps, np.conj(ps)).real
        self.trace_sum[idx] += tr.sum()
        self.trace_sq[idx] += (tr**2).sum()
        for name, op in self.obs_ops.items():
            v = np.einsum("md,de,me->m", np.conj(ps), op, ps)
            self.obs_sum[name][idx] += v.sum()
            self.obs_abs2[name][idx] += (np.abs(v) ** 2).sum()

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        if len(other.grid) != len(self.grid) or np.max(np.abs(other.grid - self.grid)) > 1e-12:
            raise ValueError("accumulator grids differ")
        out = EnsembleAccumulator(self.grid, self.dim, self.obs_ops)
        out.count = self.count + other.count
        out.blown = self.blown + other.blown
        out.rho_sum = self.rho_sum + other.rho_sum
        out.rho_abs2 = self.rho_abs2 + other.rho_abs2
        out.trace_sum = self.trace_sum + other.trace_sum
        out.trace_sq = self.trace_sq + other.trace_sq
        for k in self.obs_sum:
            out.obs_sum[k] = self.obs_sum[k] + other.obs_sum[k]
            out.obs_abs2[k] = self.obs_abs2[k] + other.obs_abs2[k]
        return out

    # -- derived statistics ------------------------------------------------

    @property
    def mean_rho(self) -> np.ndarray:
        return self.rho_sum / self.count

    @property
    def rho_stderr(self) -> np.ndarray:
        m = self.count
        var = np.clip(self.rho_abs2 / m - np.abs(self.mean_rho) ** 2, 0.0, None) * m / max(m - 1, 1)
        return np.sqrt(var / m)

    @property
    def trace_mean(self) -> np.ndarray:
        return self.trace_sum / self.count

    @property
    def trace_stderr(self) -> np.ndarray:
        m = self.count
        var = np.clip(self.trace_sq / m - self.trace_mean**2, 0.0, None) * m / max(m - 1, 1)
        return np.sqrt(var / m)

    def observable_mean(self, name: str) -> np.ndarray:
        return self.obs_sum[name] / self.count

    def observable_stderr(self, name: str) -> np.ndarray:
        m = self.count
        var = np.clip(self.obs_abs2[name] / m - np.abs(self.observable_mean(name)) ** 2, 0.0, None)
        return np.sqrt(var * m / max(m - 1, 1) / m)


def run_ensemble(
    model: SystemModel,
    kernel: CorrelationKernel,
    closure: Closure,
    m: int,
    master_seed: int,
    dt: float,
    grid: np.ndarray,
    psi0: np.ndarray,
    observables: dict | None = None,
    chunk: int = 2048,
    threads: int = 1,
) -> EnsembleAccumulator:
    """Average |psi><psi| over m trajectories.  Deterministic given the
    master seed: trajectory j always consumes stream j, chunks are reduced in
    index order, so the result is independent of chunk layout execution order
    and worker count.  Fails if more than 0.1% of trajectories blow up."""
    if m < 2:
        raise ValueError("ensemble needs at least 2 trajectories")
    validate_closure(closure, model, kernel)
    grid = np.asarray(grid, dtype=float)
    fine, stride = _fine_times(grid, dt)
    source = EnsembleNoiseSource(kernel, fine, master_seed)
    ranges = [(j, min(j + chunk, m)) for j in range(0, m, chunk)]

    def run_chunk(j0: int, j1: int) -> EnsembleAccumulator:
        acc = EnsembleAccumulator(grid, model.dim, observables or {})
        z = source.batch(j0, j1 - j0)
        active = np.ones(j1 - j0, dtype=bool)
        while True:
            try:
                _integrate_batch(
                    model, kernel, closure, z, fine, dt, psi0, stride,
                    lambda idx, psis: acc.add_states(idx, psis, active),
                    active=active,
                )
                break
            except TrajectoryBlowup as blow:
                acc = EnsembleAccumulator(grid, model.dim, observables or {})
                for idx in blow.indices:
                    active[idx] = False
                acc.blown += len(blow.indices)
        acc.count = int(np.sum(active))
        acc.blown = int(np.sum(~active))
        return acc

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda r: run_chunk(*r), ranges))
    else:
        parts = [run_chunk(*r) for r in ranges]

    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    if total.blown > 0.001 * m:
        raise RuntimeError(f"{total.blown} of {m} trajectories blew up (> 0.1%)")
    return total


def invariance_check(
    model: SystemModel,
    kernel: CorrelationKernel,
    closure: Closure,
    nr: NoiseRealization,
    u: np.ndarray,
    dt: float,
    psi0: np.ndarray,
) -> float:
    """Integrate the same realization in the original and the unitarily
    transformed frames (operators, kernels and noises rotated together) and
    return the sup-norm deviation of the wave vectors over the grid."""
    from .noise import transform_noises

    res_a = run_trajectory(model, kernel, closure, nr, dt, psi0)
    res_b = run_trajectory(
        transform_model(model, u),
        kernel_transform(kernel, u),
        closure,
        transform_noises(nr, u),
        dt,
        psi0,
    )
    return float(np.max(np.linalg.norm(res_a.psis - res_b.psis, axis=1)))
