"""Two-time noise correlation kernels.

A kernel is the pair of matrix-valued functions

    chi[a,b](t,s) = < z_a*(t) z_b(s) >        (Hermitian correlation)
    eta[a,b](t,s) = < z_a(t)  z_b(s) >        (anomalous correlation)

for a set of complex Gaussian noises z_a(t).  Realizability requires the
composite block matrix  [[chi, eta*], [eta, chi*]]  assembled over all
(channel, time) pairs to be positive semidefinite.

All shipped kernels are stationary sums of decaying exponentials,

    chi(t,s) = sum_k A_k exp(-mu_k (t-s)),   t >= s,

extended to t < s by the symmetries  chi(t,s) = chi(s,t)^dagger  and
eta(t,s) = eta(s,t)^T.  The mode lists (A_k, mu_k) are carried alongside
the callables; downstream integrators use them for exact memory-integral
prefactors whenever they are available.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.integrate import quad

from .operators import dag

Mode = tuple[np.ndarray, complex]  # (n x n amplitude, decay rate mu)


class PositivityError(Exception):
    """The requested correlation pair is not realizable by any Gaussian process."""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OUParams:
    """Complex Ornstein-Uhlenbeck parameters: relaxation gamma, rotation omega,
    white-noise intensity d and anomalous intensity d_prime (|d_prime| <= d).

    The stationary process has variance d / (2 gamma)."""

    gamma: float
    omega: float = 0.0
    d: float = 1.0
    d_prime: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("relaxation rate gamma must be > 0")
        if self.d < 0:
            raise ValueError("white-noise intensity d must be >= 0")
        if abs(self.d_prime) > self.d + 1e-15 * max(self.d, 1.0):
            raise ValueError("|d_prime| > d: correlation pair not realizable")

    @property
    def stationary_variance(self) -> float:
        return self.d / (2.0 * self.gamma)


@dataclass(frozen=True)
class BathSpectrum:
    """Discrete bosonic bath: modes (g_k, Omega_k, n_k) with coupling g_k,
    shifted frequency Omega_k = omega_k - omega_0 and thermal occupation n_k."""

    modes: tuple  # of (g: complex, omega: float, n: float)
    carrier: float = 0.0

    def __post_init__(self):
        if len(self.modes) == 0:
            raise ValueError("bath spectrum needs at least one mode")
        for g, _, n in self.modes:
            if n < 0:
                raise ValueError("thermal occupations must be >= 0")

    @property
    def couplings(self) -> np.ndarray:
        return np.array([m[0] for m in self.modes], dtype=complex)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([m[1] for m in self.modes], dtype=float)

    @property
    def occupations(self) -> np.ndarray:
        return np.array([m[2] for m in self.modes], dtype=float)


@dataclass(frozen=True)
class QuadratureMap:
    """Linear map defining quadrature-like channel operators from the
    interaction ones:  Zq_a = sum_a' ( m[a,a'] B_a' + m_dag[a,a'] B_a'^dagger ).

    m_dag defaults to zero; the identity map (m = 1, m_dag = 0) reproduces
    the plain interaction channels exactly."""

    m: np.ndarray
    m_dag: np.ndarray | None = None

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.m, dtype=complex))
        object.__setattr__(self, "m", m)
        if self.m_dag is None:
            object.__setattr__(self, "m_dag", np.zeros_like(m))
        else:
            md = np.atleast_2d(np.asarray(self.m_dag, dtype=complex))
            if md.shape != m.shape:
                raise ValueError("m and m_dag must have the same shape")
            object.__setattr__(self, "m_dag", md)
        if not np.all(np.isfinite(self.m)) or not np.all(np.isfinite(self.m_dag)):
            raise ValueError("quadrature map entries must be finite")


@dataclass(frozen=True)
class WhiteNoiseSpec:
    """Regularized white noise: correlation-time epsilon and the complex
    symmetric matrix c of anomalous weights."""

    c: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("regulator epsilon must be > 0")
        c = np.atleast_2d(np.asarray(self.c, dtype=complex))
        if np.max(np.abs(c - c.T)) > 1e-12 * max(1.0, np.max(np.abs(c))):
            raise ValueError("anomalous weight matrix c must be symmetric")
        object.__setattr__(self, "c", c)


# ---------------------------------------------------------------------------
# the kernel object
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationKernel:
    """Evaluable (chi, eta) pair for n_channels complex noises.

    chi and eta accept broadcastable time arrays and return arrays of shape
    broadcast(t, s).shape + (n, n).  Kernels are immutable; all operations
    on them are pure functions."""

    n_channels: int
    chi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    eta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    descriptor: str = "custom"
    chi_modes: tuple | None = None
    eta_modes: tuple | None = None
    params: dict = field(default_factory=dict, compare=False)

    def chi_at(self, t, s) -> np.ndarray:
        return self.chi(np.asarray(t, dtype=float), np.asarray(s, dtype=float))

    def eta_at(self, t, s) -> np.ndarray:
        return self.eta(np.asarray(t, dtype=float), np.asarray(s, dtype=float))

    @property
    def has_modes(self) -> bool:
        return self.chi_modes is not None and self.eta_modes is not None

    @property
    def smooth(self) -> bool:
        """Paths of this kernel are differentiable in mean square."""
        return self.descriptor != "white-approx"


def _eval_modes(modes: Sequence[Mode], n: int, t, s, symmetry: str) -> np.ndarray:
    """Evaluate sum_k A_k exp(-mu_k (t-s)) for t >= s, extended to t < s by
    the requested symmetry ('hermitian' for chi, 'transpose' for eta)."""
    tau = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    tau = np.atleast_1d(tau)
    out = np.zeros(tau.shape + (n, n), dtype=complex)
    pos = tau >= 0
    abst = np.abs(tau)
    for amp, mu in modes:
        w_pos = np.where(pos, np.exp(-mu * abst), 0.0)
        if symmetry == "hermitian":
            amp_neg = dag(amp)
            w_neg = np.where(pos, 0.0, np.exp(-np.conj(mu) * abst))
        else:
            amp_neg = amp.T
            w_neg = np.where(pos, 0.0, np.exp(-mu * abst))
        out += w_pos[..., None, None] * amp + w_neg[..., None, None] * amp_neg
    if np.isscalar(t) and np.isscalar(s):
        return out[0]
    return out.reshape(np.broadcast_shapes(np.shape(t), np.shape(s)) + (n, n))


def kernel_from_modes(
    chi_modes: Sequence[Mode],
    eta_modes: Sequence[Mode],
    n_channels: int,
    descriptor: str = "custom",
    params: dict | None = None,
) -> CorrelationKernel:
    """Build a stationary kernel from exponential mode lists."""
    chi_modes = tuple((np.atleast_2d(np.asarray(a, dtype=complex)), complex(mu)) for a, mu in chi_modes)
    eta_modes = tuple((np.atleast_2d(np.asarray(a, dtype=complex)), complex(mu)) for a, mu in eta_modes)
    n = n_channels

    def chi(t, s):
        return _eval_modes(chi_modes, n, t, s, "hermitian")

    def eta(t, s):
        return _eval_modes(eta_modes, n, t, s, "transpose")

    return CorrelationKernel(
        n_channels=n,
        chi=chi,
        eta=eta,
        descriptor=descriptor,
        chi_modes=chi_modes,
        eta_modes=eta_modes,
        params=dict(params or {}),
    )


# ---------------------------------------------------------------------------
# kernel builders
# ---------------------------------------------------------------------------


def exponential_kernel(p: OUParams) -> CorrelationKernel:
    """Stationary complex-OU correlations (single channel):

        chi(t,s) = D/(2 gamma)          exp[-(gamma - i Omega)(t-s)]
        eta(t,s) = D'/(2(gamma+i Omega)) exp[-(gamma + i Omega)(t-s)]

    for t >= s, extended by symmetry."""
    a_chi = p.d / (2.0 * p.gamma)
    a_eta = p.d_prime / (2.0 * (p.gamma + 1j * p.omega))
    return kernel_from_modes(
        chi_modes=[(np.array([[a_chi]]), p.gamma - 1j * p.omega)],
        eta_modes=[(np.array([[a_eta]]), p.gamma + 1j * p.omega)],
        n_channels=1,
        descriptor="exponential",
        params={"gamma": p.gamma, "omega": p.omega, "d": p.d, "d_prime": p.d_prime},
    )


def white_kernel(w: WhiteNoiseSpec) -> CorrelationKernel:
    """Delta correlations regularized by a narrow exponential of width epsilon:

        chi[a,b](t,s) = delta_ab (1/2eps) exp(-|t-s|/eps)
        eta[a,b](t,s) = c[a,b]  (1/2eps) exp(-|t-s|/eps)

    Each entry integrates over the whole line to its delta weight."""
    n = w.c.shape[0]
    rate = 1.0 / w.epsilon
    amp = 1.0 / (2.0 * w.epsilon)
    return kernel_from_modes(
        chi_modes=[(amp * np.eye(n), rate)],
        eta_modes=[(amp * w.c, rate)],
        n_channels=n,
        descriptor="white-approx",
        params={"epsilon": w.epsilon},
    )


def _coefficient_kernel(
    creators: np.ndarray,
    annihilators: np.ndarray,
    freqs: np.ndarray,
    occs: np.ndarray,
    n_channels: int,
    descriptor: str,
    force_eta_zero: bool = False,
    params: dict | None = None,
) -> CorrelationKernel:
    """Kernel of channel operators V_a(t) = sum_k ( creators[a,k] b_k^dag e^{+i W_k t}
    + annihilators[a,k] b_k e^{-i W_k t} ) traced against a thermal bath state."""
    chi_modes = []
    eta_modes = []
    for k in range(len(freqs)):
        c = creators[:, k]
        d = annihilators[:, k]
        w = freqs[k]
        nk = occs[k]
        a1 = (nk + 1.0) * np.outer(np.conj(c), c)
        if np.any(a1 != 0):
            chi_modes.append((a1, 1j * w))
        a2 = nk * np.outer(np.conj(d), d)
        if np.any(a2 != 0):
            chi_modes.append((a2, -1j * w))
        if not force_eta_zero:
            b1 = (nk + 1.0) * np.outer(d, c)
            if np.any(b1 != 0):
                eta_modes.append((b1, 1j * w))
            b2 = nk * np.outer(c, d)
            if np.any(b2 != 0):
                eta_modes.append((b2, -1j * w))
    if not chi_modes:
        chi_modes.append((np.zeros((n_channels, n_channels)), 0.0 + 0j))
    return kernel_from_modes(chi_modes, eta_modes, n_channels, descriptor, params)


def _bath_coefficients(b: BathSpectrum, channel_of_mode, h_coefficients):
    g = b.couplings
    n_modes = len(g)
    if channel_of_mode is None:
        channel_of_mode = [0] * n_modes
    if len(channel_of_mode) != n_modes:
        raise ValueError("channel assignment must cover every bath mode")
    n_channels = int(max(channel_of_mode)) + 1
    if h_coefficients is None:
        h = np.zeros(n_modes, dtype=complex)
    else:
        h = np.asarray(h_coefficients, dtype=complex)
        if h.shape != (n_modes,):
            raise ValueError("one h coefficient per mode is required")
    creators = np.zeros((n_channels, n_modes), dtype=complex)
    annihilators = np.zeros((n_channels, n_modes), dtype=complex)
    for k, ch in enumerate(channel_of_mode):
        creators[ch, k] = g[k]
        annihilators[ch, k] = h[k]
    return creators, annihilators, n_channels


def bath_kernel(
    b: BathSpectrum,
    channel_of_mode: Sequence[int] | None = None,
    h_coefficients: Sequence[complex] | None = None,
) -> CorrelationKernel:
    """Diagonal bath-to-noise correlation map:

        chi(t,s) = sum_k (n_k+1)|g_k|^2 e^{-i W_k (t-s)}
                 + sum_k  n_k   |h_k|^2 e^{+i W_k (t-s)},      eta = 0.

    eta vanishes identically by construction; this pairing is realizable
    for any bath spectrum."""
    creators, annihilators, n_channels = _bath_coefficients(b, channel_of_mode, h_coefficients)
    return _coefficient_kernel(
        creators,
        annihilators,
        b.frequencies,
        b.occupations,
        n_channels,
        "bath-spectrum",
        force_eta_zero=True,
        params={"n_modes": len(b.modes)},
    )


class QuadratureResult(NamedTuple):
    kernel: CorrelationKernel
    condition_residual: float


def quadrature_kernel(
    b: BathSpectrum,
    q: QuadratureMap,
    channel_of_mode: Sequence[int] | None = None,
    h_coefficients: Sequence[complex] | None = None,
    probe_times: np.ndarray | None = None,
) -> QuadratureResult:
    """Non-diagonal (quadrature-like) correlation map.

    Builds chi and eta from the mapped channel operators and reports how far
    the construction is from an exactly consistent one: the residual is the
    sup over probe lags of |chi_bath - chi_used|, where chi_used is the chi
    actually returned.  Maps producing Hermitian channel operators force
    eta = chi, which is realizable only for real correlations; in that case
    the returned kernel keeps the real part and the discarded imaginary part
    shows up in the residual.  A nonzero residual is a diagnostic, not an
    error."""
    creators, annihilators, n_bath = _bath_coefficients(b, channel_of_mode, h_coefficients)
    if q.m.shape[1] != n_bath:
        raise ValueError("quadrature map width must match the bath channel count")
    n_out = q.m.shape[0]

    # mapped operator Zq_a = sum_a' m[a,a'] B_a' + m_dag[a,a'] B_a'^dag
    mapped_creators = q.m @ creators + q.m_dag @ np.conj(annihilators)
    mapped_annihilators = q.m @ annihilators + q.m_dag @ np.conj(creators)

    raw = _coefficient_kernel(
        mapped_creators,
        mapped_annihilators,
        b.frequencies,
        b.occupations,
        n_out,
        "bath-spectrum",
        params={"n_modes": len(b.modes), "quadrature": True},
    )
    base = bath_kernel(b, channel_of_mode, h_coefficients)

    if probe_times is None:
        scale = max(float(np.max(np.abs(b.frequencies))), 1e-3)
        probe_times = np.linspace(0.0, 10.0 / scale, 257)
    chi_raw = raw.chi_at(probe_times, 0.0)
    eta_raw = raw.eta_at(probe_times, 0.0)

    hermitian_map = float(np.max(np.abs(chi_raw - eta_raw))) <= 1e-12 * max(
        1.0, float(np.max(np.abs(chi_raw)))
    )
    if hermitian_map:
        # eta = chi demands real noise; keep the real part of both.
        chi_modes = tuple(((a + np.conj(a)) / 2.0, mu) for a, mu in raw.chi_modes)
        used = kernel_from_modes(chi_modes, chi_modes, n_out, "bath-spectrum", raw.params)
    else:
        used = raw

    if n_out == base.n_channels:
        chi_base = base.chi_at(probe_times, 0.0)
        residual = float(np.max(np.abs(chi_base - used.chi_at(probe_times, 0.0))))
    else:
        residual = float("inf")
    return QuadratureResult(kernel=used, condition_residual=residual)


def grid_kernel(grid: np.ndarray, chi_values: np.ndarray, eta_values: np.ndarray) -> CorrelationKernel:
    """Kernel tabulated on a time grid; evaluated off-grid by bilinear
    interpolation.  chi_values/eta_values have shape (N, N, n, n)."""
    grid = np.asarray(grid, dtype=float)
    chi_values = np.asarray(chi_values, dtype=complex)
    eta_values = np.asarray(eta_values, dtype=complex)
    n = chi_values.shape[-1]

    def interp(values, t, s):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tb, sb = np.broadcast_arrays(t, s)
        it = np.clip(np.searchsorted(grid, tb) - 1, 0, len(grid) - 2)
        js = np.clip(np.searchsorted(grid, sb) - 1, 0, len(grid) - 2)
        ft = np.clip((tb - grid[it]) / (grid[it + 1] - grid[it]), 0.0, 1.0)[..., None, None]
        fs = np.clip((sb - grid[js]) / (grid[js + 1] - grid[js]), 0.0, 1.0)[..., None, None]
        v = (
            values[it, js] * (1 - ft) * (1 - fs)
            + values[it + 1, js] * ft * (1 - fs)
            + values[it, js + 1] * (1 - ft) * fs
            + values[it + 1, js + 1] * ft * fs
        )
        return v.reshape(np.broadcast_shapes(np.shape(t), np.shape(s)) + (n, n))

    return CorrelationKernel(
        n_channels=n,
        chi=lambda t, s: interp(chi_values, t, s),
        eta=lambda t, s: interp(eta_values, t, s),
        descriptor="custom-grid",
        params={"n_grid": len(grid)},
    )


def scale_kernel(k: CorrelationKernel, factor: float) -> CorrelationKernel:
    """Multiply both correlations by a positive scalar (stays realizable)."""
    if factor < 0:
        raise ValueError("scale factor must be >= 0")
    if k.has_modes:
        return kernel_from_modes(
            [(a * factor, mu) for a, mu in k.chi_modes],
            [(a * factor, mu) for a, mu in k.eta_modes],
            k.n_channels,
            k.descriptor,
            k.params,
        )
    return CorrelationKernel(
        n_channels=k.n_channels,
        chi=lambda t, s: factor * k.chi(t, s),
        eta=lambda t, s: factor * k.eta(t, s),
        descriptor=k.descriptor,
        params=k.params,
    )


def with_envelope(k: CorrelationKernel, phi: Callable[[np.ndarray], np.ndarray]) -> CorrelationKernel:
    """Fixed multiplicative envelope hook: chi'(t,s) = phi(t) phi(s) chi(t,s)
    (real phi keeps the pair realizable).  The exponential-mode shortcut is
    dropped since the result is no longer stationary."""

    def wrap(fn):
        def wrapped(t, s):
            w = np.asarray(phi(np.asarray(t, dtype=float))) * np.asarray(phi(np.asarray(s, dtype=float)))
            return np.asarray(w)[..., None, None] * fn(t, s)

        return wrapped

    return CorrelationKernel(
        n_channels=k.n_channels,
        chi=wrap(k.chi),
        eta=wrap(k.eta),
        descriptor=k.descriptor,
        params=k.params,
    )


# ---------------------------------------------------------------------------
# block covariance & positivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelGrid:
    """Kernel evaluated over a grid: the Hermitian 2nN x 2nN block matrix
    [[chi, eta*], [eta, chi*]] with flat index a*N + i for channel a, time i."""

    grid: np.ndarray
    block: np.ndarray
    n_channels: int


def kernel_on_grid(k: CorrelationKernel, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate chi and eta as big (nN x nN) matrices over the grid."""
    grid = np.asarray(grid, dtype=float)
    n, N = k.n_channels, len(grid)
    chi_g = k.chi_at(grid[:, None], grid[None, :])  # (N, N, n, n)
    eta_g = k.eta_at(grid[:, None], grid[None, :])
    big_chi = np.transpose(chi_g, (2, 0, 3, 1)).reshape(n * N, n * N)
    big_eta = np.transpose(eta_g, (2, 0, 3, 1)).reshape(n * N, n * N)
    return big_chi, big_eta


def build_block_covariance(k: CorrelationKernel, grid: np.ndarray) -> KernelGrid:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    big_chi, big_eta = kernel_on_grid(k, grid)
    if not (np.all(np.isfinite(big_chi)) and np.all(np.isfinite(big_eta))):
        raise ValueError("kernel produced non-finite values on the grid")
    block = np.block([[big_chi, np.conj(big_eta)], [big_eta, np.conj(big_chi)]])
    block = (block + dag(block)) / 2.0
    return KernelGrid(grid=grid, block=block, n_channels=k.n_channels)


class PositivityReport(NamedTuple):
    passed: bool
    min_eigenvalue: float


def check_positivity(kg: KernelGrid, tol: float | None = None) -> PositivityReport:
    """Positive-semidefiniteness gate for the block covariance.  The default
    tolerance absorbs the tiny negative eigenvalues eigensolvers report for
    rank-deficient PSD matrices."""
    evals = np.linalg.eigvalsh(kg.block)
    scale = float(np.max(np.abs(evals))) if evals.size else 0.0
    if tol is None:
        tol = 1e-10 * max(scale, 1.0)
    min_eig = float(evals[0])
    return PositivityReport(passed=min_eig >= -tol, min_eigenvalue=min_eig)


# ---------------------------------------------------------------------------
# structural operations
# ---------------------------------------------------------------------------


def hermitian_equality_residual(
    k: CorrelationKernel, ops: Sequence[np.ndarray], t: float, s: float
) -> float:
    """Operator norm of  sum_a ( L_a^dag chi[a,b](t,s) - L_a eta[a,b](t,s) ),
    maximized over b.  Zero certifies that the functional term of the
    evolution cancels (Hermitian fluctuation operator)."""
    if len(ops) != k.n_channels:
        raise ValueError("operator list must match the kernel channel count")
    chi_m = k.chi_at(t, s)
    eta_m = k.eta_at(t, s)
    worst = 0.0
    for b in range(k.n_channels):
        r = sum(dag(ops[a]) * chi_m[a, b] - ops[a] * eta_m[a, b] for a in range(k.n_channels))
        worst = max(worst, float(np.linalg.norm(r, 2)))
    return worst


def _check_unitary(u: np.ndarray, n: int):
    u = np.asarray(u, dtype=complex)
    if u.shape != (n, n):
        raise ValueError(f"unitary must be {n}x{n}, got {u.shape}")
    if np.max(np.abs(u @ dag(u) - np.eye(n))) > 1e-12 * n:
        raise ValueError("matrix is not unitary to 1e-12")
    return u


def kernel_transform(k: CorrelationKernel, u: np.ndarray) -> CorrelationKernel:
    """Correlations of the rotated noises r_m(t) = sum_a u^dag[m,a] z_a(t):

        chi'[m,n] = sum_ab u[a,m]       chi[a,b] conj(u[b,n])
        eta'[m,n] = sum_ab conj(u[a,m]) eta[a,b] conj(u[b,n])
    """
    n = k.n_channels
    u = _check_unitary(u, n)

    def tchi(mat):
        return np.einsum("am,...ab,bn->...mn", u, mat, np.conj(u))

    def teta(mat):
        return np.einsum("am,...ab,bn->...mn", np.conj(u), mat, np.conj(u))

    if k.has_modes:
        return kernel_from_modes(
            [(tchi(a), mu) for a, mu in k.chi_modes],
            [(teta(a), mu) for a, mu in k.eta_modes],
            n,
            k.descriptor,
            k.params,
        )
    return CorrelationKernel(
        n_channels=n,
        chi=lambda t, s: tchi(k.chi(t, s)),
        eta=lambda t, s: teta(k.eta(t, s)),
        descriptor=k.descriptor,
        params=k.params,
    )


# ---------------------------------------------------------------------------
# time integrals of kernels (closure prefactors)
# ---------------------------------------------------------------------------


def _mode_integral_factor(mu: complex, t: np.ndarray) -> np.ndarray:
    """int_0^t exp(-mu u) du, stable as mu -> 0."""
    t = np.asarray(t, dtype=float)
    if abs(mu) < 1e-14:
        return t.astype(complex)
    return (1.0 - np.exp(-mu * t)) / mu


def modes_time_integral(modes: Sequence[Mode], n: int, t: np.ndarray) -> np.ndarray:
    """int_0^t sum_k A_k exp(-mu_k u) du, shape t.shape + (n, n)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros(t.shape + (n, n), dtype=complex)
    for amp, mu in modes:
        out += _mode_integral_factor(mu, t)[..., None, None] * amp
    return out


def kernel_time_integral(k: CorrelationKernel, which: str, t: float) -> np.ndarray:
    """int_0^t chi(t,s) ds (or eta) - exact via modes when available, else
    adaptive quadrature entry by entry."""
    modes = k.chi_modes if which == "chi" else k.eta_modes
    if modes is not None:
        return modes_time_integral(modes, k.n_channels, np.array([t]))[0]
    fn = k.chi_at if which == "chi" else k.eta_at
    n = k.n_channels
    out = np.zeros((n, n), dtype=complex)
    for a in range(n):
        for b in range(n):
            out[a, b] = quad(lambda s: fn(t, s)[a, b], 0.0, t, complex_func=True, limit=200)[0]
    return out
