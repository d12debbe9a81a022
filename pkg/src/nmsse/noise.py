"""Sampling of complex Gaussian noise paths with prescribed correlations.

Three interchangeable samplers cover the shipped kernels:

* an exact stationary recursion for exponential (complex OU) correlations,
* a spectral construction for discrete bath spectra (finite sums of
  oscillating modes, exact at any set of times),
* a generic sampler factorizing the real-embedding covariance of the
  (chi, eta) pair on the requested grid - works for every admissible
  kernel and is the reference the fast paths are tested against.

Streams are counter-based (Philox) and keyed by (master_seed, stream_index),
so every trajectory's noise is reproducible bit-for-bit regardless of
execution order or worker count.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .kernels import CorrelationKernel, PositivityError, kernel_on_grid
from .operators import dag

_FROZEN_REL = 1e-14  # coordinates with variance below this (relative) are pinned to 0
_JITTER_STEPS = (0.0, 1e-12, 1e-10, 1e-8)


@dataclass(frozen=True)
class RngStreamSpec:
    """Deterministic per-trajectory random stream."""

    master_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        key = [self.master_seed % (2**64), self.stream_index % (2**64)]
        return np.random.Generator(np.random.Philox(key=key))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStreamSpec):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStreamSpec or numpy Generator")


@dataclass(frozen=True)
class NoiseRealization:
    """One sampled path of all channels: values[a, i] = z_a(grid[i])."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.values.shape[0], len(self.grid)):
            raise ValueError("values must have shape (n_channels, len(grid))")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("noise realization contains non-finite entries")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


def transform_noises(nr: NoiseRealization, u: np.ndarray) -> NoiseRealization:
    """Rotated noises r_m(t) = sum_a u^dag[m,a] z_a(t)."""
    u = np.asarray(u, dtype=complex)
    n = nr.n_channels
    if u.shape != (n, n):
        raise ValueError(f"unitary must be {n}x{n}")
    if np.max(np.abs(u @ dag(u) - np.eye(n))) > 1e-12 * n:
        raise ValueError("matrix is not unitary to 1e-12")
    return NoiseRealization(grid=nr.grid, values=dag(u) @ nr.values)


def resample_noise(nr: NoiseRealization, times: np.ndarray, smooth: bool = True) -> np.ndarray:
    """Noise values at arbitrary times: direct lookup when the times lie on
    the stored grid, otherwise cubic (smooth kernels) or linear
    (white-regularized) interpolation."""
    times = np.asarray(times, dtype=float)
    idx = np.searchsorted(nr.grid, times)
    idx = np.clip(idx, 0, len(nr.grid) - 1)
    on_grid = np.abs(nr.grid[idx] - times) <= 1e-12 * max(1.0, float(nr.grid[-1]))
    if np.all(on_grid):
        return nr.values[:, idx]
    if smooth and len(nr.grid) >= 4:
        return CubicSpline(nr.grid, nr.values, axis=1)(times)
    out = np.empty((nr.n_channels, len(times)), dtype=complex)
    for a in range(nr.n_channels):
        out[a] = np.interp(times, nr.grid, nr.values[a].real) + 1j * np.interp(
            times, nr.grid, nr.values[a].imag
        )
    return out


# ---------------------------------------------------------------------------
# generic sampler: real-embedding covariance factorization
# ---------------------------------------------------------------------------


def real_embedding_covariance(k: CorrelationKernel, grid: np.ndarray) -> np.ndarray:
    """Covariance of the stacked real vector (x, y), z = x + i y:

        <x x'> = Re[chi + eta]/2      <x y'> = Im[chi + eta]/2
        <y y'> = Re[chi - eta]/2      <y x'> = Im[eta - chi]/2

    (flat index a*N + i within each half)."""
    big_chi, big_eta = kernel_on_grid(k, grid)
    xx = (big_chi + big_eta).real / 2.0
    yy = (big_chi - big_eta).real / 2.0
    xy = (big_chi + big_eta).imag / 2.0
    yx = (big_eta - big_chi).imag / 2.0
    cov = np.block([[xx, xy], [yx, yy]])
    return (cov + cov.T) / 2.0


class GaussianPathSampler:
    """Factorizes the real-embedding covariance once; draws are then a single
    matrix product.  Zero-variance coordinates (e.g. the imaginary parts when
    eta = chi is real) are detected up front and pinned to exactly zero.
    The factorization is stabilized by an escalating relative jitter; kernels
    that stay indefinite beyond that are rejected as unrealizable."""

    def __init__(self, k: CorrelationKernel, grid: np.ndarray):
        self.grid = np.asarray(grid, dtype=float)
        self.n_channels = k.n_channels
        self.n_times = len(self.grid)
        cov = real_embedding_covariance(k, self.grid)
        d = cov.shape[0]
        diagonal = np.diag(cov)
        if np.any(diagonal < -_FROZEN_REL * max(1.0, diagonal.max(initial=0.0))):
            raise PositivityError("negative variance on the diagonal: kernel not realizable")
        self.live = diagonal > _FROZEN_REL * max(1.0, float(diagonal.max(initial=0.0)))
        reduced = cov[np.ix_(self.live, self.live)]
        self.dim = d
        self.factor = self._factorize(reduced)

    @staticmethod
    def _factorize(cov: np.ndarray) -> np.ndarray:
        if cov.size == 0:
            return cov
        scale = np.trace(cov) / cov.shape[0]
        for delta in _JITTER_STEPS:
            try:
                return np.linalg.cholesky(cov + delta * scale * np.eye(cov.shape[0]))
            except np.linalg.LinAlgError:
                continue
        evals, vecs = np.linalg.eigh(cov)
        floor = -1e-8 * max(float(np.max(np.abs(evals))), 1e-30)
        if evals[0] < floor:
            raise PositivityError(
                f"covariance factorization failed after jitter escalation "
                f"(min eigenvalue {evals[0]:.3e}): kernel not realizable"
            )
        return vecs * np.sqrt(np.clip(evals, 0.0, None))

    @property
    def normals_shape(self) -> tuple:
        return (self.factor.shape[1],) if self.factor.size else (0,)

    def from_normals(self, normals: np.ndarray) -> np.ndarray:
        m = normals.shape[0]
        v = np.zeros((m, self.dim))
        if self.factor.size:
            v[:, self.live] = normals @ self.factor.T
        half = self.dim // 2
        z = v[:, :half] + 1j * v[:, half:]
        return z.reshape(m, self.n_channels, self.n_times)

    def sample_batch(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """m independent paths, shape (m, n_channels, n_times)."""
        return self.from_normals(rng.standard_normal((m,) + self.normals_shape))

    def sample(self, rng) -> NoiseRealization:
        values = self.sample_batch(_as_generator(rng), 1)[0]
        return NoiseRealization(grid=self.grid, values=values)


def sample_gaussian(k: CorrelationKernel, grid: np.ndarray, rng) -> NoiseRealization:
    """One path of any admissible kernel via the grid-covariance route."""
    return GaussianPathSampler(k, grid).sample(rng)


# ---------------------------------------------------------------------------
# exact Ornstein-Uhlenbeck sampler
# ---------------------------------------------------------------------------


def _complex_normal_factors(c: float, p: complex) -> tuple[float, float, float]:
    """Coefficients mapping two standard normals (n1, n2) to a complex scalar
    w = sx*n1 + i*(a*n1 + b*n2) with <|w|^2> = c and <w^2> = p."""
    vx = (c + p.real) / 2.0
    vy = (c - p.real) / 2.0
    cxy = p.imag / 2.0
    sx = np.sqrt(max(vx, 0.0))
    a = cxy / sx if sx > 0 else 0.0
    b = np.sqrt(max(vy - a * a, 0.0))
    return sx, a, b


class OUPathSampler:
    """Exact stationary discretization of d z = -(gamma + i Omega) z dt + xi dt
    on a uniform grid: grid-point correlations match the exponential kernel
    formulas exactly, for every step size."""

    def __init__(self, gamma: float, omega: float, d: float, d_prime: float, grid: np.ndarray):
        grid = np.asarray(grid, dtype=float)
        steps = np.diff(grid)
        if len(grid) > 1 and np.max(np.abs(steps - steps[0])) > 1e-10 * max(steps[0], 1e-30):
            raise ValueError("exact OU sampling requires a uniform grid")
        self.grid = grid
        h = steps[0] if len(grid) > 1 else 0.0
        mu = gamma + 1j * omega
        self.decay = np.exp(-mu * h)
        c0 = d / (2.0 * gamma)
        p0 = d_prime / (2.0 * mu)
        self.init_f = _complex_normal_factors(c0, p0)
        if h > 0:
            cw = d * (1.0 - np.exp(-2.0 * gamma * h)) / (2.0 * gamma)
            pw = d_prime * (1.0 - np.exp(-2.0 * mu * h)) / (2.0 * mu)
            self.step_f = _complex_normal_factors(cw, complex(pw))
        else:
            self.step_f = (0.0, 0.0, 0.0)

    @property
    def normals_shape(self) -> tuple:
        return (len(self.grid), 2)

    def from_normals(self, normals: np.ndarray) -> np.ndarray:
        m, k = normals.shape[0], len(self.grid)
        sx, a, b = self.init_f
        z = np.empty((m, k), dtype=complex)
        z[:, 0] = sx * normals[:, 0, 0] + 1j * (a * normals[:, 0, 0] + b * normals[:, 0, 1])
        sxw, aw, bw = self.step_f
        w = sxw * normals[:, 1:, 0] + 1j * (aw * normals[:, 1:, 0] + bw * normals[:, 1:, 1])
        for i in range(1, k):
            z[:, i] = z[:, i - 1] * self.decay + w[:, i - 1]
        return z[:, None, :]  # single channel

    def sample_batch(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return self.from_normals(rng.standard_normal((m,) + self.normals_shape))


def sample_ou(p, grid: np.ndarray, rng) -> NoiseRealization:
    """One exact stationary OU path (single channel)."""
    sampler = OUPathSampler(p.gamma, p.omega, p.d, p.d_prime, grid)
    values = sampler.sample_batch(_as_generator(rng), 1)[0]
    return NoiseRealization(grid=np.asarray(grid, dtype=float), values=values)


# ---------------------------------------------------------------------------
# spectral sampler for discrete bath kernels
# ---------------------------------------------------------------------------


class SpectralPathSampler:
    """Exact sampler for kernels that are finite sums of oscillating modes
    (Re mu = 0).  Handles the two shipped bath constructions:

    * eta = 0 (diagonal map): z(t) = sum_k sqrt(a_k) xi_k exp(+i W_k t) with
      circular complex xi_k,
    * eta = chi real (Hermitian quadrature map): a real stationary process
      from independent cosine/sine amplitudes.
    """

    def __init__(self, freqs: np.ndarray, amps: np.ndarray, real_process: bool, grid: np.ndarray):
        self.grid = np.asarray(grid, dtype=float)
        self.freqs = freqs
        self.scales = np.sqrt(amps)
        self.real_process = real_process
        # mode phases on the grid, shape (K, T)
        self.phases = np.exp(1j * np.outer(freqs, self.grid))

    @classmethod
    def for_kernel(cls, k: CorrelationKernel, grid: np.ndarray):
        """Return a sampler when the kernel has the right structure, else None."""
        if not k.has_modes or k.n_channels != 1:
            return None
        freqs, amps = [], []
        for a, mu in k.chi_modes:
            if abs(mu.real) > 1e-12:
                return None
            amp = complex(a[0, 0])
            if abs(amp.imag) > 1e-12 * max(1.0, abs(amp)) or amp.real < 0:
                return None
            freqs.append(-mu.imag)  # chi(tau) = a exp(-i W tau) with mu = i W
            amps.append(amp.real)
        if not k.eta_modes:
            return cls(np.array(freqs), np.array(amps), False, grid)
        # eta = chi (real): amplitudes must match chi's mode for mode
        chi_tab = {(round(m.imag, 12)): a for a, m in k.chi_modes}
        for a, mu in k.eta_modes:
            key = round(mu.imag, 12)
            if key not in chi_tab or np.max(np.abs(chi_tab[key] - a)) > 1e-12:
                return None
            if abs(complex(a[0, 0]).imag) > 1e-12:
                return None
        if len(k.eta_modes) != len(k.chi_modes):
            return None
        return cls(np.array(freqs), np.array(amps), True, grid)

    @property
    def normals_shape(self) -> tuple:
        return (len(self.freqs), 2)

    def from_normals(self, normals: np.ndarray) -> np.ndarray:
        if self.real_process:
            cosines = np.cos(np.outer(self.freqs, self.grid))
            sines = np.sin(np.outer(self.freqs, self.grid))
            z = (normals[:, :, 0] * self.scales) @ cosines + (normals[:, :, 1] * self.scales) @ sines
            return z.astype(complex)[:, None, :]
        xi = (normals[:, :, 0] + 1j * normals[:, :, 1]) / np.sqrt(2.0) * self.scales
        z = xi @ self.phases
        return z[:, None, :]

    def sample_batch(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return self.from_normals(rng.standard_normal((m,) + self.normals_shape))


# ---------------------------------------------------------------------------
# sampler selection for ensembles
# ---------------------------------------------------------------------------


def _ou_plan(k: CorrelationKernel, grid: np.ndarray):
    """Recognize per-channel independent exponential correlations from the
    mode lists (robust against rescaled kernels) and build OU samplers."""
    if not k.has_modes or len(k.chi_modes) != 1:
        return None
    amp, mu = k.chi_modes[0]
    if mu.real <= 0:
        return None
    if np.max(np.abs(amp - np.diag(np.diag(amp)))) > 1e-14 * max(1.0, np.max(np.abs(amp))):
        return None
    if len(k.eta_modes) > 1:
        return None
    if k.eta_modes:
        eamp, emu = k.eta_modes[0]
        if abs(emu - np.conj(mu)) > 1e-12 * max(1.0, abs(mu)):
            return None
        if np.max(np.abs(eamp - np.diag(np.diag(eamp)))) > 1e-14 * max(1.0, np.max(np.abs(eamp))):
            return None
        ediag = np.diag(eamp)
    else:
        ediag = np.zeros(k.n_channels, dtype=complex)
    gamma, omega = mu.real, -mu.imag
    samplers = []
    for a in range(k.n_channels):
        d = 2.0 * gamma * float(amp[a, a].real)
        d_prime = complex(ediag[a]) * 2.0 * (gamma + 1j * omega)
        if abs(d_prime.imag) > 1e-10 * max(1.0, abs(d_prime)) or abs(d_prime.real) > d * (1 + 1e-12):
            return None
        samplers.append(OUPathSampler(gamma, omega, d, d_prime.real, grid))
    return samplers


class _MultiOUSampler:
    """Independent per-channel OU samplers sharing one generator."""

    def __init__(self, samplers):
        self.samplers = samplers

    def sample_batch(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return np.concatenate([s.sample_batch(rng, m) for s in self.samplers], axis=1)


def build_path_sampler(k: CorrelationKernel, grid: np.ndarray):
    """The cheapest exact sampler for this kernel on this grid: per-channel
    OU recursion for exponential modes, spectral construction for discrete
    bath spectra, grid-covariance factorization otherwise.  All expose
    sample_batch(rng, m) -> (m, n_channels, len(grid))."""
    grid = np.asarray(grid, dtype=float)
    ou = _ou_plan(k, grid)
    if ou is not None:
        return _MultiOUSampler(ou)
    spectral = SpectralPathSampler.for_kernel(k, grid)
    if spectral is not None:
        return spectral
    return GaussianPathSampler(k, grid)


class EnsembleNoiseSource:
    """Trajectory-indexed paths from counter-based streams: trajectory j is
    always drawn from stream (master_seed, j), so ensembles are reproducible
    independent of chunking, ordering or worker count."""

    def __init__(self, k: CorrelationKernel, grid: np.ndarray, master_seed: int):
        self.master_seed = master_seed
        self.grid = np.asarray(grid, dtype=float)
        self.n_channels = k.n_channels
        self._sampler = build_path_sampler(k, self.grid)

    def batch(self, first_stream: int, m: int) -> np.ndarray:
        """Paths for trajectories first_stream .. first_stream+m-1,
        shape (m, n_channels, len(grid))."""
        out = np.empty((m, self.n_channels, len(self.grid)), dtype=complex)
        for j in range(m):
            rng = RngStreamSpec(self.master_seed, first_stream + j).generator()
            out[j] = self._sampler.sample_batch(rng, 1)[0]
        return out


# ---------------------------------------------------------------------------
# empirical correlations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalCorrelations:
    grid: np.ndarray
    chi_hat: np.ndarray  # (n, n, N, N)
    eta_hat: np.ndarray
    chi_stderr: np.ndarray  # total (Re+Im) standard errors, same shape, real
    eta_stderr: np.ndarray
    sample_count: int
    max_abs_mean: float


def estimate_correlations(realizations) -> EmpiricalCorrelations:
    """Unbiased sample means of z*_a(t_i) z_b(t_j) and z_a(t_i) z_b(t_j) with
    their standard errors, from >= 2 realizations on a common grid.  Accepts a
    list of NoiseRealization or a stacked (M, n, N) array plus grid via tuple."""
    if isinstance(realizations, tuple):
        z, grid = realizations
        z = np.asarray(z)
    else:
        realizations = list(realizations)
        if len(realizations) < 2:
            raise ValueError("need at least 2 realizations")
        grid = realizations[0].grid
        for nr in realizations:
            if len(nr.grid) != len(grid) or np.max(np.abs(nr.grid - grid)) > 1e-12:
                raise ValueError("realizations must share a common grid")
        z = np.stack([nr.values for nr in realizations])
    m = z.shape[0]
    if m < 2:
        raise ValueError("need at least 2 realizations")
    abs2 = np.abs(z) ** 2
    chi_hat = np.einsum("mai,mbj->abij", np.conj(z), z) / m
    eta_hat = np.einsum("mai,mbj->abij", z, z) / m
    second = np.einsum("mai,mbj->abij", abs2, abs2) / m
    fac = m / (m - 1.0)
    chi_var = np.clip(fac * (second - np.abs(chi_hat) ** 2), 0.0, None)
    eta_var = np.clip(fac * (second - np.abs(eta_hat) ** 2), 0.0, None)
    mean_z = z.mean(axis=0)
    return EmpiricalCorrelations(
        grid=np.asarray(grid, dtype=float),
        chi_hat=chi_hat,
        eta_hat=eta_hat,
        chi_stderr=np.sqrt(chi_var / m),
        eta_stderr=np.sqrt(eta_var / m),
        sample_count=m,
        max_abs_mean=float(np.max(np.abs(mean_z))),
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"NMSSEZ01"


def dump_realizations(path, realizations) -> None:
    """Binary columnar dump: header (n, N, M, grid) then per-realization
    interleaved re/im float64 payload."""
    realizations = list(realizations)
    n = realizations[0].n_channels
    grid = realizations[0].grid
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<qqq", n, len(grid), len(realizations)))
        grid.astype("<f8").tofile(f)
        for nr in realizations:
            inter = np.empty(nr.values.size * 2)
            inter[0::2] = nr.values.real.ravel()
            inter[1::2] = nr.values.imag.ravel()
            inter.astype("<f8").tofile(f)


def load_realizations(path) -> list[NoiseRealization]:
    with open(path, "rb") as f:
        if f.read(8) != _DUMP_MAGIC:
            raise ValueError("not a noise dump file")
        n, n_times, m = struct.unpack("<qqq", f.read(24))
        grid = np.fromfile(f, dtype="<f8", count=n_times)
        out = []
        for _ in range(m):
            inter = np.fromfile(f, dtype="<f8", count=2 * n * n_times)
            values = (inter[0::2] + 1j * inter[1::2]).reshape(n, n_times)
            out.append(NoiseRealization(grid=grid, values=values))
    return out


def correlations_to_csv(emp: EmpiricalCorrelations, path) -> None:
    """CSV of the empirical correlations, columns
    (i, j, alpha, beta, re_chi, im_chi, re_eta, im_eta)."""
    n = emp.chi_hat.shape[0]
    n_times = emp.chi_hat.shape[2]
    with open(path, "w") as f:
        f.write("i,j,alpha,beta,re_chi,im_chi,re_eta,im_eta\n")
        for i in range(n_times):
            for j in range(n_times):
                for a in range(n):
                    for b in range(n):
                        c = emp.chi_hat[a, b, i, j]
                        e = emp.eta_hat[a, b, i, j]
                        f.write(
                            f"{i},{j},{a},{b},{c.real:.17g},{c.imag:.17g},"
                            f"{e.real:.17g},{e.imag:.17g}\n"
                        )
