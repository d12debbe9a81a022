"""Monte Carlo verification of the Novikov identity for complex Gaussian noises.

For any functional M of the noises, Gaussianity implies

    < z(t) M[{z}] > = int_0^t ds chi*(t,s) < dM / dz*(s) >
                    + int_0^t ds eta (t,s) < dM / dz (s) >.

Four functional families with closed-form derivatives are shipped; the left
side is estimated by sampling, the right side by the same trapezoid rule the
sampling grid induces, so both sides share their discretization error.
Functional-derivative deltas at the integration endpoint are avoided by
restricting point times to the open interval (0, t).
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kernels import CorrelationKernel, build_block_covariance
from .noise import RngStreamSpec, build_path_sampler

KINDS = ("linear-z", "linear-z-star", "point-z-star", "cubic-wick")


@dataclass(frozen=True)
class TestFunctional:
    """One verifiable functional of a single noise channel.

    kind:
      linear-z      M = int f(s) z(s)  ds   over [0, t]
      linear-z-star M = int f(s) z*(s) ds   over [0, t]
      point-z-star  M = z*(s0),             points = (s0,)
      cubic-wick    M = z(s1) z(s2) z*(s3), points = (s1, s2, s3)
    """

    kind: str
    weight: np.ndarray | None = None  # f on the full sampling grid
    points: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=complex)
            if not np.all(np.isfinite(w)):
                raise ValueError("weight function must be finite on the grid")
            object.__setattr__(self, "weight", w)


class NovikovReport(NamedTuple):
    kind: str
    t: float
    lhs: complex
    stderr: float
    rhs: complex
    residual: float
    z_score: float


def _grid_index(grid: np.ndarray, t: float, name: str, open_interval: bool = False) -> int:
    idx = int(np.argmin(np.abs(grid - t)))
    if abs(grid[idx] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"{name}={t} must lie on the sampling grid")
    if open_interval and not (0 < idx < len(grid) - 1):
        raise ValueError(f"{name}={t} must lie strictly inside (0, t)")
    return idx


def _trapezoid_weights(s: np.ndarray) -> np.ndarray:
    w = np.zeros(len(s))
    if len(s) > 1:
        d = np.diff(s)
        w[:-1] += d / 2.0
        w[1:] += d / 2.0
    return w


def _require_single_channel(k: CorrelationKernel):
    if k.n_channels != 1:
        raise ValueError("shipped Novikov functionals act on a single noise channel")


def evaluate_functional(tf: TestFunctional, z: np.ndarray, grid: np.ndarray, t: float) -> np.ndarray:
    """M[{z}] for a batch of paths z of shape (M, K) on the grid."""
    it = _grid_index(grid, t, "t")
    sub = grid[: it + 1]
    if tf.kind in ("linear-z", "linear-z-star"):
        f = np.ones(len(grid), dtype=complex) if tf.weight is None else tf.weight
        w = _trapezoid_weights(sub) * f[: it + 1]
        vals = z[:, : it + 1]
        if tf.kind == "linear-z-star":
            vals = np.conj(vals)
        return vals @ w
    if tf.kind == "point-z-star":
        j = _grid_index(grid, tf.points[0], "s0", open_interval=True)
        return np.conj(z[:, j])
    j1 = _grid_index(grid, tf.points[0], "s1", open_interval=True)
    j2 = _grid_index(grid, tf.points[1], "s2", open_interval=True)
    j3 = _grid_index(grid, tf.points[2], "s3", open_interval=True)
    return z[:, j1] * z[:, j2] * np.conj(z[:, j3])


def novikov_rhs(tf: TestFunctional, k: CorrelationKernel, grid: np.ndarray, t: float) -> complex:
    """Kernel-integral side of the identity, evaluated analytically (the inner
    means of the shipped kinds are themselves kernel values)."""
    _require_single_channel(k)
    grid = np.asarray(grid, dtype=float)
    it = _grid_index(grid, t, "t")
    sub = grid[: it + 1]

    def chi(a, b):
        return complex(k.chi_at(a, b)[0, 0])

    def eta(a, b):
        return complex(k.eta_at(a, b)[0, 0])

    if tf.kind in ("linear-z", "linear-z-star"):
        f = np.ones(len(grid), dtype=complex) if tf.weight is None else tf.weight
        w = _trapezoid_weights(sub) * f[: it + 1]
        if tf.kind == "linear-z":
            vals = k.eta_at(t, sub)[:, 0, 0]  # dM/dz(s) = f(s)
        else:
            vals = np.conj(k.chi_at(t, sub)[:, 0, 0])  # dM/dz*(s) = f(s)
        return complex(np.sum(w * vals))
    if tf.kind == "point-z-star":
        return np.conj(chi(t, tf.points[0]))
    s1, s2, s3 = tf.points
    return (
        np.conj(chi(t, s3)) * eta(s1, s2)
        + eta(t, s1) * chi(s3, s2)
        + eta(t, s2) * chi(s3, s1)
    )


def wick_rhs_brute_force(tf: TestFunctional, k: CorrelationKernel, t: float) -> complex:
    """Independent oracle for the cubic functional: the full four-point Wick
    expansion read off the assembled block covariance (no kernel formulas)."""
    if tf.kind != "cubic-wick":
        raise ValueError("brute-force oracle is for the cubic functional")
    s1, s2, s3 = tf.points
    pts = np.array(sorted({t, s1, s2, s3}))
    kg = build_block_covariance(k, pts)
    n = len(pts)
    b = kg.block

    def pos(x):
        return int(np.argmin(np.abs(pts - x)))

    def pair(p, q):
        # <v_p v_q> with v = (z_0..z_{n-1}, z*_0..z*_{n-1}): conjugating the
        # first factor moves it across the half blocks.
        return b[(p + n) % (2 * n), q]

    idx = [pos(t), pos(s1), pos(s2), pos(s3) + n]  # z(t) z(s1) z(s2) z*(s3)
    p0, p1, p2, p3 = idx
    return pair(p0, p1) * pair(p2, p3) + pair(p0, p2) * pair(p1, p3) + pair(p0, p3) * pair(p1, p2)


def novikov_check(
    tf: TestFunctional,
    k: CorrelationKernel,
    grid: np.ndarray,
    t: float,
    m_samples: int,
    rng,
    chunk: int = 50_000,
) -> NovikovReport:
    """Monte Carlo left side vs analytic right side.  The report's z-score
    uses the total (Re+Im) standard error of the sampled mean."""
    _require_single_channel(k)
    grid = np.asarray(grid, dtype=float)
    it = _grid_index(grid, t, "t")
    sampler = build_path_sampler(k, grid)
    gen = rng.generator() if isinstance(rng, RngStreamSpec) else rng
    total = 0.0 + 0.0j
    total_abs2 = 0.0
    done = 0
    while done < m_samples:
        mc = min(chunk, m_samples - done)
        z = sampler.sample_batch(gen, mc)[:, 0, :]  # (mc, K)
        x = z[:, it] * evaluate_functional(tf, z, grid, t)
        total += x.sum()
        total_abs2 += float(np.sum(np.abs(x) ** 2))
        done += mc
    lhs = total / m_samples
    var = max(total_abs2 / m_samples - abs(lhs) ** 2, 0.0) * m_samples / (m_samples - 1)
    stderr = float(np.sqrt(var / m_samples))
    rhs = novikov_rhs(tf, k, grid, t)
    residual = abs(lhs - rhs)
    z_score = residual / stderr if stderr > 0 else (0.0 if residual < 1e-12 else np.inf)
    return NovikovReport(
        kind=tf.kind, t=float(t), lhs=complex(lhs), stderr=stderr,
        rhs=complex(rhs), residual=float(residual), z_score=float(z_score),
    )


def default_batch(kernels: dict, grid: np.ndarray) -> list[tuple[str, TestFunctional, CorrelationKernel, float]]:
    """The standard 20-combination verification batch: all four functional
    kinds at several times on each supplied kernel."""
    grid = np.asarray(grid, dtype=float)
    t_end = float(grid[-1])
    mid = float(grid[len(grid) // 2])
    q1 = float(grid[len(grid) // 4])
    q3 = float(grid[(3 * len(grid)) // 4])
    combos = []
    for kname, k in kernels.items():
        for t in (t_end, mid):
            combos.append((kname, TestFunctional("linear-z"), k, t))
        combos.append((kname, TestFunctional("linear-z-star"), k, t_end))
        combos.append((kname, TestFunctional("point-z-star", points=(mid,)), k, t_end))
        combos.append((kname, TestFunctional("cubic-wick", points=(q1, mid, q3)), k, t_end))
    return combos
