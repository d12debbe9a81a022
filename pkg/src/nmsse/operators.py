"""Small dense-matrix helpers shared across the package.

Everything here assumes desk-scale Hilbert spaces (dim <= 8), so dense
numpy arrays and eigendecompositions are always the right tool.
"""

import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)

NAMED_OPERATORS = {
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "sigma_minus": SIGMA_MINUS,
    "sigma_plus": SIGMA_PLUS,
    "identity": IDENTITY_2,
}


def dag(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return a.conj().T


def is_hermitian(a: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(a - dag(a))) <= tol)


def is_unitary(u: np.ndarray, tol: float = 1e-12) -> bool:
    n = u.shape[0]
    if u.shape != (n, n):
        return False
    return bool(np.max(np.abs(u @ dag(u) - np.eye(n))) <= tol)


def hermitian_propagator(h: np.ndarray, tau: float) -> np.ndarray:
    """exp(-i*h*tau) for Hermitian h, via eigendecomposition."""
    evals, vecs = np.linalg.eigh(h)
    return (vecs * np.exp(-1j * evals * tau)) @ dag(vecs)


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random unitary from the QR of a complex Ginibre matrix."""
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # fix the phase ambiguity so the distribution is Haar
    q = q * (np.diagonal(r) / np.abs(np.diagonal(r)))
    return q


def outer_batch(psis: np.ndarray) -> np.ndarray:
    """|psi><psi| for a batch of kets, shape (M, d) -> (M, d, d)."""
    return psis[:, :, None] * psis.conj()[:, None, :]
