"""
Numerical helpers shared by the analytic and Fock-space modules.

Branch-consistent complex square roots, an entire sinc, matrix residual
norms and a few density-matrix utilities.
"""

import numpy as np

Matrix = np.ndarray


def csqrt(x) -> complex:
    """
    Principal complex square root.

    For negative reals this returns i·sqrt(|x|), which is the convention the
    closed-form solutions use on the hyperbolic branch.
    """
    return complex(np.emath.sqrt(complex(x)))


def sinc(x) -> complex:
    """sin(x)/x, entire in x (complex arguments allowed)."""
    # np.sinc is normalised: sin(pi y)/(pi y)
    return complex(np.sinc(np.asarray(x, dtype=complex) / np.pi))


def max_abs(m: Matrix) -> float:
    """Infinity norm used for residual checks (largest absolute entry)."""
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(m)))


def is_hermitian(m: Matrix, atol: float = 1e-12) -> bool:
    """Check m == m^dagger elementwise."""
    return max_abs(m - m.conj().T) <= atol


def trace_norm(m: Matrix) -> float:
    """Trace norm of a Hermitian matrix (sum of absolute eigenvalues)."""
    if not is_hermitian(m, atol=1e-10):
        raise ValueError("trace_norm expects a Hermitian matrix")
    h = 0.5 * (m + m.conj().T)
    return float(np.sum(np.abs(np.linalg.eigvalsh(h))))


def trace_distance(rho: Matrix, sigma: Matrix) -> float:
    """Trace distance 0.5·||rho - sigma||_1."""
    if rho.shape != sigma.shape:
        raise ValueError(f"Shape mismatch: {rho.shape} vs {sigma.shape}")
    return 0.5 * trace_norm(rho - sigma)


def psd_floor(m: Matrix) -> float:
    """Smallest eigenvalue of a Hermitian matrix."""
    h = 0.5 * (m + m.conj().T)
    return float(np.min(np.linalg.eigvalsh(h)))


def normalize(v: np.ndarray) -> np.ndarray:
    """Return unit vector in the same direction. Zero vector raises."""
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("Cannot normalise a zero vector")
    return v / n

