"""
Unit tests for the shared numerical helpers.
"""

import sys
import os
import unittest
import math

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qbus.math_utils import (
    csqrt,
    is_hermitian,
    max_abs,
    normalize,
    psd_floor,
    sinc,
    trace_distance,
    trace_norm,
)


# ═══════════════════════════════════════════════════════════════════
#  SCALAR FUNCTIONS
# ═══════════════════════════════════════════════════════════════════

class TestScalarFunctions(unittest.TestCase):
    """Branch conventions of csqrt and sinc."""

    def test_csqrt_negative_real_is_positive_imaginary(self):
        """sqrt(-4) takes the principal branch, 2i."""
        self.assertEqual(csqrt(-4.0), 2j)

    def test_csqrt_positive_real(self):
        self.assertEqual(csqrt(9.0), 3.0 + 0j)

    def test_sinc_at_zero(self):
        self.assertAlmostEqual(abs(sinc(0.0) - 1.0), 0.0, places=12)

    def test_sinc_known_value(self):
        """sinc(pi/2) = 2/pi."""
        self.assertAlmostEqual(sinc(math.pi / 2.0).real, 2.0 / math.pi, places=12)

    def test_sinc_imaginary_argument(self):
        """sin(i)/i = sinh(1)."""
        self.assertAlmostEqual(abs(sinc(1j) - math.sinh(1.0)), 0.0, places=12)


# ═══════════════════════════════════════════════════════════════════
#  MATRIX HELPERS
# ═══════════════════════════════════════════════════════════════════

class TestMatrixHelpers(unittest.TestCase):
    """Residual norms and density-matrix utilities."""

    def test_max_abs(self):
        self.assertEqual(max_abs(np.array([[1.0, -3.0], [2j, 0.5]])), 3.0)
        self.assertEqual(max_abs(np.zeros((0, 0))), 0.0)

    def test_is_hermitian(self):
        self.assertTrue(is_hermitian(np.array([[1.0, 1j], [-1j, 2.0]])))
        self.assertFalse(is_hermitian(np.array([[0.0, 1.0], [0.0, 0.0]])))

    def test_trace_norm_of_non_hermitian_raises(self):
        with self.assertRaises(ValueError):
            trace_norm(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_trace_distance_of_orthogonal_states(self):
        rho = np.diag([1.0, 0.0]).astype(complex)
        sigma = np.diag([0.0, 1.0]).astype(complex)
        self.assertAlmostEqual(trace_distance(rho, sigma), 1.0, places=12)
        self.assertAlmostEqual(trace_distance(rho, rho), 0.0, places=12)

    def test_trace_distance_shape_mismatch_raises(self):
        with self.assertRaises(ValueError):
            trace_distance(np.eye(2), np.eye(3))

    def test_psd_floor(self):
        self.assertAlmostEqual(psd_floor(np.diag([0.25, -0.1])), -0.1, places=12)

    def test_normalize(self):
        v = normalize(np.array([3.0, 4.0j]))
        self.assertAlmostEqual(np.linalg.norm(v), 1.0, places=12)
        with self.assertRaises(ValueError):
            normalize(np.zeros(3))


if __name__ == "__main__":
    unittest.main()
