"""
Unit tests for the exact Heisenberg-picture transforms.

Covers:
  - Symplectic structure of random transforms
  - Eigenfrequencies against the ODE generator and the full spectrum
  - The special point and the near-singular window
  - Transfer coefficients at optimized pulses
  - Frames, composition, the RWA baseline and the ideal EP transform
"""

import sys
import os
import unittest
import math

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qbus import analytic
from qbus.analytic import (
    LAB, INTERACTION, CouplingWeights, SystemConfig, analytic_normal_frequencies,
    compose, dark_mode_row, eigen_frequencies, full_transform, ideal_ep_transform,
    is_bounded, m_matrix, normal_mode_frequencies, ode_coefficient_matrix, reorder,
    rwa_transform, special_point_row, symplectic_residuals, to_interaction_frame,
    to_lab_frame, transfer_coefficients, transform_distance, two_node_rows,
    united_mode_transform,
)
from qbus.errors import ValidationError
from qbus.pulsedesign import amplitude_error, ep_pulse, ideal_coefficients, qst_pulse


# ═══════════════════════════════════════════════════════════════════
#  DOMAIN TYPES
# ═══════════════════════════════════════════════════════════════════

class TestSystemConfig(unittest.TestCase):
    """Coupling weights and the effective coupling."""

    def test_g_prime_from_weights(self):
        """g' = g sqrt(sum k^2)."""
        w = CouplingWeights((3.0, 4.0), 0.1)
        self.assertAlmostEqual(w.g_prime, 0.5, places=14)

    def test_build_hits_requested_g_prime(self):
        """build() rescales g so the effective coupling is exact."""
        cfg = SystemConfig.build(0.3, (1.0, 2.0, 0.5))
        self.assertAlmostEqual(cfg.g_prime, 0.3, places=14)
        self.assertAlmostEqual(cfg.zeta, 1.0 / 0.3, places=12)

    def test_zero_weights_rejected(self):
        """All-zero weights leave no coupling to define."""
        with self.assertRaises(ValidationError):
            CouplingWeights((0.0, 0.0), 1.0)

    def test_non_positive_omega_rejected(self):
        """omega must be positive."""
        with self.assertRaises(ValidationError):
            SystemConfig.build(0.2, omega=0.0)

    def test_mode_labels(self):
        """Nodes first, channel last."""
        self.assertEqual(SystemConfig.build(0.2, (1, 1, 1)).mode_labels(),
                         ["a1", "a2", "a3", "c"])


# ═══════════════════════════════════════════════════════════════════
#  SPECTRUM
# ═══════════════════════════════════════════════════════════════════

class TestSpectrum(unittest.TestCase):
    """Eigenfrequencies and boundedness."""

    def test_eigen_frequencies_match_ode_generator(self):
        """Eigenvalues of the (X, P, Xc, Pc) generator are ±i W±."""
        for gp in (0.05, 0.3, 0.49):
            cfg = SystemConfig.build(gp)
            ef = eigen_frequencies(cfg)
            numeric = np.sort(np.abs(np.linalg.eigvals(ode_coefficient_matrix(cfg)).imag))
            expected = np.sort([abs(v) for v in ef.values])
            np.testing.assert_allclose(numeric, expected, atol=1e-12)

    def test_hyperbolic_branch(self):
        """Above g' = omega/2 the minus branch is imaginary."""
        ef = eigen_frequencies(SystemConfig.build(0.8))
        self.assertTrue(ef.hyperbolic)
        self.assertAlmostEqual(ef.omega_minus.real, 0.0, places=14)
        self.assertAlmostEqual(ef.omega_minus.imag, math.sqrt(0.6), places=12)

    def test_normal_modes_of_full_network(self):
        """Dark modes stay at omega; the bright pair sits at sqrt(w(w ± 2g'))."""
        cfg = SystemConfig.build(0.3, (1.0, 2.0, 0.5))
        np.testing.assert_allclose(normal_mode_frequencies(cfg),
                                   analytic_normal_frequencies(cfg), atol=1e-10)

    def test_boundedness(self):
        """Bounded only for 2|g'| < omega."""
        self.assertTrue(is_bounded(SystemConfig.build(0.49)))
        self.assertFalse(is_bounded(SystemConfig.build(0.51)))


# ═══════════════════════════════════════════════════════════════════
#  UNITED MODE
# ═══════════════════════════════════════════════════════════════════

class TestUnitedMode(unittest.TestCase):
    """United-mode row, special point and near-singular window."""

    def test_m_matrix_singular_at_special_point(self):
        """M is undefined at zeta = 2."""
        with self.assertRaises(ValidationError):
            m_matrix(2.0)

    def test_free_evolution(self):
        """g' = 0 leaves the united mode alone in the interaction frame."""
        cfg = SystemConfig(CouplingWeights((1.0, 1.0), 0.0))
        np.testing.assert_allclose(united_mode_transform(cfg, 3.7), [1, 0, 0, 0], atol=0)

    def test_identity_at_t0(self):
        """Every row starts as the identity."""
        row = united_mode_transform(SystemConfig.build(0.3), 0.0)
        np.testing.assert_allclose(row, [1, 0, 0, 0], atol=1e-14)

    def test_matrix_form_equals_entire_form(self):
        """mu M e^{iwt} and the cancellation-free form agree away from zeta = 2."""
        for gp, t in ((0.1, 3.0), (0.3, 7.0), (0.45, 11.0)):
            cfg = SystemConfig.build(gp)
            np.testing.assert_allclose(united_mode_transform(cfg, t),
                                       analytic._entire_row(cfg, t), atol=1e-11)

    def test_special_point_continuity(self):
        """Rows just off zeta = 2 converge to the special-point row."""
        exact = SystemConfig.build(0.5)
        for delta in (1e-6, 1e-7):
            near = SystemConfig.build(0.5 * (1.0 - delta))
            for t in (1.0, 5.0, 10.0):
                diff = np.max(np.abs(united_mode_transform(near, t) - special_point_row(exact, t)))
                self.assertLess(diff, 1e-4)

    def test_special_point_is_symplectic(self):
        """The limit row still gives a valid Bogoliubov transform."""
        tr = full_transform(SystemConfig.build(0.5), 6.0)
        r1, r2 = symplectic_residuals(tr)
        self.assertLess(r1, 1e-10)
        self.assertLess(r2, 1e-10)

    def test_negative_time_rejected(self):
        """Transforms are defined for t >= 0."""
        with self.assertRaises(ValidationError):
            united_mode_transform(SystemConfig.build(0.2), -1.0)


# ═══════════════════════════════════════════════════════════════════
#  FULL TRANSFORM
# ═══════════════════════════════════════════════════════════════════

class TestFullTransform(unittest.TestCase):
    """Symplectic structure and transfer coefficients."""

    def test_random_transforms_are_symplectic(self):
        """A A^† - B B^† = I and A B^T symmetric for 1000 random systems."""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            k = rng.uniform(0.2, 2.0, n)
            cfg = SystemConfig.build(float(rng.uniform(0.01, 0.45)), tuple(k))
            tr = full_transform(cfg, float(rng.uniform(0.0, 20.0)))
            r1, r2 = symplectic_residuals(tr)
            self.assertLess(r1, 1e-10)
            self.assertLess(r2, 1e-10)

    def test_transfer_coefficients_at_qst_pulse(self):
        """K11 and K21 take their closed forms; the channel and U_B vanish."""
        for m in (3, 5, 8, 13):
            p = qst_pulse(m)
            k = transfer_coefficients(SystemConfig.build(p.g_prime), p.tau)
            k11, k21 = ideal_coefficients(p)
            self.assertAlmostEqual(abs(k.k11 - k11), 0.0, places=9)
            self.assertAlmostEqual(abs(k.k21 - k21), 0.0, places=9)
            self.assertAlmostEqual(abs(k.k11), amplitude_error(m), places=9)
            for small in (k.kc1, k.k12, k.k22, k.kc2):
                self.assertLess(abs(small), 1e-9)
            self.assertLess(abs(k.commutator_residual()), 1e-10)

    def test_transfer_coefficients_need_equal_weights(self):
        """Unequal weights are outside the two-node coefficient form."""
        with self.assertRaises(ValidationError):
            transfer_coefficients(SystemConfig.build(0.2, (1.0, 2.0)), 1.0)

    def test_two_node_rows_match_full_transform(self):
        """The united-mode decomposition agrees with the matrix form."""
        cfg = SystemConfig.build(0.25, (1.0, 1.7))
        t = 4.2
        tr = full_transform(cfg, t)
        a1, a2 = two_node_rows(cfg, t)
        np.testing.assert_allclose(a1, tr.row(0), atol=1e-12)
        np.testing.assert_allclose(a2, tr.row(1), atol=1e-12)

    def test_dark_mode_frozen(self):
        """A combination orthogonal to k never moves."""
        tr = full_transform(SystemConfig.build(0.3), 9.0)
        v = np.array([1.0, -1.0]) / math.sqrt(2.0)
        row = dark_mode_row(tr, v)
        np.testing.assert_allclose(row, np.concatenate([v, [0.0], np.zeros(3)]), atol=1e-12)

    def test_ideal_ep_transform(self):
        """At an EP pulse the full transform is the ideal united/channel swap."""
        for m in (2, 3, 5):
            p = ep_pulse(m)
            cfg = SystemConfig.build(p.g_prime, (1.0, 1.0, 1.0))
            tr = full_transform(cfg, p.tau)
            ideal = ideal_ep_transform(cfg, p.theta, m)
            self.assertLess(transform_distance(tr, ideal), 1e-9)

    def test_json_records_frame(self):
        """Serialised transforms carry their frame and labels."""
        doc = full_transform(SystemConfig.build(0.2), 1.0).to_json()
        self.assertEqual(doc["frame"], INTERACTION)
        self.assertEqual(doc["modes"], ["a1", "a2", "c"])
        self.assertEqual(len(doc["u_a"][0][0]), 2)


# ═══════════════════════════════════════════════════════════════════
#  FRAMES, COMPOSITION AND BASELINES
# ═══════════════════════════════════════════════════════════════════

class TestFramesAndComposition(unittest.TestCase):
    """Lab-frame composition and the RWA baseline."""

    def test_composition_is_time_additive(self):
        """T(t1) then T(t2) equals T(t1 + t2)."""
        cfg = SystemConfig.build(0.3, (1.0, 0.6))
        t1, t2 = 2.3, 4.1
        joined = compose(full_transform(cfg, t1), full_transform(cfg, t2))
        self.assertLess(transform_distance(joined, full_transform(cfg, t1 + t2)), 1e-10)

    def test_frame_conversion(self):
        """Lab and interaction frames differ by e^{-i w t}."""
        tr = full_transform(SystemConfig.build(0.2), 1.3)
        lab = to_lab_frame(tr)
        self.assertEqual(lab.frame, LAB)
        np.testing.assert_allclose(lab.u_a, tr.u_a * np.exp(-1.3j), atol=1e-14)
        self.assertLess(transform_distance(to_interaction_frame(lab), tr), 1e-14)

    def test_rwa_swap(self):
        """g' t = pi under RWA maps a1 to -a2."""
        cfg = SystemConfig.build(0.05)
        tr = rwa_transform(cfg, math.pi / 0.05)
        self.assertAlmostEqual(abs(tr.u_a[1, 0] + 1.0), 0.0, places=10)
        self.assertEqual(np.max(np.abs(tr.u_b)), 0.0)

    def test_reorder_labels(self):
        """(a1, a2, c) -> (a1, c, a2)."""
        tr = reorder(full_transform(SystemConfig.build(0.2), 1.0), [0, 2, 1])
        self.assertEqual(tr.mode_labels, ("a1", "c", "a2"))

    def test_arrays_are_read_only(self):
        """Transforms are immutable values."""
        tr = full_transform(SystemConfig.build(0.2), 1.0)
        with self.assertRaises(ValueError):
            tr.u_a[0, 0] = 0.0


if __name__ == "__main__":
    unittest.main()
