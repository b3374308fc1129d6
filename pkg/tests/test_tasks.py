"""
Unit tests for the experiment drivers.

Covers:
  - Input parsing and task validation
  - State transfer: fidelity against G(m)^2, phase correction,
    thermal-channel immunity, sweeps and failure markers
  - Rotation geometry and channel restoration
  - W-type transfer coupling design
  - Entanglement preparation
"""

import sys
import os
import unittest
import math
from unittest.mock import patch

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qbus import tasks
from qbus.errors import StepSizeError, TruncationError, UnboundedPotentialError, ValidationError
from qbus.fockspace import EvolveOptions, FockBasisSpec, FockSettings
from qbus.pulsedesign import amplitude_error, ep_pulse, ideal_coefficients, qst_pulse
from qbus.tasks import (
    EpTask, InputState, Numerics, QstTask, RunFailure, WTransferSpec, channel_fock_scan,
    compare_correction, design_w_couplings, excitation_trace, fan_out, grow_until_fits,
    ideal_transfer_amplitudes, min_ep_time, rotation_geometry, rotation_series, run_ep,
    run_ep_then_continue, run_qst, run_w_transfer, sender_residuals, sweep_jitter, sweep_m,
    sweep_phase, sweep_temperature, transfer_receiver,
)


# ═══════════════════════════════════════════════════════════════════
#  INPUTS AND TASKS
# ═══════════════════════════════════════════════════════════════════

class TestInputState(unittest.TestCase):
    """Parsing of "kind:value[@phase]" inputs."""

    def test_fock(self):
        s = InputState.parse("fock:3")
        self.assertEqual(s.kind, "fock")
        self.assertEqual(s.n, 3)
        self.assertEqual(s.label(), "fock:3")
        self.assertEqual(s.min_cutoff(), 5)

    def test_coherent_with_phase(self):
        s = InputState.parse(" Coherent:1.5@0.3 ")
        self.assertEqual(s.kind, "coherent")
        self.assertAlmostEqual(abs(s.value), 1.5, places=14)
        self.assertAlmostEqual(np.angle(s.value), 0.3, places=14)
        self.assertAlmostEqual(s.mean_n, 2.25, places=14)

    def test_cat_mean_number(self):
        """Even cat: <n> = |a|^2 tanh |a|^2."""
        s = InputState.parse("cat:1.2")
        self.assertAlmostEqual(s.mean_n, 1.44 * math.tanh(1.44), places=14)
        self.assertEqual(s.label(), "cat:1.2@0")

    def test_default_cutoff(self):
        self.assertEqual(InputState.fock(1).cutoff(), 10)

    def test_rejects_bad_inputs(self):
        for text in ("squeezed:1", "fock:1.5", "fock:x", "fock:-1"):
            with self.assertRaises(ValidationError, msg=text):
                InputState.parse(text)


class TestQstTask(unittest.TestCase):
    """Parameter checks on transfer tasks."""

    def test_unbounded_index(self):
        with self.assertRaises(UnboundedPotentialError):
            QstTask(InputState.fock(1), 1)

    def test_unknown_method(self):
        with self.assertRaises(ValidationError):
            QstTask(InputState.fock(1), 5, method="dressed")

    def test_correction_needs_optimized_pulse(self):
        with self.assertRaises(ValidationError) as ctx:
            QstTask(InputState.fock(1), 5, apply_correction=True, method="rwa")
        self.assertEqual(ctx.exception.key, "apply_correction")

    def test_negative_temperature(self):
        with self.assertRaises(ValidationError):
            QstTask(InputState.fock(1), 5, channel_temp=-1.0)

    def test_rwa_pulse_shares_coupling(self):
        opt = QstTask(InputState.fock(1), 7).pulse()
        rwa = QstTask(InputState.fock(1), 7, method="rwa").pulse()
        self.assertAlmostEqual(rwa.g_prime, opt.g_prime, places=14)
        self.assertAlmostEqual(rwa.g_prime * rwa.tau, math.pi, places=12)


# ═══════════════════════════════════════════════════════════════════
#  STATE TRANSFER
# ═══════════════════════════════════════════════════════════════════

class TestQstRun(unittest.TestCase):
    """Single transfers through the oracle."""

    def test_fock_infidelity_is_g_squared(self):
        """|1> loses exactly |K11|^2 = G(m)^2."""
        r = run_qst(QstTask(InputState.fock(1), 5))
        self.assertAlmostEqual(r.infidelity, amplitude_error(5) ** 2, delta=1e-4)
        self.assertEqual(r.dims, (10, 10, 10))
        self.assertTrue(r.converged)
        self.assertIsNone(r.nominal_infidelity)

    def test_optimized_beats_rwa(self):
        opt = run_qst(QstTask(InputState.fock(1), 6))
        rwa = run_qst(QstTask(InputState.fock(1), 6, method="rwa"))
        self.assertLess(opt.infidelity, rwa.infidelity)

    def test_cutoff_below_input_rejected(self):
        with self.assertRaises(ValidationError):
            run_qst(QstTask(InputState.fock(3), 5), Numerics(trunc=4))

    def test_step_size_propagates(self):
        with self.assertRaises(StepSizeError):
            run_qst(QstTask(InputState.fock(1), 5), Numerics(opts=EvolveOptions(dt=0.5)))

    def test_transfer_receiver_matches_run(self):
        task = QstTask(InputState.fock(1), 5)
        _, fid, d = transfer_receiver(task)
        self.assertEqual(d, 10)
        self.assertAlmostEqual(fid, run_qst(task).fidelity, places=12)

    def test_result_dict(self):
        d = run_qst(QstTask(InputState.fock(1), 5)).to_dict()
        self.assertEqual(d["pulse"]["kind"], "QST")
        self.assertEqual(d["dims"], [10, 10, 10])


class TestPhaseCorrection(unittest.TestCase):
    """Local rotation e^{-i theta_r n} on the receiver."""

    def test_fock_fidelity_unchanged(self):
        row = compare_correction(InputState.fock(1), [5])[0]
        self.assertAlmostEqual(row["fidelity"], row["fidelity_corrected"], delta=1e-8)

    def test_coherent_fidelity_improves(self):
        row = compare_correction(InputState.coherent(1.0), [5])[0]
        self.assertGreater(row["fidelity_corrected"], row["fidelity"])
        self.assertAlmostEqual(row["theta_r"], math.asin(amplitude_error(5)), places=12)

    def test_corrected_run_reports_flag(self):
        r = run_qst(QstTask(InputState.coherent(1.0), 5, apply_correction=True))
        self.assertTrue(r.apply_correction)
        self.assertGreater(r.fidelity, run_qst(QstTask(InputState.coherent(1.0), 5)).fidelity)


class TestThermalChannel(unittest.TestCase):
    """Transfer with a thermally occupied channel."""

    def test_optimized_pulse_ignores_channel_temperature(self):
        rows = sweep_temperature(InputState.fock(1), 6, [0.0, 0.5])
        self.assertEqual([r["status"] for r in rows], ["ok", "ok"])
        self.assertLess(abs(rows[0]["infidelity"] - rows[1]["infidelity"]), 1e-5)

    def test_rwa_degrades_with_temperature(self):
        rows = sweep_temperature(InputState.fock(1), 6, [0.0, 0.5], method="rwa")
        self.assertGreater(rows[1]["infidelity"], rows[0]["infidelity"])

    def test_warm_channel_immunity(self):
        """At T = omega the thermal tail reaches the nodes; the result still matches T = 0."""
        rows = sweep_temperature(InputState.fock(1), 6, [0.0, 1.0])
        self.assertEqual([r["status"] for r in rows], ["ok", "ok"])
        self.assertEqual(rows[1]["dims"], "13x13x26")
        self.assertLess(abs(rows[0]["infidelity"] - rows[1]["infidelity"]), 1e-5)

    def test_node_levels_grow_with_temperature(self):
        self.assertEqual([tasks.thermal_node_levels(t) for t in (0.0, 0.5, 1.0, 2.0, 3.0)],
                         [0, 6, 10, 17, 24])

    def test_basis_sized_up_to_t3(self):
        """The hottest tabulated channel gets node and channel cutoffs to match."""
        settings = Numerics().settings
        basis = tasks._qst_basis(InputState.fock(1), 10, 3.0, 1.0, settings)
        self.assertEqual(basis.dims, (27, 27, 63))
        cold = tasks._qst_basis(InputState.fock(1), 10, 0.0, 1.0, settings)
        self.assertEqual(cold.dims, (10, 10, 10))


class TestSweeps(unittest.TestCase):
    """Table-producing sweeps and their failure markers."""

    def test_sweep_m_rows(self):
        rows = sweep_m(InputState.fock(1), [5, 6], ["optimized"])
        self.assertEqual([r["m"] for r in rows], [5, 6])
        for r in rows:
            self.assertEqual(r["status"], "ok")
            self.assertEqual(r["dims"], "10x10x10")
            self.assertAlmostEqual(r["predicted"], amplitude_error(r["m"]) ** 2, places=14)
            self.assertAlmostEqual(r["infidelity"], r["predicted"], delta=1e-4)

    def test_sweep_m_order_with_workers(self):
        """Thread-pool results keep the (m, method) input order."""
        rows = sweep_m(InputState.fock(1), [6, 5], ["optimized", "rwa"],
                       numerics=Numerics(workers=2))
        self.assertEqual([(r["m"], r["method"]) for r in rows],
                         [(6, "optimized"), (6, "rwa"), (5, "optimized"), (5, "rwa")])

    def test_failed_points_kept(self):
        """A step-size failure becomes a status row when keep_going is set."""
        numerics = Numerics(opts=EvolveOptions(dt=0.5))
        rows = sweep_m(InputState.fock(1), [5], ["optimized"], numerics=numerics,
                       keep_going=True)
        self.assertEqual(rows[0]["status"], "failed: StepSizeError")
        self.assertIsNone(rows[0]["infidelity"])
        self.assertFalse(rows[0]["converged"])

    def test_phase_independence(self):
        """Coherent-state infidelity does not depend on arg(alpha)."""
        rows = sweep_phase(1.0, 5, [0.0, math.pi / 2.0, math.pi])
        values = [r["infidelity"] for r in rows]
        self.assertLess(max(values) - min(values), 1e-6)
        self.assertEqual([r["phi"] for r in rows], [0.0, math.pi / 2.0, math.pi])

    def test_jitter_rows(self):
        rows = sweep_jitter(InputState.fock(1), [5], [0.0, 0.3])
        self.assertEqual(rows[0]["increase"], 0.0)
        self.assertGreaterEqual(rows[1]["increase"], 0.0)
        self.assertAlmostEqual(rows[1]["nominal_infidelity"], rows[0]["infidelity"], delta=1e-6)

    def test_jitter_durations(self):
        durations, nominal = tasks._jitter_durations(10.0, 0.5)
        self.assertEqual(len(durations), 23)
        self.assertEqual(nominal, 11)
        self.assertAlmostEqual(durations[nominal], 10.0, places=12)
        self.assertEqual(tasks._jitter_durations(10.0, 0.0), ([10.0], 0))

    def test_clipped_jitter_keeps_nominal_sample(self):
        """With tau - jitter < 0 the scan starts at 0 and still samples tau."""
        durations, nominal = tasks._jitter_durations(0.3, 0.5)
        self.assertEqual(durations[0], 0.0)
        self.assertEqual(durations[nominal], 0.3)
        self.assertAlmostEqual(durations[-1], 0.8, places=12)
        self.assertTrue(all(a <= b for a, b in zip(durations, durations[1:])))


class TestFanOut(unittest.TestCase):
    """Ordered parallel map."""

    @staticmethod
    def _fragile(x):
        if x % 2:
            raise StepSizeError(f"odd {x}")
        return x * 10

    def test_keep_going_inserts_markers(self):
        out = fan_out(self._fragile, range(4), workers=2, keep_going=True)
        self.assertEqual(out[0], 0)
        self.assertEqual(out[2], 20)
        self.assertIsInstance(out[1], RunFailure)
        self.assertEqual(out[3].status, "failed: StepSizeError")

    def test_failure_aborts_without_keep_going(self):
        with self.assertRaises(StepSizeError):
            fan_out(self._fragile, range(4))

    def test_other_errors_always_propagate(self):
        def broken(_):
            raise ValidationError("bad")
        with self.assertRaises(ValidationError):
            fan_out(broken, [1], keep_going=True)

    def test_truncation_failures_are_caught(self):
        def tight(_):
            raise TruncationError("c", 1e-3, 1e-5)
        self.assertEqual(fan_out(tight, [1], keep_going=True)[0].kind, "TruncationError")


class TestGrowUntilFits(unittest.TestCase):
    """Widening the mode that overflowed."""

    @staticmethod
    def _needs_channel(levels):
        def run(basis):
            if basis.dims[-1] < levels:
                raise TruncationError("c", 1e-3, 1e-5)
            return basis.total
        return run

    def test_overflowing_mode_is_widened(self):
        basis = FockBasisSpec.for_modes(2, 4)
        total, used = grow_until_fits(self._needs_channel(11), basis)
        self.assertEqual(used.dims, (4, 4, 12))
        self.assertEqual(total, 4 * 4 * 12)

    def test_explicit_cutoff_is_not_widened(self):
        with self.assertRaises(TruncationError):
            grow_until_fits(self._needs_channel(11), FockBasisSpec.for_modes(2, 4), grow=False)

    def test_growth_is_capped(self):
        settings = FockSettings(max_cutoff=8)
        with self.assertRaises(TruncationError):
            grow_until_fits(self._needs_channel(100), FockBasisSpec.for_modes(2, 4), settings)


# ═══════════════════════════════════════════════════════════════════
#  ROTATION AND CHANNEL RESTORATION
# ═══════════════════════════════════════════════════════════════════

class TestRotationGeometry(unittest.TestCase):
    """K11 and K21 as the sum and difference of two half-vectors."""

    def test_geometry_matches_coefficients(self):
        for m in range(3, 11):
            g = rotation_geometry(m)
            k11, k21 = ideal_coefficients(qst_pulse(m))
            self.assertLess(abs(g.k11 - k11), 1e-12)
            self.assertLess(abs(g.k21 - k21), 1e-12)
            self.assertAlmostEqual(abs(g.k11), amplitude_error(m), places=12)

    def test_series_shrinks_with_duration(self):
        rows = rotation_series(range(2, 12))
        self.assertEqual(len(rows), 10)
        taus = [r["tau"] for r in rows]
        angles = [r["theta_r"] for r in rows]
        self.assertTrue(all(a < b for a, b in zip(taus, taus[1:])))
        self.assertTrue(all(a > b for a, b in zip(angles, angles[1:])))


class TestChannelRestoration(unittest.TestCase):
    """The channel is handed back in its initial state."""

    def test_receiver_independent_of_channel_seed(self):
        rows = channel_fock_scan(InputState.fock(1), 8, (0, 1, 2))
        self.assertEqual([r["n_c"] for r in rows], [0, 1, 2])
        for r in rows:
            self.assertLess(r["receiver_distance"], 1e-4)
            self.assertLess(r["channel_distance"], 1e-4)


class TestExcitationTrace(unittest.TestCase):
    """<N_tot> along a transfer pulse."""

    def test_restored_at_pulse_end(self):
        tr = excitation_trace(5, n_samples=20)
        self.assertEqual(len(tr["times"]), 20)
        self.assertLess(tr["end_deviation"], 1e-4)
        self.assertGreater(tr["max_deviation"], tr["end_deviation"])

    def test_rwa_generator_conserves(self):
        tr = excitation_trace(5, n_samples=20, rwa_generator=True)
        self.assertLess(tr["max_deviation"], 1e-9)


# ═══════════════════════════════════════════════════════════════════
#  W-TYPE TRANSFER
# ═══════════════════════════════════════════════════════════════════

class TestWTransferDesign(unittest.TestCase):
    """Sender couplings that empty the sender side."""

    def test_random_two_sender_states(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            angle = rng.uniform(0.05, math.pi / 2.0 - 0.05)
            c = (math.cos(angle), math.sin(angle))
            spec = WTransferSpec.with_scale(c, float(rng.uniform(0.5, 2.0)))
            k = design_w_couplings(spec).k
            self.assertLess(np.max(np.abs(sender_residuals(c, k))), 1e-10)
            amps = ideal_transfer_amplitudes(c, k)
            fid = abs(np.dot(np.concatenate([np.zeros(2), c]), amps)) ** 2
            self.assertAlmostEqual(fid, 1.0, places=10)

    def test_three_senders(self):
        c = (0.5, 0.5, 1.0 / math.sqrt(2.0))
        k = design_w_couplings(WTransferSpec.with_scale(c)).k
        self.assertLess(np.max(np.abs(sender_residuals(c, k))), 1e-10)

    def test_zero_amplitude_sender_decoupled(self):
        c = (0.6, 0.0, 0.8)
        k = design_w_couplings(WTransferSpec.with_scale(c)).k
        self.assertEqual(k[1], 0.0)
        self.assertLess(np.max(np.abs(sender_residuals(c, k))), 1e-10)

    def test_ratio_rule_enforced(self):
        with self.assertRaises(ValidationError) as ctx:
            WTransferSpec((0.6, 0.8), (1.0, 1.0))
        self.assertEqual(ctx.exception.key, "receiver_weights")

    def test_amplitudes_normalised(self):
        with self.assertRaises(ValidationError):
            WTransferSpec.with_scale((0.6, 0.6))
        with self.assertRaises(ValidationError):
            WTransferSpec.with_scale((1.0,))

    def test_full_simulation(self):
        r = run_w_transfer(WTransferSpec.with_scale((0.6, 0.8)), 8)
        self.assertAlmostEqual(r.fidelity_ideal_transform, 1.0, places=10)
        self.assertGreater(r.fidelity_full, 0.9)
        self.assertEqual(len(r.dims), 5)
        self.assertTrue(all(d >= tasks.W_CUTOFF for d in r.dims))

    def test_undersized_cutoff_is_widened(self):
        """Starting from cutoff 4 the overflowing receiver mode is grown, not fatal."""
        explicit = Numerics(trunc=4)
        with self.assertRaises(TruncationError):
            run_w_transfer(WTransferSpec.with_scale((0.6, 0.8)), 8, numerics=explicit)
        with patch.object(tasks, "W_CUTOFF", 4):
            r = run_w_transfer(WTransferSpec.with_scale((0.6, 0.8)), 8)
        self.assertGreater(max(r.dims), 4)
        self.assertGreater(r.fidelity_full, 0.9)


# ═══════════════════════════════════════════════════════════════════
#  ENTANGLEMENT PREPARATION
# ═══════════════════════════════════════════════════════════════════

class TestEntanglementPreparation(unittest.TestCase):
    """One channel excitation spread over the nodes."""

    def test_bell_state(self):
        r = run_ep(EpTask((1.0, 1.0), 2), n_samples=20)
        self.assertGreaterEqual(r.fidelity, 1.0 - 1e-6)
        self.assertAlmostEqual(r.final_negativity, 1.0, delta=1e-6)
        self.assertEqual(len(r.negativity_trace), 20)
        self.assertAlmostEqual(r.negativity_trace[0], 0.0, places=12)

    def test_longer_pulses_fit_the_channel(self):
        """m = 2..4 with equal weights leave no overflow in the seeded channel."""
        for m in (2, 3, 4):
            r = run_ep(EpTask((1.0, 1.0), m), n_samples=5)
            self.assertGreaterEqual(r.fidelity, 1.0 - 1e-5, f"m={m}")
            self.assertGreaterEqual(r.dims[-1], tasks.EP_CHANNEL_CUTOFF)

    def test_rwa_pulse_is_worse(self):
        opt = run_ep(EpTask((1.0, 1.0), 2), n_samples=5)
        rwa = run_ep(EpTask((1.0, 1.0), 2, method="rwa"), n_samples=5)
        self.assertGreater(rwa.infidelity, opt.infidelity)

    def test_invalid_tasks(self):
        with self.assertRaises(ValidationError):
            EpTask((0.0, 0.0), 2)
        with self.assertRaises(UnboundedPotentialError):
            EpTask((1.0, 1.0), 1)

    def test_min_time_independent_of_size(self):
        for n in (2, 3, 10):
            self.assertAlmostEqual(min_ep_time(n).theta, ep_pulse(2).theta, places=14)
        with self.assertRaises(ValidationError):
            min_ep_time(1)

    def test_two_pulses_exchange(self):
        """Holding the coupling for 2 tau acts as the transfer pulse of index 2m."""
        out = run_ep_then_continue((1.0, 1.0), 3)
        self.assertAlmostEqual(out["overlap"], out["expected"], delta=1e-4)
        self.assertAlmostEqual(out["duration"], 2.0 * ep_pulse(3).tau, places=12)

    def test_exchange_needs_two_nodes(self):
        with self.assertRaises(ValidationError):
            run_ep_then_continue((1.0, 1.0, 1.0), 3)


if __name__ == "__main__":
    unittest.main()
