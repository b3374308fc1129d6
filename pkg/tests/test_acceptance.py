"""
Long-running regression suite over full parameter ranges.

Enabled with QBUS_ACCEPTANCE=1; several minutes of runtime in total.
"""

import sys
import os
import unittest
import math

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qbus.analytic import SystemConfig, full_transform
from qbus.fockspace import FockBasisSpec, evolve, fock_state
from qbus.pulsedesign import amplitude_error, ep_pulse, qst_pulse
from qbus.tasks import (
    EpTask, InputState, Numerics, QstTask, WTransferSpec, compare_correction,
    design_w_couplings, excitation_trace, ideal_transfer_amplitudes, min_ep_time, run_ep,
    run_qst, sender_residuals, sweep_jitter, sweep_m, sweep_phase, sweep_temperature,
)

ENABLED = os.environ.get("QBUS_ACCEPTANCE") == "1"
M_RANGE = range(5, 18)


@unittest.skipUnless(ENABLED, "set QBUS_ACCEPTANCE=1 to run")
class TestOracleAgreement(unittest.TestCase):
    """Fock-space amplitudes against the analytic transform."""

    def test_single_excitation_rows(self):
        basis = FockBasisSpec.for_modes(2, 12)
        for m in (5, 8, 11, 17):
            p = qst_pulse(m)
            cfg = SystemConfig.build(p.g_prime)
            vac = evolve(fock_state(0, basis), cfg, p.tau).vector[0]
            one = evolve(fock_state(1, basis, "a1"), cfg, p.tau).vector
            u_a = full_transform(cfg, p.tau).u_a
            for k in range(3):
                occ = [0, 0, 0]
                occ[k] = 1
                amp = one[np.ravel_multi_index(occ, basis.dims)]
                self.assertLess(abs(amp - vac * u_a[k, 0]), 1e-5, f"m={m} k={k}")

    def test_excitation_number_restored(self):
        for m in (5, 8, 16):
            tr = excitation_trace(m)
            self.assertLess(tr["end_deviation"], 1e-5, f"m={m}")
        self.assertGreater(excitation_trace(5)["max_deviation"], 1e-2)
        self.assertLess(excitation_trace(5, rwa_generator=True)["max_deviation"], 1e-10)


@unittest.skipUnless(ENABLED, "set QBUS_ACCEPTANCE=1 to run")
class TestTransferAcceptance(unittest.TestCase):
    """Transfer quality over the full m range."""

    def test_fock_tradeoff(self):
        rows = sweep_m(InputState.fock(1), M_RANGE, ["optimized"])
        for r in rows:
            self.assertAlmostEqual(r["infidelity"], amplitude_error(r["m"]) ** 2, delta=1e-4)
        for n in (2, 3):
            for r in sweep_m(InputState.fock(n), M_RANGE, ["optimized"]):
                g = amplitude_error(r["m"])
                bound = 0.3 * n * n * g ** 4 + 1e-4
                self.assertLessEqual(abs(r["infidelity"] - n * g * g), bound, f"n={n} m={r['m']}")

    def test_thermal_immunity(self):
        temps = [0.0, 1.0, 2.0, 3.0]
        for inp in (InputState.fock(1), InputState.coherent(1j)):
            opt_rows = sweep_temperature(inp, 6, temps)
            self.assertEqual([r["status"] for r in opt_rows], ["ok"] * len(temps))
            opt = [r["infidelity"] for r in opt_rows]
            self.assertLess(max(opt) - min(opt), 1e-5, inp.label())
            rwa = [r["infidelity"] for r in sweep_temperature(inp, 6, temps, method="rwa")]
            self.assertTrue(all(a < b for a, b in zip(rwa, rwa[1:])), inp.label())

    def test_phase_independence(self):
        phases = list(np.linspace(0.0, 2.0 * math.pi, 16, endpoint=False))
        opt = np.array([r["infidelity"] for r in sweep_phase(1.0, 5, phases)])
        self.assertLess(np.ptp(opt), 1e-6)
        rwa = np.array([r["infidelity"] for r in sweep_phase(1.0, 5, phases, "rwa")])
        self.assertGreater(np.ptp(rwa), 1e-4)
        spectrum = np.abs(np.fft.rfft(rwa - rwa.mean()))
        self.assertEqual(int(np.argmax(spectrum[1:])) + 1, 2)

    def test_cat_state_with_correction(self):
        row = compare_correction(InputState.cat(1.2), [11])[0]
        self.assertAlmostEqual(row["fidelity"], 0.9819, delta=0.002)
        self.assertAlmostEqual(row["fidelity_corrected"], 0.9922, delta=0.002)
        auto = run_qst(QstTask(InputState.cat(1.2), 11, apply_correction=True),
                       Numerics(trunc="auto"))
        self.assertAlmostEqual(auto.fidelity, 0.9922, delta=0.002)

    def test_jitter_robustness(self):
        rows = sweep_jitter(InputState.fock(1), range(5, 12), [0.05 * 2.0 * math.pi])
        for r in rows:
            self.assertLess(r["increase"], 0.01, f"m={r['m']}")

    def test_optimized_dominates_rwa(self):
        states = [InputState.fock(n) for n in (1, 2, 3)]
        states += [InputState.coherent(a) for a in (0.6, 1.0, 1.4)]
        for inp in states:
            rows = sweep_m(inp, M_RANGE, ["optimized", "rwa"], numerics=Numerics(workers=4))
            for opt, rwa in zip(rows[0::2], rows[1::2]):
                self.assertLessEqual(opt["infidelity"], rwa["infidelity"],
                                     f"{inp.label()} m={opt['m']}")


@unittest.skipUnless(ENABLED, "set QBUS_ACCEPTANCE=1 to run")
class TestEntanglementAcceptance(unittest.TestCase):
    """Bell and W states over the EP index range; W-transfer design."""

    def test_bell_states(self):
        for m in range(2, 8):
            r = run_ep(EpTask((1.0, 1.0), m), n_samples=20)
            self.assertGreaterEqual(r.fidelity, 1.0 - 1e-6, f"m={m}")
            self.assertAlmostEqual(r.final_negativity, 1.0, delta=1e-6)

    def test_fastest_pulse(self):
        p = min_ep_time(4)
        self.assertAlmostEqual(p.zeta, 10.0 / 3.0, places=14)
        self.assertAlmostEqual(p.theta, math.sqrt(10.0) / 2.0 * math.pi, places=14)
        self.assertEqual(p.theta, ep_pulse(2).theta)

    def test_three_node_w_state(self):
        r = run_ep(EpTask((1.0, 1.0, 1.0), 2), n_samples=5)
        self.assertGreaterEqual(r.fidelity, 1.0 - 1e-6)

    def test_w_transfer_design(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            c = rng.normal(size=2)
            c /= np.linalg.norm(c)
            spec = WTransferSpec.with_scale(tuple(c))
            k = design_w_couplings(spec).k
            self.assertLess(np.max(np.abs(sender_residuals(c, k))), 1e-12)
            amps = ideal_transfer_amplitudes(c, k)
            fid = abs(np.dot(np.concatenate([np.zeros(2), c]), amps)) ** 2
            self.assertAlmostEqual(fid, 1.0, delta=1e-10)
            self.assertEqual(k[2] / k[3], spec.amplitudes[0] / spec.amplitudes[1])


if __name__ == "__main__":
    unittest.main()
