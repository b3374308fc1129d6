"""
═══════════════════════════════════════════════════════════════════════
  STRONGLY COUPLED BOSONIC BUS
  Main Entry Point: Demonstration on Small Instances
═══════════════════════════════════════════════════════════════════════

Nodes a_1..a_n couple to one channel mode c with counterrotating terms
kept. Designed rectangle pulses make the creation-operator block of the
transform vanish at the pulse end, so excitations are conserved there
even though the Hamiltonian breaks the U(1) symmetry.
"""

import sys
import os

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from qbus.analytic import (
    SystemConfig, full_transform, symplectic_residuals, transfer_coefficients,
)
from qbus.pulsedesign import (
    amplitude_error, ep_pulse, ep_residuals, qst_pulse, qst_residuals,
    rotation_angle, speed_limit,
)
from qbus.tasks import (
    EpTask, InputState, QstTask, WTransferSpec, design_w_couplings,
    ideal_transfer_amplitudes, run_ep, run_qst, sender_residuals,
)


def header(title: str) -> None:
    """Print a formatted section header."""
    print("\n")
    print("╔" + "═" * 68 + "╗")
    print(f"║  {title:<66}║")
    print("╚" + "═" * 68 + "╝")


def demo_transforms() -> bool:
    """Exact transform at the end of a QST pulse."""
    header("EXACT BOGOLIUBOV TRANSFORM (m=8 QST PULSE)")
    p = qst_pulse(8)
    cfg = SystemConfig.build(p.g_prime)
    tr = full_transform(cfg, p.tau)
    r1, r2 = symplectic_residuals(tr)
    k = transfer_coefficients(cfg, p.tau)
    print(f"  zeta={p.zeta:.6f}  theta={p.theta:.6f}  g'={p.g_prime:.6f}")
    print(f"  Symplectic residuals: {r1:.2e}, {r2:.2e}")
    print(f"  |K11|={abs(k.k11):.6f}  |K21|={abs(k.k21):.6f}  |Kc1|={abs(k.kc1):.2e}")
    print(f"  |U_B| at tau: {max(abs(x) for x in tr.u_b.ravel()):.2e}")
    print(f"  G(8)={amplitude_error(8):.6f}")
    return r1 < 1e-10 and r2 < 1e-10 and abs(abs(k.k11) - amplitude_error(8)) < 1e-8


def demo_pulses() -> bool:
    """Pulse table and the speed limit."""
    header("OPTIMIZED PULSES")
    ok = True
    print(f"  {'kind':<4} {'m':>3} {'zeta':>12} {'theta':>12} {'theta_r':>12} {'resid':>9}")
    for m in (2, 3, 5, 8):
        p = qst_pulse(m)
        res = max(qst_residuals(p))
        ok &= res < 1e-9
        print(f"  {'QST':<4} {m:>3} {p.zeta:>12.6f} {p.theta:>12.6f} "
              f"{rotation_angle(p):>12.6f} {res:>9.1e}")
    for m in (2, 3):
        p = ep_pulse(m)
        res = max(ep_residuals(p))
        ok &= res < 1e-9
        print(f"  {'EP':<4} {m:>3} {p.zeta:>12.6f} {p.theta:>12.6f} {'':>12} {res:>9.1e}")

    limit = speed_limit(1e-3, 1.0)
    print(f"\n  Speed limit for e_tol=1e-3, <n>=1: m_th={limit.m_th:.4f} "
          f"-> m={limit.m_chosen}, tau={limit.tau_th:.4f}/omega")
    return ok


def demo_qst() -> bool:
    """Fock |1> transfer, optimized against RWA at the same coupling."""
    header("STATE TRANSFER |1> (m=5)")
    opt = run_qst(QstTask(InputState.fock(1), 5))
    rwa = run_qst(QstTask(InputState.fock(1), 5, method="rwa"))
    predicted = amplitude_error(5) ** 2
    print(f"  optimized infidelity: {opt.infidelity:.6e}  (G(m)^2 = {predicted:.6e})")
    print(f"  RWA infidelity:       {rwa.infidelity:.6e}")
    print(f"  cutoffs {opt.dims}, dt={opt.dt:.4f}, {opt.wall_time:.2f}s")
    return abs(opt.infidelity - predicted) < 1e-4 and opt.infidelity <= rwa.infidelity


def demo_entanglement() -> bool:
    """Bell state from one channel excitation."""
    header("ENTANGLEMENT PREPARATION (k1=k2, m=2)")
    r = run_ep(EpTask((1.0, 1.0), 2), n_samples=50)
    print(f"  Bell fidelity: {r.fidelity:.10f}")
    print(f"  E_N at tau:    {r.final_negativity:.10f}  (max {r.max_negativity:.10f})")
    return r.infidelity < 1e-6 and abs(r.final_negativity - 1.0) < 1e-6


def demo_w_transfer() -> bool:
    """Coupling design for a two-sender W state."""
    header("W-TYPE TRANSFER DESIGN (C = 0.6, 0.8)")
    spec = WTransferSpec.with_scale((0.6, 0.8))
    weights = design_w_couplings(spec)
    amps = ideal_transfer_amplitudes(spec.amplitudes, weights.k)
    residual = max(abs(x) for x in sender_residuals(spec.amplitudes, weights.k))
    fid = abs(0.6 * amps[2] + 0.8 * amps[3]) ** 2
    print(f"  weights k = {tuple(round(k, 8) for k in weights.k)}")
    print(f"  sender residual: {residual:.2e}")
    print(f"  ideal-transform fidelity: {fid:.12f}")
    return residual < 1e-12 and abs(fid - 1.0) < 1e-10


def main():
    """Run every demonstration."""
    print("╔" + "═" * 68 + "╗")
    for line in ("STRONGLY COUPLED BOSONIC BUS",
                 "Exact transforms · Pulse design · Fock-space oracle",
                 "Counterrotating terms kept · Excitations conserved at tau"):
        print(f"║  {line:<66}║")
    print("╚" + "═" * 68 + "╝")

    results = [
        demo_transforms(),
        demo_pulses(),
        demo_qst(),
        demo_entanglement(),
        demo_w_transfer(),
    ]
    all_pass = all(results)

    print("\n")
    print("╔" + "═" * 68 + "╗")
    if all_pass:
        print(f"║  {'✓ ALL CHECKS PASSED':<66}║")
    else:
        print(f"║  {'✗ SOME CHECKS FAILED, SEE ABOVE FOR DETAILS':<66}║")
    print("╚" + "═" * 68 + "╝")
    return all_pass


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
