"""
Rectangle-pulse design for excitation-conserving transfer and entanglement.

A pulse is the pair (zeta, theta) = (omega/g', omega*tau). The optimized
pulses put both normal branches on whole half-periods at tau, so the
creation-operator block of the transform vanishes at the pulse end:

    QST:  (r+ - r-) theta = 2 pi,   r+ theta = m pi
    EP:   (r+ - r-) theta = pi,     r+ theta = m pi

with r± = sqrt(1 ± 2/zeta). Closed forms use q = 1 - 2/m (QST) or
q = 1 - 1/m (EP):

    zeta  = 2 (q^2 + 1) / (1 - q^2)
    theta = m pi sqrt((q^2 + 1) / 2)
"""

import logging
import math
from dataclasses import dataclass, asdict, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from scipy.optimize import bisect

from qbus.errors import UnboundedPotentialError, UnreachableToleranceError, ValidationError

logger = logging.getLogger(__name__)

M_SEARCH_MAX = 1e6
SNAP_TOL = 1e-8


class PulseKind(str, Enum):
    QST = "QST"
    EP = "EP"
    RWA = "RWA"


# right-hand side of the branch-difference constraint, in units of pi
_SPLIT = {PulseKind.QST: 2, PulseKind.EP: 1}


@dataclass(frozen=True)
class PulseParams:
    """
    A designed rectangle pulse.

    Attributes:
        m:        Integer pulse index (None for a bare RWA pulse).
        zeta:     omega / g'.
        theta:    omega * tau.
        g_prime:  Effective coupling, units of omega.
        tau:      Duration, units of 1/omega.
        kind:     QST, EP or RWA.
        omega:    Mode frequency the physical values refer to.
        note:     Free-form provenance tag (e.g. how an RWA comparison was built).
    """
    m: Optional[int]
    zeta: float
    theta: float
    g_prime: float
    tau: float
    kind: PulseKind
    omega: float = 1.0
    note: str = ""

    @property
    def flags(self) -> List[str]:
        out = []
        if self.kind == PulseKind.QST and self.m is not None:
            if self.m == 2:
                out.append("singular-point")
            if self.m <= 4:
                out.append("ultra-strong")
        if self.note:
            out.append(self.note)
        return out

    def with_omega(self, omega: float) -> "PulseParams":
        """Same dimensionless pulse at another mode frequency."""
        if not (math.isfinite(omega) and omega > 0.0):
            raise ValidationError(f"omega={omega} must be positive", key="omega")
        return replace(self, omega=omega, g_prime=omega / self.zeta,
                       tau=self.theta / omega)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["flags"] = self.flags
        return d


@dataclass(frozen=True)
class TradeoffResult:
    """Outcome of inverting G(m) against an error budget."""
    m_th: float
    m_chosen: int
    theta_th: float
    tau_th: float
    predicted_infidelity: float
    e_tol: float
    mean_n: float

    def to_dict(self) -> Dict:
        return asdict(self)


# ── Closed forms ─────────────────────────────────────────────────

def _zeta_theta(m: float, split: int) -> Tuple[float, float]:
    x = split / m
    one_minus_q2 = x * (2.0 - x)  # 1 - q^2 without cancellation
    q2 = (1.0 - x) ** 2
    zeta = 2.0 * (q2 + 1.0) / one_minus_q2
    theta = m * math.pi * math.sqrt((q2 + 1.0) / 2.0)
    return zeta, theta


def _check_index(m, kind: PulseKind) -> int:
    if isinstance(m, bool) or not float(m).is_integer():
        raise ValidationError(f"pulse index m={m} must be an integer", key="m")
    if m < 2:
        raise UnboundedPotentialError(m, kind.value)
    return int(m)


def _build(m, kind: PulseKind, omega: float) -> PulseParams:
    m = _check_index(m, kind)
    if not (math.isfinite(omega) and omega > 0.0):
        raise ValidationError(f"omega={omega} must be positive", key="omega")
    zeta, theta = _zeta_theta(m, _SPLIT[kind])
    p = PulseParams(m=m, zeta=zeta, theta=theta, g_prime=omega / zeta,
                    tau=theta / omega, kind=kind, omega=omega)
    if p.flags:
        logger.warning(f"{kind.value} pulse m={m} flagged: {', '.join(p.flags)}")
    return p


def qst_pulse(m: int, omega: float = 1.0) -> PulseParams:
    """
    Optimized transfer pulse. m=2 sits on the special point zeta=2;
    m <= 4 is flagged as ultra-strong coupling.
    """
    return _build(m, PulseKind.QST, omega)


def ep_pulse(m: int, omega: float = 1.0) -> PulseParams:
    """Optimized entangling pulse; zeta(m) equals the QST zeta at 2m."""
    return _build(m, PulseKind.EP, omega)


def pulse_for(kind, m: int, omega: float = 1.0) -> PulseParams:
    """Dispatch on kind ("QST"/"EP" or PulseKind)."""
    kind = PulseKind(kind)
    if kind == PulseKind.RWA:
        raise ValidationError("RWA pulses are built from g', use rwa_pulse", key="kind")
    return _build(m, kind, omega)


def rwa_pulse(g_prime: float, omega: float = 1.0, area: float = math.pi,
              m: Optional[int] = None, note: str = "") -> PulseParams:
    """RWA exchange pulse g' tau = area (pi for a full swap)."""
    if not (math.isfinite(g_prime) and g_prime > 0.0):
        raise ValidationError(f"g'={g_prime} must be positive", key="g_prime")
    tau = area / g_prime
    return PulseParams(m=m, zeta=omega / g_prime, theta=omega * tau,
                       g_prime=g_prime, tau=tau, kind=PulseKind.RWA,
                       omega=omega, note=note)


def rwa_comparison_pulse(p: PulseParams) -> PulseParams:
    """
    RWA pulse at the same g' as an optimized pulse: g' tau = pi for QST,
    g' tau = pi/2 (half exchange) for EP.
    """
    if p.kind == PulseKind.QST:
        return rwa_pulse(p.g_prime, p.omega, math.pi, m=p.m)
    if p.kind == PulseKind.EP:
        return rwa_pulse(p.g_prime, p.omega, math.pi / 2.0, m=p.m,
                         note="rwa-ep-half-exchange-interpretation")
    return p


# ── Residuals ────────────────────────────────────────────────────

def _branch_ratios(zeta: float) -> Tuple[float, float]:
    r_plus = math.sqrt(1.0 + 2.0 / zeta)
    r_minus = math.sqrt(max(0.0, 1.0 - 2.0 / zeta))
    return r_plus, r_minus


def _residuals(p: PulseParams, split: int) -> Tuple[float, float]:
    r_plus, r_minus = _branch_ratios(p.zeta)
    return (abs((r_plus - r_minus) * p.theta - split * math.pi),
            abs(r_plus * p.theta - p.m * math.pi))


def qst_residuals(p: PulseParams) -> Tuple[float, float]:
    """Residuals of the two QST constraints."""
    return _residuals(p, 2)


def ep_residuals(p: PulseParams) -> Tuple[float, float]:
    return _residuals(p, 1)


# ── Rotation angle and tradeoff ──────────────────────────────────

def rotation_angle(p: PulseParams) -> float:
    """
    Residual phase rotation theta_r = -(r+ + r- - 2) theta / 4 of an
    optimized pulse (zeta >= 2).
    """
    if not p.zeta >= 2.0:
        raise ValidationError(f"rotation angle needs zeta >= 2, got {p.zeta}", key="zeta")
    r_plus, r_minus = _branch_ratios(p.zeta)
    return -(r_plus + r_minus - 2.0) * p.theta / 4.0


def ideal_coefficients(p: PulseParams) -> Tuple[complex, complex]:
    """(K11, K21) of an optimized QST pulse: sin(tr) e^{i(tr - pi/2)}, -cos(tr) e^{i tr}."""
    tr = rotation_angle(p)
    k11 = math.sin(tr) * complex(math.cos(tr - math.pi / 2), math.sin(tr - math.pi / 2))
    k21 = -math.cos(tr) * complex(math.cos(tr), math.sin(tr))
    return k11, k21


def _theta_r(m: float) -> float:
    # theta - (m-1) pi = pi / (m s + m - 1), s = sqrt(1 - 2/m + 2/m^2)
    s = math.sqrt(1.0 - 2.0 / m + 2.0 / (m * m))
    return math.pi / (2.0 * (m * s + m - 1.0))


def amplitude_error(m: float) -> float:
    """
    G(m) = sin theta_r(m) for continuous m >= 2; decreases monotonically to 0.
    """
    if not m >= 2.0:
        raise ValidationError(f"G(m) defined for m >= 2, got {m}", key="m")
    return math.sin(_theta_r(m))


def theta_of(m: float) -> float:
    """QST pulse area theta(m) for continuous m."""
    return _zeta_theta(m, 2)[1]


def speed_limit(e_tol: float, mean_n: float, omega: float = 1.0) -> TradeoffResult:
    """
    Shortest optimized QST pulse with mean_n * G(m)^2 <= e_tol.

    Solves G(m_th) = sqrt(e_tol / mean_n) by bisection on (2, 1e6] and picks
    m_chosen = floor(m_th) + 1, or 3 once e_tol / mean_n >= G(3)^2.
    """
    if not (0.0 < e_tol < 1.0):
        raise ValidationError(f"e_tol={e_tol} must lie in (0, 1)", key="e_tol")
    if not (math.isfinite(mean_n) and mean_n > 0.0):
        raise ValidationError(f"mean_n={mean_n} must be positive", key="mean_n")
    target = math.sqrt(e_tol / mean_n)

    if target >= amplitude_error(2.0):
        m_th = 2.0
    else:
        if target < amplitude_error(M_SEARCH_MAX):
            raise UnreachableToleranceError(
                f"tolerance {e_tol} with <n>={mean_n} needs m > {M_SEARCH_MAX:.0e}")
        m_th = bisect(lambda m: amplitude_error(m) - target, 2.0, M_SEARCH_MAX,
                      xtol=1e-12, maxiter=400)
        nearest = round(m_th)
        if abs(m_th - nearest) < SNAP_TOL:
            m_th = float(nearest)

    g3 = amplitude_error(3.0)
    if e_tol / mean_n >= g3 * g3 * (1.0 - 1e-12):
        # every m >= 3 already meets the tolerance
        m_chosen = 3
    else:
        m_chosen = max(3, int(math.floor(m_th)) + 1)
    theta_th = theta_of(m_chosen)
    g = amplitude_error(m_chosen)
    result = TradeoffResult(
        m_th=m_th, m_chosen=m_chosen, theta_th=theta_th, tau_th=theta_th / omega,
        predicted_infidelity=mean_n * g * g, e_tol=e_tol, mean_n=mean_n,
    )
    logger.debug(f"speed limit e_tol={e_tol} <n>={mean_n}: m_th={m_th:.6f} "
                 f"m={m_chosen} tau={result.tau_th:.4f}")
    return result


def tradeoff_table(mean_n_values: Iterable[float],
                   m_range: Sequence[int] = range(5, 18)) -> List[Dict]:
    """Predicted first-order infidelity n * G(m)^2 per (m, n)."""
    rows = []
    for m in m_range:
        p = qst_pulse(m)
        g = amplitude_error(m)
        for n in mean_n_values:
            rows.append({
                "m": m, "mean_n": float(n), "tau": p.tau, "g_prime": p.g_prime,
                "G": g, "predicted_infidelity": float(n) * g * g,
            })
    return rows
