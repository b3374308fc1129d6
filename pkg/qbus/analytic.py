"""
Exact Heisenberg-picture solutions of n bosonic nodes coupled to one channel
mode with XX-type couplings, counterrotating terms included.

All transforms are reported in the interaction frame: an operator vector
Psi = (a_1, ..., a_n, c) evolves as

    Psi(t) = U_A(t) Psi(0) + U_B(t) Psi^dagger(0)

with Psi^dagger the elementwise adjoint. The lab (Schrödinger) frame differs
by the scalar factor e^{-i omega t}; composition is done there because the
lab generator is time independent.

Units: omega sets the scale (default 1), times are in 1/omega.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from qbus.errors import ValidationError
from qbus.math_utils import csqrt, max_abs, sinc

logger = logging.getLogger(__name__)

INTERACTION = "interaction"
LAB = "schrodinger"

# |zeta - 2| below this is the special point itself
SINGULAR_EXACT = 1e-8
# |zeta - 2| below this is evaluated with the cancellation-free form
SINGULAR_WINDOW = 1e-4


# ── Domain Types ─────────────────────────────────────────────────

@dataclass(frozen=True)
class CouplingWeights:
    """
    Relative coupling weights k_1..k_n and the base coupling g.

    The effective coupling of the united node mode to the channel is
    g' = g * sqrt(sum k_j^2).
    """
    k: Tuple[float, ...]
    g: float

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(float(x) for x in self.k))
        if len(self.k) < 1:
            raise ValidationError("at least one coupling weight is required", key="k")
        if not all(math.isfinite(x) for x in self.k):
            raise ValidationError(f"non-finite coupling weight in {self.k}", key="k")
        if not any(x != 0.0 for x in self.k):
            raise ValidationError("all coupling weights are zero", key="k")
        if not math.isfinite(self.g):
            raise ValidationError(f"base coupling g={self.g} is not finite", key="g")

    @property
    def norm(self) -> float:
        """sqrt(sum k_j^2)."""
        return math.sqrt(sum(x * x for x in self.k))

    @property
    def g_prime(self) -> float:
        return self.g * self.norm

    @classmethod
    def from_g_prime(cls, g_prime: float, k: Sequence[float]) -> "CouplingWeights":
        """Pick g so that the effective coupling equals g_prime."""
        unit = cls(tuple(k), 1.0)
        return cls(unit.k, g_prime / unit.norm)


@dataclass(frozen=True)
class SystemConfig:
    """
    Resonant star network: n node modes a_j and one channel mode c.

    Attributes:
        omega:    Common mode frequency (> 0).
        weights:  Coupling weights and base coupling.
    """
    weights: CouplingWeights
    omega: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega > 0.0):
            raise ValidationError(f"omega={self.omega} must be positive", key="omega")
        if not math.isfinite(self.g_prime):
            raise ValidationError("effective coupling g' is not finite", key="g")

    @classmethod
    def build(cls, g_prime: float, k: Sequence[float] = (1.0, 1.0),
              omega: float = 1.0) -> "SystemConfig":
        """Config from the effective coupling g' and relative weights."""
        return cls(CouplingWeights.from_g_prime(g_prime, k), omega)

    @property
    def g(self) -> float:
        return self.weights.g

    @property
    def n_modes(self) -> int:
        return len(self.weights.k)

    @property
    def g_prime(self) -> float:
        return self.weights.g_prime

    @property
    def zeta(self) -> float:
        """omega / g' (inf when decoupled)."""
        if self.g_prime == 0.0:
            return math.inf
        return self.omega / self.g_prime

    def mode_labels(self) -> List[str]:
        return [f"a{j + 1}" for j in range(self.n_modes)] + ["c"]


@dataclass(frozen=True)
class EigenFrequencies:
    """The four eigenvalues ±sqrt(w^2 - 2g'w), ±sqrt(w^2 + 2g'w)."""
    values: Tuple[complex, complex, complex, complex]
    hyperbolic: bool

    @property
    def omega_minus(self) -> complex:
        return self.values[0]

    @property
    def omega_plus(self) -> complex:
        return self.values[2]


@dataclass(frozen=True, eq=False)
class BogoliubovTransform:
    """
    Paired matrices (U_A, U_B) acting on (a_1, ..., a_n, c).

    Arrays are stored read-only; the transform is an immutable value.
    """
    u_a: np.ndarray
    u_b: np.ndarray
    time: float
    omega: float = 1.0
    frame: str = INTERACTION
    mode_labels: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        u_a = np.array(self.u_a, dtype=complex)
        u_b = np.array(self.u_b, dtype=complex)
        if u_a.shape != u_b.shape or u_a.ndim != 2 or u_a.shape[0] != u_a.shape[1]:
            raise ValidationError(f"transform blocks must be equal square matrices, "
                                  f"got {u_a.shape} and {u_b.shape}")
        u_a.setflags(write=False)
        u_b.setflags(write=False)
        object.__setattr__(self, "u_a", u_a)
        object.__setattr__(self, "u_b", u_b)
        if not self.mode_labels:
            n = u_a.shape[0] - 1
            labels = tuple(f"a{j + 1}" for j in range(n)) + ("c",)
            object.__setattr__(self, "mode_labels", labels)

    @property
    def dim(self) -> int:
        return self.u_a.shape[0]

    def row(self, index: int) -> np.ndarray:
        """Coefficient row of mode `index` over (Psi(0), Psi^dagger(0))."""
        return np.concatenate([self.u_a[index], self.u_b[index]])

    def to_json(self) -> Dict:
        """Nested [re, im] pairs, with the frame recorded."""
        def enc(m):
            return [[[float(z.real), float(z.imag)] for z in r] for r in m]
        return {
            "frame": self.frame,
            "time": self.time,
            "omega": self.omega,
            "modes": list(self.mode_labels),
            "u_a": enc(self.u_a),
            "u_b": enc(self.u_b),
        }


@dataclass(frozen=True)
class TransferCoefficients:
    """The six coefficients of a_1(t) for two equally weighted nodes."""
    k11: complex
    k21: complex
    kc1: complex
    k12: complex
    k22: complex
    kc2: complex

    def commutator_residual(self) -> float:
        """|K11|^2+|K21|^2+|Kc1|^2-|K12|^2-|K22|^2-|Kc2|^2 - 1."""
        plus = abs(self.k11) ** 2 + abs(self.k21) ** 2 + abs(self.kc1) ** 2
        minus = abs(self.k12) ** 2 + abs(self.k22) ** 2 + abs(self.kc2) ** 2
        return plus - minus - 1.0

    def as_tuple(self) -> Tuple[complex, ...]:
        return (self.k11, self.k21, self.kc1, self.k12, self.k22, self.kc2)


# ── Spectrum ─────────────────────────────────────────────────────

def eigen_frequencies(cfg: SystemConfig) -> EigenFrequencies:
    """
    Eigenfrequencies of the united-mode/channel pair.

    On the hyperbolic side (2|g'| > omega) the minus branch is returned as
    i*sqrt(2g'w - w^2).
    """
    w, gp = cfg.omega, cfg.g_prime
    om_minus = csqrt(w * w - 2.0 * gp * w)
    om_plus = csqrt(w * w + 2.0 * gp * w)
    return EigenFrequencies(
        values=(om_minus, -om_minus, om_plus, -om_plus),
        hyperbolic=2.0 * abs(gp) > w,
    )


def ode_coefficient_matrix(cfg: SystemConfig) -> np.ndarray:
    """
    Real generator K of d/dt (X, P, X_c, P_c) = K (X, P, X_c, P_c).

    Its eigenvalues are ±i times the eigenfrequencies.
    """
    w, gp = cfg.omega, cfg.g_prime
    return np.array([
        [0.0, w, 0.0, 0.0],
        [-w, 0.0, -2.0 * gp, 0.0],
        [0.0, 0.0, 0.0, w],
        [-2.0 * gp, 0.0, -w, 0.0],
    ])


def normal_mode_frequencies(cfg: SystemConfig) -> np.ndarray:
    """
    Normal-mode frequencies of the full (n+1)-mode quadratic Hamiltonian,
    found by diagonalising the (X, P) equations of motion. Sorted ascending.
    """
    n = cfg.n_modes + 1
    coupling = np.zeros((n, n))
    for j, kj in enumerate(cfg.weights.k):
        coupling[j, n - 1] = coupling[n - 1, j] = cfg.g * kj
    w = cfg.omega
    gen = np.zeros((2 * n, 2 * n))
    gen[:n, n:] = w * np.eye(n)
    gen[n:, :n] = -w * np.eye(n) - 2.0 * coupling
    eig = np.linalg.eigvals(gen)
    # each frequency appears as a ±i pair; keep one per pair
    freqs = np.sort(np.abs(eig.imag))[::2]
    return freqs


def analytic_normal_frequencies(cfg: SystemConfig) -> np.ndarray:
    """sqrt(w * w~) with w~ in {w (n-1 times), w - 2g', w + 2g'}."""
    w, gp = cfg.omega, cfg.g_prime
    tilde = [w] * (cfg.n_modes - 1) + [w - 2.0 * gp, w + 2.0 * gp]
    return np.sort(np.sqrt(w * np.array(tilde)))


def is_bounded(cfg: SystemConfig) -> bool:
    """True when every normal-mode frequency is real (2|g'| < omega)."""
    return 2.0 * abs(cfg.g_prime) < cfg.omega


# ── United mode ──────────────────────────────────────────────────

def m_matrix(zeta: float) -> np.ndarray:
    """
    The 4x4 coefficient matrix M of the united-mode solution.

    Columns act on (a(0), a^dagger(0), c(0), c^dagger(0)); rows pair with
    mu = (e^{iW-t}, e^{-iW-t}, e^{iW+t}, e^{-iW+t}). Singular at zeta = 2.
    """
    if not math.isfinite(zeta) or zeta == 0.0:
        raise ValidationError(f"M matrix undefined for zeta={zeta}", key="zeta")
    sm = csqrt(zeta * zeta - 2.0 * zeta)
    sp = csqrt(zeta * zeta + 2.0 * zeta)
    if sm == 0.0 or sp == 0.0:
        raise ValidationError(f"M matrix is singular at zeta={zeta}", key="zeta")
    am, bm = (zeta - 1.0) / sm, 1.0 / sm
    ap, bp = (zeta + 1.0) / sp, 1.0 / sp
    return 0.25 * np.array([
        [1 - am, bm, -1 + am, -bm],
        [1 + am, -bm, -1 - am, bm],
        [1 - ap, -bp, 1 - ap, -bp],
        [1 + ap, bp, 1 + ap, bp],
    ], dtype=complex)


def mu_vector(cfg: SystemConfig, t: float) -> np.ndarray:
    """Oscillation row mu(t)."""
    ef = eigen_frequencies(cfg)
    om, op = ef.omega_minus, ef.omega_plus
    return np.exp(1j * np.array([om, -om, op, -op]) * t)


def _branch_coefficients(r_sq: float, omega: float, t: float) -> Tuple[complex, complex]:
    """
    Coefficients (alpha, beta) of A(0), A^dagger(0) for one normal branch with
    squared frequency ratio r^2. Entire in r^2, so no branch or 0/0 issues.
    """
    r = csqrt(r_sq)
    x = omega * r * t
    s = omega * t * sinc(x)  # sin(x)/r
    alpha = np.cos(x) - 0.5j * (r_sq + 1.0) * s
    beta = 0.5j * (1.0 - r_sq) * s
    return complex(alpha), complex(beta)


def _entire_row(cfg: SystemConfig, t: float) -> np.ndarray:
    """United-mode row evaluated in the cancellation-free form."""
    w, gp = cfg.omega, cfg.g_prime
    a_p, b_p = _branch_coefficients(1.0 + 2.0 * gp / w, w, t)
    a_m, b_m = _branch_coefficients(1.0 - 2.0 * gp / w, w, t)
    row = 0.5 * np.array([a_p + a_m, b_p + b_m, a_p - a_m, b_p - b_m])
    return row * np.exp(1j * w * t)


def special_point_row(cfg: SystemConfig, t: float) -> np.ndarray:
    """
    Row at g' = omega/2 (zeta = 2), the continuous limit of mu M e^{iwt}.

    a(t) = { a(0)/2 [1 + cos(√2wt) - ig't - i 3/(2√2) sin(√2wt)]
           + c(0)/2 [cos(√2wt) - 1 + ig't - i 3/(2√2) sin(√2wt)]
           + a†(0)/2 [ig't - i/(2√2) sin(√2wt)]
           + c†(0)/2 [-ig't - i/(2√2) sin(√2wt)] } e^{iwt}
    """
    w = cfg.omega
    gt = 0.5 * w * t
    root2 = math.sqrt(2.0)
    cs, sn = math.cos(root2 * w * t), math.sin(root2 * w * t)
    k3 = 3.0 / (2.0 * root2)
    k1 = 1.0 / (2.0 * root2)
    row = 0.5 * np.array([
        1.0 + cs - 1j * gt - 1j * k3 * sn,
        1j * gt - 1j * k1 * sn,
        cs - 1.0 + 1j * gt - 1j * k3 * sn,
        -1j * gt - 1j * k1 * sn,
    ])
    return row * np.exp(1j * w * t)


def united_mode_transform(cfg: SystemConfig, t: float) -> np.ndarray:
    """
    Row giving a(t) over (a(0), a^dagger(0), c(0), c^dagger(0)), interaction
    frame, where a is the normalised united node mode.

    Dispatch:
        g' = 0             → free evolution, (1, 0, 0, 0)
        |zeta-2| < 1e-8    → special-point limit
        |zeta-2| < 1e-4    → cancellation-free entire form
        g' < 0             → entire form (M is written for g' > 0)
        otherwise          → mu(t) M e^{iwt}
    """
    if t < 0:
        raise ValidationError(f"evolution time t={t} must be non-negative", key="t")
    gp = cfg.g_prime
    if gp == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0], dtype=complex)
    zeta = cfg.zeta
    dz = abs(zeta - 2.0)
    if dz < SINGULAR_EXACT:
        return special_point_row(cfg, t)
    if dz < SINGULAR_WINDOW or gp < 0.0:
        return _entire_row(cfg, t)
    return mu_vector(cfg, t) @ m_matrix(zeta) * np.exp(1j * cfg.omega * t)


# ── Full transform ───────────────────────────────────────────────

def full_transform(cfg: SystemConfig, t: float) -> BogoliubovTransform:
    """
    (n+1)-mode transform. Node rows:

        a_i(t) = a_i(0) - (k_i/K^2) sum_j k_j a_j(0)
                 + (k_i/K^2) row · (sum k_j a_j, sum k_j a_j^†, K c, K c^†)

    Channel row: the united row with a and c exchanged. K^2 = sum k_j^2.
    """
    row = united_mode_transform(cfg, t)
    k = np.array(cfg.weights.k)
    kn = cfg.weights.norm
    n = cfg.n_modes
    u_a = np.zeros((n + 1, n + 1), dtype=complex)
    u_b = np.zeros((n + 1, n + 1), dtype=complex)

    proj = np.outer(k, k) / kn ** 2
    u_a[:n, :n] = np.eye(n) - proj + proj * row[0]
    u_b[:n, :n] = proj * row[1]
    u_a[:n, n] = k / kn * row[2]
    u_b[:n, n] = k / kn * row[3]

    u_a[n, n] = row[0]
    u_b[n, n] = row[1]
    u_a[n, :n] = row[2] * k / kn
    u_b[n, :n] = row[3] * k / kn

    return BogoliubovTransform(u_a, u_b, t, cfg.omega, INTERACTION,
                               tuple(cfg.mode_labels()))


def two_node_rows(cfg: SystemConfig, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    a_1(t), a_2(t) for n = 2 written through the united mode and the
    initial-condition term B:

        a_1 = k_1/K a(t) + B,   a_2 = k_2/K a(t) - (k_1/k_2) B,
        B = a_1(0) - k_1/K^2 (k_1 a_1(0) + k_2 a_2(0)).

    Rows are over (a_1, a_2, c, a_1^†, a_2^†, c^†). Requires k_2 != 0.
    """
    if cfg.n_modes != 2:
        raise ValidationError("two_node_rows needs exactly two nodes", key="k")
    k1, k2 = cfg.weights.k
    if k2 == 0.0:
        raise ValidationError("two_node_rows needs k2 != 0", key="k")
    kn = cfg.weights.norm
    row = united_mode_transform(cfg, t)
    # united mode a(t) over the six operators
    united = np.array([
        row[0] * k1 / kn, row[0] * k2 / kn, row[2],
        row[1] * k1 / kn, row[1] * k2 / kn, row[3],
    ])
    b = np.array([1.0 - k1 * k1 / kn ** 2, -k1 * k2 / kn ** 2, 0, 0, 0, 0], dtype=complex)
    a1 = k1 / kn * united + b
    a2 = k2 / kn * united - (k1 / k2) * b
    return a1, a2


def transfer_coefficients(cfg: SystemConfig, t: float) -> TransferCoefficients:
    """K-coefficients of a_1(t) for two equally weighted nodes."""
    if cfg.n_modes != 2:
        raise ValidationError(
            f"transfer_coefficients needs n_modes=2, got {cfg.n_modes}", key="k")
    k1, k2 = cfg.weights.k
    if k1 != k2:
        raise ValidationError("transfer_coefficients needs equal weights k1=k2", key="k")
    tr = full_transform(cfg, t)
    return TransferCoefficients(
        k11=complex(tr.u_a[0, 0]), k21=complex(tr.u_a[0, 1]), kc1=complex(tr.u_a[0, 2]),
        k12=complex(tr.u_b[0, 0]), k22=complex(tr.u_b[0, 1]), kc2=complex(tr.u_b[0, 2]),
    )


def rwa_transform(cfg: SystemConfig, t: float) -> BogoliubovTransform:
    """Number-conserving baseline: U_A = exp(-i h t), U_B = 0."""
    if t < 0:
        raise ValidationError(f"evolution time t={t} must be non-negative", key="t")
    n = cfg.n_modes
    h = np.zeros((n + 1, n + 1))
    for j, kj in enumerate(cfg.weights.k):
        h[j, n] = h[n, j] = cfg.g * kj
    u_a = expm(-1j * h * t)
    return BogoliubovTransform(u_a, np.zeros_like(u_a), t, cfg.omega, INTERACTION,
                               tuple(cfg.mode_labels()))


def ideal_ep_transform(cfg: SystemConfig, theta: float, m: int) -> BogoliubovTransform:
    """
    Closed-form U_A at the end of an EP pulse: the united node mode and the
    channel swap with phase (-1)^m e^{i theta}; dark node modes are frozen.
    """
    k = np.array(cfg.weights.k)
    kn = cfg.weights.norm
    n = cfg.n_modes
    phase = (-1) ** m * np.exp(1j * theta)
    u_a = np.zeros((n + 1, n + 1), dtype=complex)
    u_a[:n, :n] = np.eye(n) - np.outer(k, k) / kn ** 2
    u_a[:n, n] = phase * k / kn
    u_a[n, :n] = phase * k / kn
    t = theta / cfg.omega
    return BogoliubovTransform(u_a, np.zeros_like(u_a), t, cfg.omega, INTERACTION,
                               tuple(cfg.mode_labels()))


# ── Frames, composition, residuals ───────────────────────────────

def to_lab_frame(tr: BogoliubovTransform) -> BogoliubovTransform:
    if tr.frame == LAB:
        return tr
    ph = np.exp(-1j * tr.omega * tr.time)
    return BogoliubovTransform(tr.u_a * ph, tr.u_b * ph, tr.time, tr.omega, LAB,
                               tr.mode_labels)


def to_interaction_frame(tr: BogoliubovTransform) -> BogoliubovTransform:
    if tr.frame == INTERACTION:
        return tr
    ph = np.exp(1j * tr.omega * tr.time)
    return BogoliubovTransform(tr.u_a * ph, tr.u_b * ph, tr.time, tr.omega,
                               INTERACTION, tr.mode_labels)


def compose(first: BogoliubovTransform, second: BogoliubovTransform) -> BogoliubovTransform:
    """
    Evolve for first.time, then second.time, under the same generator.

    Done in the lab frame: A = A2 A1 + B2 B1*, B = A2 B1 + B2 A1*.
    The result is returned in the frame of `first`.
    """
    if first.dim != second.dim or first.omega != second.omega:
        raise ValidationError("cannot compose transforms of different systems")
    a1 = to_lab_frame(first)
    a2 = to_lab_frame(second)
    u_a = a2.u_a @ a1.u_a + a2.u_b @ a1.u_b.conj()
    u_b = a2.u_a @ a1.u_b + a2.u_b @ a1.u_a.conj()
    out = BogoliubovTransform(u_a, u_b, first.time + second.time, first.omega, LAB,
                              first.mode_labels)
    return out if first.frame == LAB else to_interaction_frame(out)


def symplectic_residuals(tr: BogoliubovTransform) -> Tuple[float, float]:
    """(||A A^† - B B^† - I||, ||A B^T - (A B^T)^T||), entrywise max."""
    a, b = tr.u_a, tr.u_b
    r1 = max_abs(a @ a.conj().T - b @ b.conj().T - np.eye(tr.dim))
    abt = a @ b.T
    r2 = max_abs(abt - abt.T)
    return r1, r2


def transform_distance(x: BogoliubovTransform, y: BogoliubovTransform) -> float:
    """Largest entry difference over both blocks (frames must match)."""
    if x.frame != y.frame:
        y = to_lab_frame(y) if x.frame == LAB else to_interaction_frame(y)
    return max(max_abs(x.u_a - y.u_a), max_abs(x.u_b - y.u_b))


def reorder(tr: BogoliubovTransform, order: Sequence[int]) -> BogoliubovTransform:
    """Permute the mode basis, e.g. (a1, a2, c) -> (a1, c, a2) with [0, 2, 1]."""
    idx = list(order)
    labels = tuple(tr.mode_labels[i] for i in idx)
    return BogoliubovTransform(tr.u_a[np.ix_(idx, idx)], tr.u_b[np.ix_(idx, idx)],
                               tr.time, tr.omega, tr.frame, labels)


def dark_mode_row(tr: BogoliubovTransform, combination: Sequence[float]) -> np.ndarray:
    """
    Row of the node combination sum_i v_i a_i(t) over (Psi(0), Psi^†(0)),
    with v padded by zero for the channel.
    """
    v = np.zeros(tr.dim, dtype=complex)
    v[:len(combination)] = combination
    return np.concatenate([v @ tr.u_a, v @ tr.u_b])


def log_transform(tr: BogoliubovTransform, label: Optional[str] = None) -> None:
    r1, r2 = symplectic_residuals(tr)
    logger.debug(f"transform {label or ''} t={tr.time:.6g} frame={tr.frame} "
                 f"residuals=({r1:.2e}, {r2:.2e})")
