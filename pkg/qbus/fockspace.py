"""
Truncated Fock-space oracle for n nodes plus one channel.

States live on the tensor product of per-mode truncated Fock spaces in the
fixed order (a_1, ..., a_n, c). Evolution integrates the interaction-frame
Hamiltonian including counterrotating terms,

    H(t) = sum_j g k_j (a_j c^† + a_j^† c + a_j c e^{-2iwt} + a_j^† c^† e^{2iwt}),

so it is an independent check of the closed-form transforms in
qbus.analytic. Nothing here relies on Gaussian-state shortcuts.
"""

import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache, reduce
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import expm_multiply
from scipy.special import eval_genlaguerre, gammaln

from qbus.analytic import SystemConfig, eigen_frequencies
from qbus.errors import DimensionError, StepSizeError, TruncationError, ValidationError
from qbus.math_utils import normalize, psd_floor
from qbus.math_utils import trace_distance as _dense_trace_distance

logger = logging.getLogger(__name__)

MAX_STATE_DIM = 2_000_000
NORM_TOL = 1e-10
BINARY_MAGIC = b"QBFS"
BINARY_VERSION = 1


# ── Settings & options ───────────────────────────────────────────

@dataclass(frozen=True)
class FockSettings:
    """
    Numerical knobs of the oracle.

    Attributes:
        eps_trunc:     Allowed population in the top Fock level of any mode.
        dense_budget:  Largest dimension of a dense reduced density matrix.
        thermal_tail:  Boltzmann weight discarded when cutting a thermal mixture.
        steps_per_period: Default RK4 steps per 2 pi / omega.
        converge_tol:  Observable change accepted when doubling the cutoff.
        max_cutoff:    Largest per-mode cutoff tried by the convergence loop.
        max_norm_drift: Norm (trace) loss allowed over one pulse at the
                       default step; the step is shortened until it holds.
        step_refinements: Attempts at shortening the default step.
    """
    eps_trunc: float = 1e-5
    dense_budget: int = 4096
    thermal_tail: float = 1e-8
    steps_per_period: int = 200
    converge_tol: float = 1e-6
    max_cutoff: int = 32
    max_norm_drift: float = 1e-8
    step_refinements: int = 6

    def default_dt(self, omega: float = 1.0) -> float:
        return 2.0 * math.pi / (omega * self.steps_per_period)


DEFAULT_SETTINGS = FockSettings()


@dataclass(frozen=True)
class EvolveOptions:
    """
    integrator: "rk4" (fixed step) or "adaptive" (step doubling).
    dt:         Step (units 1/omega); None picks the settings default.
    frame:      "interaction" integrates H(t); "schrodinger" exponentiates the
                time-independent lab operator and rotates back.
    rwa:        Drop the counterrotating terms.
    tol:        Local error target of the adaptive integrator.
    """
    integrator: str = "rk4"
    dt: Optional[float] = None
    frame: str = "interaction"
    rwa: bool = False
    tol: float = 1e-10

    def __post_init__(self):
        if self.integrator not in ("rk4", "adaptive"):
            raise ValidationError(f"unknown integrator {self.integrator!r}", key="integrator")
        if self.frame not in ("interaction", "schrodinger"):
            raise ValidationError(f"unknown frame {self.frame!r}", key="frame")
        if self.dt is not None and not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ValidationError(f"dt={self.dt} must be positive", key="dt")


# ── Basis ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FockBasisSpec:
    """Per-mode cutoffs d_j (levels 0..d_j-1) and mode labels."""
    dims: Tuple[int, ...]
    mode_order: Tuple[str, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise DimensionError("basis needs at least one mode")
        if any(d < 2 for d in dims):
            raise DimensionError(f"every cutoff must be >= 2, got {dims}")
        if not self.mode_order:
            labels = tuple(f"a{j + 1}" for j in range(len(dims) - 1)) + ("c",)
            object.__setattr__(self, "mode_order", labels)
        elif len(self.mode_order) != len(dims):
            raise DimensionError(f"{len(self.mode_order)} labels for {len(dims)} modes")
        if self.total > MAX_STATE_DIM:
            raise DimensionError(f"total dimension {self.total} exceeds {MAX_STATE_DIM}")

    @classmethod
    def for_modes(cls, n_nodes: int, d: int, d_channel: Optional[int] = None) -> "FockBasisSpec":
        """n_nodes nodes at cutoff d plus the channel (cutoff d_channel or d)."""
        if n_nodes < 1:
            raise ValidationError("at least one node mode is required", key="n_modes")
        return cls(tuple([d] * n_nodes + [d_channel or d]))

    @classmethod
    def single(cls, d: int, label: str = "a") -> "FockBasisSpec":
        return cls((d,), (label,))

    @property
    def total(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_modes(self) -> int:
        return len(self.dims)

    def index(self, mode: Union[int, str]) -> int:
        if isinstance(mode, str):
            if mode not in self.mode_order:
                raise DimensionError(f"unknown mode {mode!r}; basis has {self.mode_order}")
            return self.mode_order.index(mode)
        if not 0 <= mode < self.n_modes:
            raise DimensionError(f"mode index {mode} out of range")
        return int(mode)

    def sub(self, keep: Sequence[int]) -> "FockBasisSpec":
        return FockBasisSpec(tuple(self.dims[i] for i in keep),
                             tuple(self.mode_order[i] for i in keep))


def default_truncation(n_peak: float) -> int:
    """max(8, ceil(n_peak + 6 sqrt(n_peak + 1)))."""
    return max(8, int(math.ceil(n_peak + 6.0 * math.sqrt(n_peak + 1.0))))


@lru_cache(maxsize=32)
def ladder_operators(basis: FockBasisSpec) -> Tuple[sp.csr_matrix, ...]:
    """Annihilation operator of every mode on the full space (CSR)."""
    ops = []
    for j, d in enumerate(basis.dims):
        a = sp.diags(np.sqrt(np.arange(1, d, dtype=float)), 1, format="csr")
        factors = [sp.identity(dk, format="csr") for dk in basis.dims]
        factors[j] = a
        ops.append(reduce(lambda x, y: sp.kron(x, y, format="csr"), factors).astype(complex))
    return tuple(ops)


@lru_cache(maxsize=32)
def _level_grid(basis: FockBasisSpec) -> Tuple[np.ndarray, ...]:
    """Fock level of each mode at every flat index."""
    grids = np.indices(basis.dims).reshape(basis.n_modes, -1)
    return tuple(g.copy() for g in grids)


def total_number_diagonal(basis: FockBasisSpec) -> np.ndarray:
    return np.sum(np.array(_level_grid(basis)), axis=0).astype(float)


# ── Hamiltonians ─────────────────────────────────────────────────

def _check_basis(cfg: SystemConfig, basis: FockBasisSpec) -> None:
    if basis.n_modes != cfg.n_modes + 1:
        raise DimensionError(
            f"basis has {basis.n_modes} modes, system needs {cfg.n_modes + 1}")


@lru_cache(maxsize=16)
def hamiltonian_parts(cfg: SystemConfig, basis: FockBasisSpec) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """
    (H_hop, H_pair) with H(t) = H_hop + e^{-2iwt} H_pair + e^{2iwt} H_pair^†.
    """
    _check_basis(cfg, basis)
    ops = ladder_operators(basis)
    c = ops[-1]
    dim = basis.total
    h_hop = sp.csr_matrix((dim, dim), dtype=complex)
    h_pair = sp.csr_matrix((dim, dim), dtype=complex)
    for a, kj in zip(ops[:-1], cfg.weights.k):
        gk = cfg.g * kj
        if gk == 0.0:
            continue
        h_hop = h_hop + gk * (a @ c.conj().T + a.conj().T @ c)
        h_pair = h_pair + gk * (a @ c)
    return h_hop.tocsr(), h_pair.tocsr()


def build_hamiltonian(cfg: SystemConfig, basis: FockBasisSpec, t: float) -> sp.csr_matrix:
    """Interaction-frame H(t) on the truncated space."""
    h_hop, h_pair = hamiltonian_parts(cfg, basis)
    ph = np.exp(-2j * cfg.omega * t)
    return (h_hop + ph * h_pair + np.conj(ph) * h_pair.conj().T).tocsr()


@lru_cache(maxsize=16)
def lab_hamiltonian(cfg: SystemConfig, basis: FockBasisSpec, rwa: bool = False) -> sp.csr_matrix:
    """Time-independent lab operator w N + sum_j g k_j (a_j + a_j^†)(c + c^†)."""
    _check_basis(cfg, basis)
    h0 = sp.diags(cfg.omega * total_number_diagonal(basis), 0, format="csr").astype(complex)
    h_hop, h_pair = hamiltonian_parts(cfg, basis)
    if rwa:
        return (h0 + h_hop).tocsr()
    return (h0 + h_hop + h_pair + h_pair.conj().T).tocsr()


# ── States ───────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TruncatedState:
    """
    A state on `basis`: either a classical mixture of pure branches
    (vectors with weights) or a dense density matrix.
    """
    basis: FockBasisSpec
    vectors: Tuple[np.ndarray, ...] = ()
    weights: Tuple[float, ...] = ()
    density: Optional[np.ndarray] = None

    def __post_init__(self):
        dim = self.basis.total
        if self.density is not None:
            rho = np.array(self.density, dtype=complex)
            if rho.shape != (dim, dim):
                raise DimensionError(f"density shape {rho.shape} does not match dim {dim}")
            if abs(np.trace(rho).real - 1.0) > 1e-8:
                raise ValidationError(f"density trace {np.trace(rho).real:.12f} != 1")
            rho.setflags(write=False)
            object.__setattr__(self, "density", rho)
            return
        if not self.vectors:
            raise ValidationError("state needs vectors or a density matrix")
        vecs = []
        for v in self.vectors:
            v = np.array(v, dtype=complex).reshape(-1)
            if v.shape[0] != dim:
                raise DimensionError(f"vector length {v.shape[0]} does not match dim {dim}")
            v.setflags(write=False)
            vecs.append(v)
        weights = tuple(float(w) for w in (self.weights or (1.0,) * len(vecs)))
        if len(weights) != len(vecs):
            raise ValidationError("one weight per branch is required")
        if any(w < 0.0 for w in weights) or abs(sum(weights) - 1.0) > NORM_TOL:
            raise ValidationError(f"mixture weights must be >= 0 and sum to 1, got {sum(weights)}")
        object.__setattr__(self, "vectors", tuple(vecs))
        object.__setattr__(self, "weights", weights)

    @classmethod
    def pure(cls, basis: FockBasisSpec, vector: np.ndarray) -> "TruncatedState":
        return cls(basis, (normalize(np.asarray(vector, dtype=complex)),), (1.0,))

    @property
    def is_dense(self) -> bool:
        return self.density is not None

    @property
    def is_pure(self) -> bool:
        return not self.is_dense and len(self.vectors) == 1

    @property
    def vector(self) -> np.ndarray:
        if not self.is_pure:
            raise ValidationError("state is not a single pure vector")
        return self.vectors[0]

    def to_density(self) -> np.ndarray:
        if self.is_dense:
            return np.array(self.density)
        dim = self.basis.total
        rho = np.zeros((dim, dim), dtype=complex)
        for w, v in zip(self.weights, self.vectors):
            rho += w * np.outer(v, v.conj())
        return rho

    def norm_drift(self) -> float:
        """|norm - 1| of a pure vector; |trace - 1| of a mixture or density."""
        if self.is_dense:
            return abs(np.trace(self.density).real - 1.0)
        if self.is_pure:
            return abs(np.linalg.norm(self.vectors[0]) - 1.0)
        trace = sum(w * np.vdot(v, v).real for w, v in zip(self.weights, self.vectors))
        return abs(trace - 1.0)

    def level_populations(self, mode: Union[int, str]) -> np.ndarray:
        """Marginal Fock distribution of one mode."""
        j = self.basis.index(mode)
        if self.is_dense:
            probs = np.real(np.diag(self.density))
        else:
            probs = sum(w * np.abs(v) ** 2 for w, v in zip(self.weights, self.vectors))
        probs = probs.reshape(self.basis.dims)
        axes = tuple(i for i in range(self.basis.n_modes) if i != j)
        return np.sum(probs, axis=axes)


def product_state(basis: FockBasisSpec, factors: Sequence[np.ndarray]) -> TruncatedState:
    """Pure product state from one single-mode vector per mode."""
    if len(factors) != basis.n_modes:
        raise DimensionError(f"{len(factors)} factors for {basis.n_modes} modes")
    for f, d in zip(factors, basis.dims):
        if len(f) != d:
            raise DimensionError(f"factor length {len(f)} does not match cutoff {d}")
    vec = reduce(np.kron, [np.asarray(f, dtype=complex) for f in factors])
    return TruncatedState.pure(basis, vec)


def fock_vector(n: int, d: int) -> np.ndarray:
    if not 0 <= n < d:
        raise DimensionError(f"Fock level {n} does not fit cutoff {d}")
    v = np.zeros(d, dtype=complex)
    v[n] = 1.0
    return v


def coherent_vector(alpha: complex, d: int) -> np.ndarray:
    """Truncated |alpha>, renormalised. Requires |alpha|^2 + 6|alpha| <= d."""
    r = abs(alpha)
    if r * r + 6.0 * r > d:
        raise DimensionError(f"cutoff {d} too small for |alpha|={r:.3f}")
    n = np.arange(d)
    log_mag = -0.5 * r * r - 0.5 * gammaln(n + 1.0)
    if r > 0.0:
        amps = np.exp(log_mag + n * math.log(r)) * np.exp(1j * n * np.angle(alpha))
    else:
        amps = fock_vector(0, d)
    return normalize(amps.astype(complex))


def cat_vector(alpha: complex, d: int, even: bool = True) -> np.ndarray:
    """(|alpha> ± |-alpha>) normalised."""
    plus = coherent_vector(alpha, d)
    minus = coherent_vector(-alpha, d)
    return normalize(plus + minus if even else plus - minus)


def fock_state(n: int, basis: FockBasisSpec, mode: Union[int, str] = 0) -> TruncatedState:
    """|n> in `mode`, vacuum elsewhere."""
    j = basis.index(mode)
    factors = [fock_vector(0, d) for d in basis.dims]
    factors[j] = fock_vector(n, basis.dims[j])
    return product_state(basis, factors)


def coherent_state(alpha: complex, basis: FockBasisSpec, mode: Union[int, str] = 0) -> TruncatedState:
    j = basis.index(mode)
    factors = [fock_vector(0, d) for d in basis.dims]
    factors[j] = coherent_vector(alpha, basis.dims[j])
    return product_state(basis, factors)


def cat_state(alpha: complex, basis: FockBasisSpec, mode: Union[int, str] = 0,
              even: bool = True) -> TruncatedState:
    j = basis.index(mode)
    factors = [fock_vector(0, d) for d in basis.dims]
    factors[j] = cat_vector(alpha, basis.dims[j], even)
    return product_state(basis, factors)


def thermal_weights(temperature: float, omega: float = 1.0,
                    tail: float = 1e-8) -> List[Tuple[int, float]]:
    """
    Boltzmann weights (n, p_n) of a thermal oscillator, cut once the
    discarded tail x^{N+1} (x = e^{-w/T}) drops below `tail`; renormalised.
    """
    if not (math.isfinite(temperature) and temperature >= 0.0):
        raise ValidationError(f"temperature {temperature} must be >= 0", key="T")
    if temperature == 0.0:
        return [(0, 1.0)]
    x = math.exp(-omega / temperature)
    if x == 0.0:
        return [(0, 1.0)]
    n_max = max(0, int(math.ceil(math.log(tail) / math.log(x))) - 1)
    probs = [(1.0 - x) * x ** n for n in range(n_max + 1)]
    total = sum(probs)
    return [(n, p / total) for n, p in enumerate(probs)]


def thermal_occupancy(temperature: float, omega: float = 1.0) -> float:
    """Bose-Einstein mean occupancy 1/(e^{w/T} - 1)."""
    if temperature == 0.0:
        return 0.0
    return 1.0 / math.expm1(omega / temperature)


def thermal_channel(node_factors: Sequence[np.ndarray], temperature: float,
                    basis: FockBasisSpec, omega: float = 1.0,
                    settings: FockSettings = DEFAULT_SETTINGS) -> TruncatedState:
    """
    Nodes in the given pure factors, channel thermal at `temperature`: a
    classical mixture over channel Fock states.
    """
    weights = thermal_weights(temperature, omega, settings.thermal_tail)
    d_c = basis.dims[-1]
    if weights[-1][0] >= d_c:
        raise DimensionError(
            f"channel cutoff {d_c} too small for T={temperature}: need > {weights[-1][0]}")
    nodes = reduce(np.kron, [np.asarray(f, dtype=complex) for f in node_factors])
    vecs, ws = [], []
    for n, p in weights:
        vecs.append(normalize(np.kron(nodes, fock_vector(n, d_c))))
        ws.append(p)
    # guard the float sum of the renormalised weights
    ws[-1] = 1.0 - sum(ws[:-1])
    return TruncatedState(basis, tuple(vecs), tuple(ws))


# ── Evolution ────────────────────────────────────────────────────

class _Generator:
    """Precomputed pieces of H(t), applied to a block of column vectors."""

    def __init__(self, cfg: SystemConfig, basis: FockBasisSpec, rwa: bool):
        self.omega = cfg.omega
        self.h_hop, h_pair = hamiltonian_parts(cfg, basis)
        self.rwa = rwa
        self.h_pair = h_pair
        self.h_pair_dag = h_pair.conj().T.tocsr()

    def rhs(self, t: float, psi: np.ndarray) -> np.ndarray:
        out = self.h_hop @ psi
        if not self.rwa:
            ph = np.exp(-2j * self.omega * t)
            out = out + ph * (self.h_pair @ psi) + np.conj(ph) * (self.h_pair_dag @ psi)
        return -1j * out


def max_frequency(cfg: SystemConfig) -> float:
    """Fastest rate in the interaction-frame generator: max(|W±|, 2w)."""
    ef = eigen_frequencies(cfg)
    return max(max(abs(v) for v in ef.values), 2.0 * cfg.omega)


def _rk4_step(gen: _Generator, t: float, psi: np.ndarray, h: float) -> np.ndarray:
    k1 = gen.rhs(t, psi)
    k2 = gen.rhs(t + 0.5 * h, psi + 0.5 * h * k1)
    k3 = gen.rhs(t + 0.5 * h, psi + 0.5 * h * k2)
    k4 = gen.rhs(t + h, psi + h * k3)
    return psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate_rk4(gen: _Generator, psi: np.ndarray, t0: float, t1: float, dt: float) -> np.ndarray:
    span = t1 - t0
    if span <= 0.0:
        return psi
    n_steps = max(1, int(math.ceil(span / dt - 1e-9)))
    h = span / n_steps
    for i in range(n_steps):
        psi = _rk4_step(gen, t0 + i * h, psi, h)
    logger.debug(f"rk4 {n_steps} steps h={h:.3e} on [{t0:.4f}, {t1:.4f}]")
    return psi


def _integrate_adaptive(gen: _Generator, psi: np.ndarray, t0: float, t1: float,
                        dt: float, dt_max: float, tol: float) -> np.ndarray:
    """Step doubling with Richardson extrapolation; h never exceeds dt_max."""
    t, h = t0, min(dt, dt_max)
    accepted = rejected = 0
    while t1 - t > 1e-14:
        h = min(h, t1 - t)
        full = _rk4_step(gen, t, psi, h)
        half = _rk4_step(gen, t, psi, 0.5 * h)
        half = _rk4_step(gen, t + 0.5 * h, half, 0.5 * h)
        err = float(np.max(np.abs(half - full)))
        if err <= tol or h < 1e-12:
            psi = half + (half - full) / 15.0
            t += h
            accepted += 1
        else:
            rejected += 1
        scale = 2.0 if err == 0.0 else min(2.0, max(0.2, 0.9 * (tol / err) ** 0.2))
        h = min(h * scale, dt_max)
    logger.debug(f"adaptive: {accepted} accepted, {rejected} rejected steps")
    return psi


def _block_drift(before: np.ndarray, after: np.ndarray,
                 weights: Optional[np.ndarray]) -> float:
    """Relative change of the weighted squared column norms."""
    n0 = np.sum(np.abs(before) ** 2, axis=0)
    n1 = np.sum(np.abs(after) ** 2, axis=0)
    w = np.ones(n0.shape) if weights is None else np.asarray(weights, dtype=float)
    ref = float(np.dot(w, n0))
    if ref == 0.0:
        return 0.0
    return abs(float(np.dot(w, n1 - n0))) / ref


def _integrate_rk4_within(gen: _Generator, psi: np.ndarray, t0: float, t1: float,
                          dt: float, budget: float, weights: Optional[np.ndarray],
                          settings: FockSettings) -> np.ndarray:
    """
    Fixed-step RK4 whose step is shortened until the norm lost over
    [t0, t1] fits the budget. The loss scales as h^5.
    """
    out, drift = psi, 0.0
    for _ in range(settings.step_refinements):
        out = _integrate_rk4(gen, psi, t0, t1, dt)
        drift = _block_drift(psi, out, weights)
        if drift <= budget:
            return out
        dt *= 0.9 * (budget / drift) ** 0.2
        logger.debug(f"norm drift {drift:.2e} over [{t0:.4f}, {t1:.4f}]; retrying with dt={dt:.3e}")
    logger.warning(f"norm drift {drift:.2e} still above {budget:.1e} after "
                   f"{settings.step_refinements} step refinements")
    return out


def _propagate_block(psi: np.ndarray, cfg: SystemConfig, basis: FockBasisSpec,
                     t0: float, t1: float, opts: EvolveOptions,
                     settings: FockSettings, budget: Optional[float] = None,
                     weights: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Interaction-frame propagation of column block psi from t0 to t1.

    With the default step, RK4 keeps the weighted norm loss of the block
    within `budget` (settings.max_norm_drift when None). An explicit
    opts.dt is used as given.
    """
    if t1 <= t0:
        return psi
    if opts.frame == "schrodinger" or opts.rwa:
        h_lab = lab_hamiltonian(cfg, basis, rwa=opts.rwa)
        n_tot = total_number_diagonal(basis)
        w = cfg.omega
        # interaction -> lab at t0, exact lab step, lab -> interaction at t1
        lab = np.exp(-1j * w * t0 * n_tot)[:, None] * psi
        lab = expm_multiply(-1j * (t1 - t0) * h_lab, lab)
        return np.exp(1j * w * t1 * n_tot)[:, None] * lab

    dt = opts.dt if opts.dt is not None else settings.default_dt(cfg.omega)
    dt_max = 2.0 * math.pi / (50.0 * max_frequency(cfg))
    if dt > dt_max:
        raise StepSizeError(f"dt={dt:.4e} exceeds 2pi/(50 w_max)={dt_max:.4e}")
    gen = _Generator(cfg, basis, rwa=False)
    if opts.integrator == "adaptive":
        return _integrate_adaptive(gen, psi, t0, t1, dt, dt_max, opts.tol)
    if opts.dt is not None:
        return _integrate_rk4(gen, psi, t0, t1, dt)
    budget = settings.max_norm_drift if budget is None else budget
    return _integrate_rk4_within(gen, psi, t0, t1, dt, budget, weights, settings)


def _check_tail(state: TruncatedState, settings: FockSettings) -> None:
    for j, label in enumerate(state.basis.mode_order):
        tail = float(state.level_populations(j)[-1])
        if tail > settings.eps_trunc:
            raise TruncationError(label, tail, settings.eps_trunc)


def _evolve_from(state: TruncatedState, cfg: SystemConfig, t0: float, t1: float,
                 opts: EvolveOptions, settings: FockSettings,
                 budget: Optional[float] = None) -> TruncatedState:
    basis = state.basis
    if state.is_dense:
        # U rho U^† as two column-block propagations
        u_rho = _propagate_block(np.array(state.density), cfg, basis, t0, t1, opts, settings,
                                 budget)
        rho = _propagate_block(u_rho.conj().T, cfg, basis, t0, t1, opts, settings, budget)
        rho = 0.5 * (rho + rho.conj().T)
        return TruncatedState(basis, density=rho / np.trace(rho).real)
    block = np.stack(state.vectors, axis=1)
    block = _propagate_block(block, cfg, basis, t0, t1, opts, settings, budget,
                             np.asarray(state.weights))
    return TruncatedState(basis, tuple(block[:, i] for i in range(block.shape[1])),
                          state.weights)


def evolve(state: TruncatedState, cfg: SystemConfig, tau: float,
           opts: Optional[EvolveOptions] = None,
           settings: FockSettings = DEFAULT_SETTINGS) -> TruncatedState:
    """
    Evolve `state` for a rectangle pulse of length tau starting at t = 0.

    Mixtures are evolved branch by branch. Raises TruncationError when the
    top Fock level of some mode holds more than settings.eps_trunc.
    """
    if not (math.isfinite(tau) and tau >= 0.0):
        raise ValidationError(f"pulse length tau={tau} must be >= 0", key="tau")
    _check_basis(cfg, state.basis)
    if state.norm_drift() > 1e-8:
        raise ValidationError(f"input state is not normalised (drift {state.norm_drift():.2e})")
    opts = opts or EvolveOptions()
    out = _evolve_from(state, cfg, 0.0, tau, opts, settings)
    drift = out.norm_drift()
    if drift > settings.max_norm_drift:
        logger.warning(f"norm drift {drift:.2e} after tau={tau:.4f}; consider a smaller dt")
    _check_tail(out, settings)
    return out


def evolve_at(state: TruncatedState, cfg: SystemConfig, times: Sequence[float],
              opts: Optional[EvolveOptions] = None,
              settings: FockSettings = DEFAULT_SETTINGS) -> List[TruncatedState]:
    """States at each of the increasing `times`, integrating piecewise from 0."""
    times = [float(t) for t in times]
    if any(t < 0.0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
        raise ValidationError("sample times must be non-negative and increasing", key="times")
    _check_basis(cfg, state.basis)
    opts = opts or EvolveOptions()
    out, current, t_prev = [], state, 0.0
    span = times[-1] if times else 0.0
    for t in times:
        # each segment gets its share of the per-pulse norm budget
        budget = settings.max_norm_drift * (t - t_prev) / span if span > 0.0 else None
        current = _evolve_from(current, cfg, t_prev, t, opts, settings, budget)
        _check_tail(current, settings)
        out.append(current)
        t_prev = t
    return out


def evolve_trace(state: TruncatedState, cfg: SystemConfig, tau: float,
                 opts: Optional[EvolveOptions] = None,
                 observables: Optional[Dict[str, Callable[[TruncatedState], float]]] = None,
                 n_samples: int = 200,
                 settings: FockSettings = DEFAULT_SETTINGS) -> Tuple[np.ndarray, Dict[str, np.ndarray], TruncatedState]:
    """
    Sample observables at n_samples uniform times on [0, tau].

    Returns (times, {name: values}, final state).
    """
    if n_samples < 2:
        raise ValidationError("n_samples must be >= 2", key="n_samples")
    observables = observables or {"N_tot": total_excitations}
    times = np.linspace(0.0, tau, n_samples)
    states = evolve_at(state, cfg, times, opts, settings)
    values = {name: np.array([fn(s) for s in states]) for name, fn in observables.items()}
    return times, values, states[-1]


def propagator(cfg: SystemConfig, basis: FockBasisSpec, tau: float,
               opts: Optional[EvolveOptions] = None,
               settings: FockSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Dense U(tau) on a small basis (columns are evolved basis vectors)."""
    if basis.total > settings.dense_budget:
        raise DimensionError(f"dense propagator of dim {basis.total} exceeds dense_budget")
    _check_basis(cfg, basis)
    return _propagate_block(np.eye(basis.total, dtype=complex), cfg, basis, 0.0, tau,
                            opts or EvolveOptions(), settings)


def converge_truncation(observable: Callable[[int], float], d0: int,
                        settings: FockSettings = DEFAULT_SETTINGS) -> Tuple[float, int, bool]:
    """
    Double the cutoff until the observable changes by less than
    settings.converge_tol. Returns (value, cutoff, converged).
    """
    d = d0
    value = observable(d)
    while 2 * d <= settings.max_cutoff:
        nxt = observable(2 * d)
        if abs(nxt - value) < settings.converge_tol:
            return nxt, 2 * d, True
        d, value = 2 * d, nxt
    logger.warning(f"truncation not converged at cutoff {d} (tol {settings.converge_tol:.1e})")
    return value, d, False


# ── Measures ─────────────────────────────────────────────────────

def apply_local_rotation(state: TruncatedState, mode: Union[int, str], angle: float) -> TruncatedState:
    """Multiply each Fock level n of `mode` by e^{-i angle n}."""
    if not math.isfinite(angle):
        raise ValidationError(f"rotation angle {angle} is not finite", key="angle")
    j = state.basis.index(mode)
    phase = np.exp(-1j * angle * _level_grid(state.basis)[j])
    if state.is_dense:
        rho = phase[:, None] * state.density * np.conj(phase)[None, :]
        return TruncatedState(state.basis, density=rho)
    return TruncatedState(state.basis, tuple(phase * v for v in state.vectors), state.weights)


def partial_trace(state: TruncatedState, keep: Sequence[Union[int, str]],
                  settings: FockSettings = DEFAULT_SETTINGS) -> TruncatedState:
    """Reduced density matrix on the kept modes (in basis order)."""
    basis = state.basis
    idx = sorted({basis.index(k) for k in keep})
    if not idx or len(idx) == basis.n_modes:
        raise ValidationError("keep must be a nonempty proper subset of the modes", key="keep")
    sub = basis.sub(idx)
    if sub.total > settings.dense_budget:
        raise DimensionError(f"reduced dimension {sub.total} exceeds budget {settings.dense_budget}")
    traced = [i for i in range(basis.n_modes) if i not in idx]
    d_keep = sub.total
    if state.is_dense:
        n = basis.n_modes
        t = state.density.reshape(basis.dims + basis.dims)
        # contract each traced axis with its partner
        letters = "abcdefghijklmnopqrstuvwxyz"
        row = [letters[i] for i in range(n)]
        col = [letters[i + n] for i in range(n)]
        for i in traced:
            col[i] = row[i]
        out = "".join(row[i] for i in idx) + "".join(col[i] for i in idx)
        rho = np.einsum("".join(row) + "".join(col) + "->" + out, t).reshape(d_keep, d_keep)
    else:
        rho = np.zeros((d_keep, d_keep), dtype=complex)
        for w, v in zip(state.weights, state.vectors):
            m = np.transpose(v.reshape(basis.dims), idx + traced).reshape(d_keep, -1)
            rho += w * (m @ m.conj().T)
    rho = 0.5 * (rho + rho.conj().T)
    trace = np.trace(rho).real
    if trace <= 0.0:
        raise ValidationError("reduced state has zero trace", key="state")
    if abs(trace - 1.0) > NORM_TOL:
        logger.debug(f"renormalising reduced state (trace {trace:.12f})")
    # integration leaves a small trace deficit; the reduced state is conditioned on it
    rho = rho / trace
    floor = psd_floor(rho)
    if floor < -1e-10:
        logger.warning(f"reduced state has eigenvalue {floor:.2e} below zero")
    return TruncatedState(sub, density=rho)


def reduced_density(state: TruncatedState, keep: Sequence[Union[int, str]],
                    settings: FockSettings = DEFAULT_SETTINGS) -> np.ndarray:
    return np.array(partial_trace(state, keep, settings).density)


def _as_density(x: Union[TruncatedState, np.ndarray]) -> np.ndarray:
    return x.to_density() if isinstance(x, TruncatedState) else np.asarray(x, dtype=complex)


def fidelity(target: TruncatedState, rho: Union[TruncatedState, np.ndarray]) -> float:
    """<psi|rho|psi> for a pure target; mixed targets are rejected."""
    if not target.is_pure:
        raise ValidationError("fidelity is defined here for pure targets only", key="target")
    psi = target.vector
    if isinstance(rho, TruncatedState):
        if rho.basis.dims != target.basis.dims:
            raise DimensionError(f"basis mismatch {target.basis.dims} vs {rho.basis.dims}")
        if not rho.is_dense:
            return float(sum(w * abs(np.vdot(psi, v)) ** 2
                             for w, v in zip(rho.weights, rho.vectors)))
        rho = rho.density
    rho = np.asarray(rho)
    if rho.shape != (psi.size, psi.size):
        raise DimensionError(f"density shape {rho.shape} does not match target {psi.size}")
    return float(np.real(np.vdot(psi, rho @ psi)))


def trace_distance(rho: Union[TruncatedState, np.ndarray],
                   sigma: Union[TruncatedState, np.ndarray]) -> float:
    a, b = _as_density(rho), _as_density(sigma)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return _dense_trace_distance(a, b)


def expectation(state: TruncatedState, op: sp.spmatrix) -> complex:
    if op.shape != (state.basis.total, state.basis.total):
        raise DimensionError(f"operator shape {op.shape} does not match state")
    if state.is_dense:
        return complex(np.sum((op @ state.density).diagonal()))
    return complex(sum(w * np.vdot(v, op @ v) for w, v in zip(state.weights, state.vectors)))


def number_expectation(state: TruncatedState, mode: Union[int, str]) -> float:
    probs = state.level_populations(mode)
    return float(np.dot(np.arange(probs.size), probs))


def total_excitations(state: TruncatedState) -> float:
    """<a_1^† a_1 + ... + a_n^† a_n + c^† c>."""
    return sum(number_expectation(state, j) for j in range(state.basis.n_modes))


def partial_transpose(rho: np.ndarray, dims: Tuple[int, int]) -> np.ndarray:
    d1, d2 = dims
    return rho.reshape(d1, d2, d1, d2).transpose(0, 3, 2, 1).reshape(d1 * d2, d1 * d2)


def log_negativity(state: Union[TruncatedState, np.ndarray],
                   dims: Optional[Tuple[int, int]] = None) -> float:
    """log2 of the trace norm of the partial transpose of a two-mode state."""
    if isinstance(state, TruncatedState):
        if state.basis.n_modes != 2:
            raise DimensionError(f"log negativity needs a two-mode state, got {state.basis.n_modes}")
        dims = state.basis.dims
        rho = state.to_density()
    else:
        rho = np.asarray(state, dtype=complex)
        if dims is None:
            raise DimensionError("dims are required for a bare matrix")
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1] or rho.shape[0] != dims[0] * dims[1]:
        raise DimensionError(f"density shape {rho.shape} does not match dims {dims}")
    pt = partial_transpose(rho, tuple(dims))
    norm = float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (pt + pt.conj().T)))))
    return max(0.0, math.log2(norm))


# ── Wigner function ──────────────────────────────────────────────

WIGNER_CONVENTION = "a=(x+ip)/sqrt2, [x,p]=i, integral W dx dp = 1"


def wigner(state: Union[TruncatedState, np.ndarray], xvec: np.ndarray,
           pvec: np.ndarray) -> np.ndarray:
    """
    Wigner function W[p_index, x_index] of a single-mode state via the
    Laguerre series of the displaced parity.
    """
    rho = _as_density(state)
    if isinstance(state, TruncatedState) and state.basis.n_modes != 1:
        raise DimensionError("wigner needs a single-mode state; reduce it first")
    xvec, pvec = np.asarray(xvec, dtype=float), np.asarray(pvec, dtype=float)
    if not (np.all(np.isfinite(xvec)) and np.all(np.isfinite(pvec))):
        raise ValidationError("phase-space grid must be finite", key="grid")
    if (xvec.size > 1 and np.max(np.diff(xvec)) > 0.5) or (pvec.size > 1 and np.max(np.diff(pvec)) > 0.5):
        logger.warning("Wigner grid spacing above 0.5; normalisation check will be coarse")
    x, p = np.meshgrid(xvec, pvec)
    a = (x + 1j * p) / math.sqrt(2.0)
    b = 4.0 * np.abs(a) ** 2
    d = rho.shape[0]
    w = np.zeros_like(x)
    for m in range(d):
        if abs(rho[m, m]) > 0.0:
            w += np.real(rho[m, m] * (-1) ** m * eval_genlaguerre(m, 0, b))
        for n in range(m + 1, d):
            if rho[m, n] == 0.0:
                continue
            coef = (-1) ** m * math.exp(0.5 * (gammaln(m + 1) - gammaln(n + 1)))
            w += 2.0 * np.real(rho[m, n] * coef * (2.0 * a) ** (n - m)
                               * eval_genlaguerre(m, n - m, b))
    return w * np.exp(-0.5 * b) / math.pi


def wigner_integral(w: np.ndarray, xvec: np.ndarray, pvec: np.ndarray) -> float:
    return float(trapezoid(trapezoid(w, xvec, axis=1), pvec))


def wigner_csv_rows(w: np.ndarray, xvec: np.ndarray, pvec: np.ndarray) -> List[Tuple[float, float, float]]:
    """(x, p, W) rows, x fastest."""
    return [(float(x), float(p), float(w[i, j]))
            for i, p in enumerate(pvec) for j, x in enumerate(xvec)]


# ── Serialisation ────────────────────────────────────────────────

def state_to_bytes(state: TruncatedState) -> bytes:
    """
    Binary container: magic, version, kind (0 mixture / 1 dense), mode count,
    cutoffs, branch count, weights ('<f8'), then '<c16' amplitudes.
    """
    dims = state.basis.dims
    kind = 1 if state.is_dense else 0
    head = BINARY_MAGIC + struct.pack("<BBI", BINARY_VERSION, kind, len(dims))
    head += np.asarray(dims, dtype="<u4").tobytes()
    if state.is_dense:
        return head + struct.pack("<I", 0) + state.density.astype("<c16").tobytes()
    body = struct.pack("<I", len(state.vectors))
    body += np.asarray(state.weights, dtype="<f8").tobytes()
    body += b"".join(v.astype("<c16").tobytes() for v in state.vectors)
    return head + body


def state_from_bytes(blob: bytes, mode_order: Sequence[str] = ()) -> TruncatedState:
    if blob[:4] != BINARY_MAGIC:
        raise ValidationError("not a qbus state container")
    version, kind, n_modes = struct.unpack_from("<BBI", blob, 4)
    if version != BINARY_VERSION:
        raise ValidationError(f"unsupported container version {version}")
    off = 4 + struct.calcsize("<BBI")
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype="<u4", count=n_modes, offset=off))
    off += 4 * n_modes
    (n_branches,) = struct.unpack_from("<I", blob, off)
    off += 4
    basis = FockBasisSpec(dims, tuple(mode_order))
    dim = basis.total
    if kind == 1:
        rho = np.frombuffer(blob, dtype="<c16", count=dim * dim, offset=off).reshape(dim, dim)
        return TruncatedState(basis, density=rho.astype(complex))
    weights = np.frombuffer(blob, dtype="<f8", count=n_branches, offset=off)
    off += 8 * n_branches
    amps = np.frombuffer(blob, dtype="<c16", count=dim * n_branches, offset=off)
    vecs = tuple(amps[i * dim:(i + 1) * dim].astype(complex) for i in range(n_branches))
    return TruncatedState(basis, vecs, tuple(float(w) for w in weights))


def state_to_json(state: TruncatedState, max_dim: int = 4096) -> Dict:
    """Nested [re, im] pairs; only for small bases."""
    if state.basis.total > max_dim:
        raise DimensionError(f"state of dim {state.basis.total} too large for JSON")

    def enc(arr):
        return [[float(z.real), float(z.imag)] for z in np.ravel(arr)]

    doc = {"dims": list(state.basis.dims), "modes": list(state.basis.mode_order)}
    if state.is_dense:
        doc["kind"] = "density"
        doc["density"] = enc(state.density)
    else:
        doc["kind"] = "mixture"
        doc["weights"] = list(state.weights)
        doc["vectors"] = [enc(v) for v in state.vectors]
    return doc
