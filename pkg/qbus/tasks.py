"""
Experiment drivers: transfer runs and sweeps, phase-corrected transfer,
W-type transfer with designed couplings and entanglement preparation.

Every run builds its system from a designed pulse, evolves the Fock-space
oracle and scores the result. Sweeps fan independent runs out over a
thread pool; executor.map keeps the input order so tables are deterministic.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy.optimize import root

from qbus.analytic import CouplingWeights, SystemConfig
from qbus.errors import StepSizeError, TruncationError, UnboundedPotentialError, ValidationError
from qbus.fockspace import (
    DEFAULT_SETTINGS, EvolveOptions, FockBasisSpec, FockSettings, TruncatedState,
    apply_local_rotation, cat_vector, coherent_vector, converge_truncation,
    default_truncation, evolve, evolve_at, evolve_trace, fidelity, fock_vector,
    log_negativity, partial_trace, thermal_channel, thermal_weights,
    total_excitations, trace_distance,
)
from qbus.pulsedesign import (
    PulseParams, amplitude_error, ep_pulse, qst_pulse,
    rotation_angle, rwa_comparison_pulse,
)

logger = logging.getLogger(__name__)

R = TypeVar("R")

METHODS = ("optimized", "rwa")
JITTER_SAMPLES = 23
TRACE_SAMPLES = 200
# cutoffs for the few-excitation W and EP runs
W_CUTOFF = 5
EP_CUTOFF = 6
EP_CHANNEL_CUTOFF = 10
# cutoff added to a mode each time its top level overflows
CUTOFF_STEP = 4


# ── Inputs ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class InputState:
    """
    Single-mode input: "fock:n", "coherent:|a|[@phase]" or "cat:|a|[@phase]"
    (even cat).
    """
    kind: str
    value: complex

    def __post_init__(self):
        if self.kind not in ("fock", "coherent", "cat"):
            raise ValidationError(f"unknown input kind {self.kind!r}", key="input")
        if self.kind == "fock":
            n = self.value.real
            if self.value.imag != 0.0 or n < 0 or not float(n).is_integer():
                raise ValidationError(f"Fock level {self.value} must be a non-negative integer",
                                      key="input")

    @classmethod
    def parse(cls, text: str) -> "InputState":
        try:
            kind, _, arg = text.strip().partition(":")
            mag, _, phase = arg.partition("@")
            value = float(mag) * complex(math.cos(float(phase or 0.0)),
                                         math.sin(float(phase or 0.0)))
        except ValueError:
            raise ValidationError(f"cannot parse input state {text!r}", key="input")
        return cls(kind.strip().lower(), value)

    @classmethod
    def fock(cls, n: int) -> "InputState":
        return cls("fock", complex(n))

    @classmethod
    def coherent(cls, alpha: complex) -> "InputState":
        return cls("coherent", complex(alpha))

    @classmethod
    def cat(cls, alpha: complex) -> "InputState":
        return cls("cat", complex(alpha))

    @property
    def n(self) -> int:
        return int(self.value.real)

    @property
    def mean_n(self) -> float:
        r2 = abs(self.value) ** 2
        if self.kind == "fock":
            return float(self.n)
        if self.kind == "coherent":
            return r2
        return r2 * math.tanh(r2)

    def min_cutoff(self) -> int:
        if self.kind == "fock":
            return self.n + 2
        r = abs(self.value)
        return int(math.ceil(r * r + 6.0 * r))

    def cutoff(self) -> int:
        return max(default_truncation(self.mean_n), self.min_cutoff())

    def vector(self, d: int) -> np.ndarray:
        if self.kind == "fock":
            return fock_vector(self.n, d)
        if self.kind == "coherent":
            return coherent_vector(self.value, d)
        return cat_vector(self.value, d, even=True)

    def label(self) -> str:
        if self.kind == "fock":
            return f"fock:{self.n}"
        return f"{self.kind}:{abs(self.value):g}@{np.angle(self.value):g}"


@dataclass(frozen=True)
class Numerics:
    """
    Numerical plumbing shared by all runs.

    trunc: node cutoff (int), None for the default rule, "auto" to double
    until converged.
    """
    opts: EvolveOptions = field(default_factory=EvolveOptions)
    settings: FockSettings = DEFAULT_SETTINGS
    trunc: Union[int, str, None] = None
    workers: int = 1

    def dt(self, omega: float = 1.0) -> float:
        return self.opts.dt if self.opts.dt is not None else self.settings.default_dt(omega)


DEFAULT_NUMERICS = Numerics()


@dataclass(frozen=True)
class RunFailure:
    """Marker left in a sweep when one point failed numerically."""
    item: object
    error: str
    kind: str

    @property
    def status(self) -> str:
        return f"failed: {self.kind}"


def fan_out(fn: Callable, items: Sequence, workers: int = 1,
            keep_going: bool = False) -> List:
    """
    Ordered map over a thread pool; inline when workers <= 1.

    With keep_going, truncation and step-size failures become RunFailure
    markers in place of results instead of aborting the whole sweep.
    """
    items = list(items)
    call = fn
    if keep_going:
        def call(x):
            try:
                return fn(x)
            except (TruncationError, StepSizeError) as e:
                logger.error(f"run {x} failed: {e}")
                return RunFailure(x, str(e), type(e).__name__)
    if workers <= 1 or len(items) <= 1:
        return [call(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(call, items))


def _check_method(method: str) -> str:
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}", key="method")
    return method


def grow_until_fits(run: Callable[[FockBasisSpec], R], basis: FockBasisSpec,
                    settings: FockSettings = DEFAULT_SETTINGS,
                    grow: bool = True) -> Tuple[R, FockBasisSpec]:
    """
    Call run(basis), widening the mode named by each TruncationError by
    CUTOFF_STEP and retrying. A mode never grows past
    max(settings.max_cutoff, twice its starting cutoff). With grow=False
    the first error propagates. Returns (result, basis actually used).
    """
    caps = tuple(max(settings.max_cutoff, 2 * d) for d in basis.dims)
    while True:
        try:
            return run(basis), basis
        except TruncationError as e:
            j = basis.index(e.mode)
            if not grow or basis.dims[j] >= caps[j]:
                raise
            dims = list(basis.dims)
            dims[j] = min(caps[j], dims[j] + CUTOFF_STEP)
            logger.warning(f"mode {e.mode} overflowed at cutoff {basis.dims[j]} "
                           f"(tail {e.tail:.2e}); retrying with {dims[j]}")
            basis = FockBasisSpec(tuple(dims), basis.mode_order)



# ── QST ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QstTask:
    input_state: InputState
    m: int
    channel_temp: float = 0.0
    jitter: float = 0.0
    apply_correction: bool = False
    method: str = "optimized"
    omega: float = 1.0

    def __post_init__(self):
        _check_method(self.method)
        if self.m < 2:
            raise UnboundedPotentialError(self.m, "QST")
        if not (math.isfinite(self.channel_temp) and self.channel_temp >= 0.0):
            raise ValidationError(f"channel temperature {self.channel_temp} must be >= 0", key="T")
        if not (math.isfinite(self.jitter) and self.jitter >= 0.0):
            raise ValidationError(f"jitter {self.jitter} must be >= 0", key="jitter")
        if self.apply_correction and self.method == "rwa":
            raise ValidationError("phase correction is defined for optimized pulses only",
                                  key="apply_correction")

    def pulse(self) -> PulseParams:
        p = qst_pulse(self.m, self.omega)
        return p if self.method == "optimized" else rwa_comparison_pulse(p)


@dataclass
class QstResult:
    input: str
    m: int
    method: str
    channel_temp: float
    jitter: float
    apply_correction: bool
    fidelity: float
    infidelity: float
    theta_r: float
    pulse: PulseParams
    dims: Tuple[int, ...]
    dt: float
    wall_time: float
    converged: bool = True
    nominal_infidelity: Optional[float] = None
    frame: str = "interaction"

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["pulse"] = self.pulse.to_dict()
        d["dims"] = list(self.dims)
        return d


def transfer_target(inp: InputState, d: int) -> TruncatedState:
    """Input state after the ideal exchange a_2 -> -a_1: amplitude n gets (-1)^n."""
    v = inp.vector(d) * (-1.0) ** np.arange(d)
    return TruncatedState.pure(FockBasisSpec.single(d, "a2"), v)


def _qst_system(pulse: PulseParams) -> SystemConfig:
    return SystemConfig.build(pulse.g_prime, (1.0, 1.0), pulse.omega)


def thermal_node_levels(temperature: float, omega: float = 1.0,
                        settings: FockSettings = DEFAULT_SETTINGS) -> int:
    """
    Node levels a thermal channel pushes into the nodes. Level L ends up
    with about r^L of the channel population, r = x / (2 - x) and
    x = e^{-omega/T}; levels are counted until r^L < eps_trunc / 10.
    """
    if temperature == 0.0:
        return 0
    x = math.exp(-omega / temperature)
    if x == 0.0:
        return 0
    ratio = x / (2.0 - x)
    return int(math.ceil(math.log(0.1 * settings.eps_trunc) / math.log(ratio)))


def _qst_basis(inp: InputState, d: int, temperature: float, omega: float,
               settings: FockSettings) -> FockBasisSpec:
    """Node cutoff d (raised for a thermal channel) and a channel cutoff above the Boltzmann cut."""
    n_top = thermal_weights(temperature, omega, settings.thermal_tail)[-1][0]
    d_node = max(d, inp.min_cutoff() + thermal_node_levels(temperature, omega, settings))
    return FockBasisSpec.for_modes(2, d_node, d_channel=max(d_node, n_top + 8))


def _receiver_states(task: QstTask, durations: Sequence[float], basis: FockBasisSpec,
                     numerics: Numerics) -> List[TruncatedState]:
    """Receiver (a2) reduced states after each pulse duration."""
    cfg = _qst_system(task.pulse())
    d_send, d_recv, _ = basis.dims
    start = thermal_channel([task.input_state.vector(d_send), fock_vector(0, d_recv)],
                            task.channel_temp, basis, task.omega, numerics.settings)
    if len(durations) == 1:
        finals = [evolve(start, cfg, durations[0], numerics.opts, numerics.settings)]
    else:
        finals = evolve_at(start, cfg, durations, numerics.opts, numerics.settings)
    return [partial_trace(s, ["a2"], numerics.settings) for s in finals]


def _fitted_receivers(task: QstTask, durations: Sequence[float], d: int, numerics: Numerics,
                      grow: bool) -> Tuple[List[TruncatedState], FockBasisSpec]:
    basis = _qst_basis(task.input_state, d, task.channel_temp, task.omega, numerics.settings)
    return grow_until_fits(lambda b: _receiver_states(task, durations, b, numerics),
                           basis, numerics.settings, grow)


def _score(task: QstTask, receiver: TruncatedState, correct: bool) -> float:
    if correct:
        receiver = apply_local_rotation(receiver, 0, rotation_angle(qst_pulse(task.m, task.omega)))
    return fidelity(transfer_target(task.input_state, receiver.basis.dims[0]), receiver)


def _jitter_durations(tau: float, jitter: float) -> Tuple[List[float], int]:
    """Scan of durations around tau and the index of tau itself."""
    if jitter == 0.0:
        return [tau], 0
    half = JITTER_SAMPLES // 2
    # tau stays on the grid when the lower end is clipped at zero
    left = np.linspace(max(0.0, tau - jitter), tau, half + 1)
    right = np.linspace(tau, tau + jitter, half + 1)[1:]
    return [float(t) for t in np.concatenate([left, right])], half


def _run_at_cutoff(task: QstTask, d: int, numerics: Numerics, grow: bool
                   ) -> Tuple[float, Optional[float], FockBasisSpec]:
    durations, nominal = _jitter_durations(task.pulse().tau, task.jitter)
    receivers, basis = _fitted_receivers(task, durations, d, numerics, grow)
    fids = [_score(task, r, task.apply_correction) for r in receivers]
    if task.jitter == 0.0:
        return fids[0], None, basis
    return min(fids), fids[nominal], basis


def run_qst(task: QstTask, numerics: Numerics = DEFAULT_NUMERICS) -> QstResult:
    """
    Transfer |psi, thermal(T), 0> through the channel and score the
    receiver against the phase-absorbed target. With jitter > 0 the worst
    fidelity over durations in [tau - jitter, tau + jitter] is reported.

    Unless trunc is an explicit int, a mode whose top level overflows is
    widened and the run repeated.
    """
    started = time.time()
    pulse = task.pulse()
    d0 = task.input_state.cutoff()
    converged = True
    if numerics.trunc == "auto":
        runs = {}

        def observable(d):
            runs[d] = _run_at_cutoff(task, d, numerics, grow=True)
            return runs[d][0]

        fid, d, converged = converge_truncation(observable, d0, numerics.settings)
        _, nominal, basis = runs[d]
    else:
        explicit = numerics.trunc is not None
        d = int(numerics.trunc) if explicit else d0
        if d < task.input_state.min_cutoff():
            raise ValidationError(f"cutoff {d} too small for {task.input_state.label()}",
                                  key="trunc")
        fid, nominal, basis = _run_at_cutoff(task, d, numerics, grow=not explicit)

    result = QstResult(
        input=task.input_state.label(), m=task.m, method=task.method,
        channel_temp=task.channel_temp, jitter=task.jitter,
        apply_correction=task.apply_correction, fidelity=fid, infidelity=1.0 - fid,
        theta_r=rotation_angle(qst_pulse(task.m, task.omega)), pulse=pulse,
        dims=basis.dims, dt=numerics.dt(task.omega), wall_time=time.time() - started,
        converged=converged,
        nominal_infidelity=None if nominal is None else 1.0 - nominal,
    )
    logger.info(f"qst {result.input} m={task.m} {task.method} T={task.channel_temp:g}: "
                f"infidelity={result.infidelity:.4e} ({result.wall_time:.2f}s)")
    return result


def _nominal_receiver(task: QstTask, numerics: Numerics) -> TruncatedState:
    explicit = isinstance(numerics.trunc, int)
    d = int(numerics.trunc) if explicit else task.input_state.cutoff()
    receivers, _ = _fitted_receivers(task, [task.pulse().tau], d, numerics, grow=not explicit)
    return receivers[0]


def transfer_receiver(task: QstTask, numerics: Numerics = DEFAULT_NUMERICS
                      ) -> Tuple[TruncatedState, float, int]:
    """
    Receiver state after one nominal pulse, phase-corrected when the task
    asks for it, with its fidelity and the receiver cutoff used.
    """
    receiver = _nominal_receiver(task, numerics)
    if task.apply_correction:
        receiver = apply_local_rotation(receiver, 0, rotation_angle(qst_pulse(task.m, task.omega)))
    d = receiver.basis.dims[0]
    return receiver, fidelity(transfer_target(task.input_state, d), receiver), d



def _qst_row(task: QstTask, outcome) -> Dict:
    pulse = task.pulse()
    row = {
        "input": task.input_state.label(), "m": task.m, "method": task.method,
        "channel_temp": task.channel_temp, "jitter": task.jitter,
        "apply_correction": task.apply_correction,
        "tau": pulse.tau, "g_prime": pulse.g_prime,
    }
    if isinstance(outcome, RunFailure):
        row.update(status=outcome.status, fidelity=None, infidelity=None,
                   nominal_infidelity=None, dims=None, dt=None, wall_time=None,
                   converged=False)
    else:
        row.update(status="ok", fidelity=outcome.fidelity, infidelity=outcome.infidelity,
                   nominal_infidelity=outcome.nominal_infidelity,
                   dims="x".join(str(d) for d in outcome.dims), dt=outcome.dt,
                   wall_time=outcome.wall_time, converged=outcome.converged)
    return row


def _qst_rows(tasks: Sequence[QstTask], numerics: Numerics,
              keep_going: bool) -> List[Dict]:
    outcomes = fan_out(lambda t: run_qst(t, numerics), tasks, numerics.workers, keep_going)
    return [_qst_row(t, o) for t, o in zip(tasks, outcomes)]


def sweep_m(input_state: InputState, m_range: Iterable[int] = range(5, 18),
            methods: Sequence[str] = METHODS, channel_temp: float = 0.0,
            numerics: Numerics = DEFAULT_NUMERICS, keep_going: bool = False) -> List[Dict]:
    """Rows (m, method, tau, g', infidelity, n G(m)^2) for each method."""
    tasks = [QstTask(input_state, m, channel_temp, method=_check_method(method))
             for m in m_range for method in methods]
    rows = _qst_rows(tasks, numerics, keep_going)
    for row in rows:
        row["predicted"] = input_state.mean_n * amplitude_error(row["m"]) ** 2
    return rows


def sweep_phase(alpha_mag: float, m: int, phase_grid: Sequence[float],
                method: str = "optimized", numerics: Numerics = DEFAULT_NUMERICS,
                keep_going: bool = False) -> List[Dict]:
    """Infidelity of coherent |alpha| e^{i phi} versus phi."""
    tasks = [QstTask(InputState.coherent(alpha_mag * complex(math.cos(phi), math.sin(phi))),
                     m, method=method) for phi in phase_grid]
    rows = _qst_rows(tasks, numerics, keep_going)
    for phi, row in zip(phase_grid, rows):
        row["phi"] = float(phi)
    return rows


def sweep_temperature(input_state: InputState, m: int, temps: Sequence[float],
                      method: str = "optimized", numerics: Numerics = DEFAULT_NUMERICS,
                      keep_going: bool = False) -> List[Dict]:
    """Infidelity versus initial channel temperature (units of omega)."""
    tasks = [QstTask(input_state, m, float(t), method=method) for t in temps]
    return _qst_rows(tasks, numerics, keep_going)


def sweep_jitter(input_state: InputState, m_list: Sequence[int],
                 delta_tau_list: Sequence[float], method: str = "optimized",
                 numerics: Numerics = DEFAULT_NUMERICS, keep_going: bool = False) -> List[Dict]:
    """Worst-case infidelity over a duration scan of width ±delta_tau."""
    tasks = [QstTask(input_state, m, jitter=float(dt), method=method)
             for m in m_list for dt in delta_tau_list]
    rows = _qst_rows(tasks, numerics, keep_going)
    for row in rows:
        row["delta_tau"] = row["jitter"]
        row["max_infidelity"] = row["infidelity"]
        if row["status"] == "ok":
            nominal = row["nominal_infidelity"]
            if nominal is None:
                nominal = row["infidelity"]
            row["nominal_infidelity"] = nominal
            row["increase"] = row["infidelity"] - nominal
        else:
            row["increase"] = None
    return rows


def compare_correction(input_state: InputState, m_range: Iterable[int],
                       numerics: Numerics = DEFAULT_NUMERICS) -> List[Dict]:
    """Fidelity with and without the local rotation, one evolution per m."""
    def one(m):
        task = QstTask(input_state, m)
        receiver = _nominal_receiver(task, numerics)
        return {"m": m, "theta_r": rotation_angle(task.pulse()),
                "fidelity": _score(task, receiver, False),
                "fidelity_corrected": _score(task, receiver, True)}
    return fan_out(one, list(m_range), numerics.workers)


def channel_fock_scan(input_state: InputState, m: int, n_c_values: Sequence[int] = (0, 1, 2, 3),
                      numerics: Numerics = DEFAULT_NUMERICS) -> List[Dict]:
    """
    Receiver state and channel restoration for channel seeds |n_c>.

    receiver_distance is the trace distance to the n_c = 0 receiver state;
    channel_distance compares the final channel marginal with |n_c><n_c|.
    """
    pulse = qst_pulse(m)
    cfg = _qst_system(pulse)
    d = int(numerics.trunc) if isinstance(numerics.trunc, int) else input_state.cutoff()
    d_c = max(d, max(n_c_values) + 8)
    basis = FockBasisSpec.for_modes(2, d, d_channel=d_c)

    def one(n_c):
        start = TruncatedState.pure(basis, np.kron(np.kron(input_state.vector(d), fock_vector(0, d)),
                                                   fock_vector(n_c, d_c)))
        final = evolve(start, cfg, pulse.tau, numerics.opts, numerics.settings)
        seed = TruncatedState.pure(FockBasisSpec.single(d_c, "c"), fock_vector(n_c, d_c))
        return (partial_trace(final, ["a2"], numerics.settings),
                trace_distance(partial_trace(final, ["c"], numerics.settings), seed))

    outcomes = fan_out(one, list(n_c_values), numerics.workers)
    reference = outcomes[0][0]
    return [{"n_c": n_c, "receiver_distance": trace_distance(rec, reference),
             "channel_distance": ch} for n_c, (rec, ch) in zip(n_c_values, outcomes)]


def excitation_trace(m: int, method: str = "optimized", n_samples: int = TRACE_SAMPLES,
                     rwa_generator: bool = False,
                     numerics: Numerics = DEFAULT_NUMERICS) -> Dict:
    """
    <N_tot>(t) along a transfer pulse starting from |1, 0, 0>.
    rwa_generator evolves with the number-conserving Hamiltonian instead.
    """
    pulse = QstTask(InputState.fock(1), m, method=method).pulse()
    cfg = _qst_system(pulse)
    d = int(numerics.trunc) if isinstance(numerics.trunc, int) else default_truncation(1)
    basis = FockBasisSpec.for_modes(2, d)
    start = TruncatedState.pure(basis, np.kron(np.kron(fock_vector(1, d), fock_vector(0, d)),
                                               fock_vector(0, d)))
    opts = EvolveOptions(numerics.opts.integrator, numerics.opts.dt, numerics.opts.frame,
                         rwa_generator, numerics.opts.tol)
    times, values, _ = evolve_trace(start, cfg, pulse.tau, opts,
                                    {"N_tot": total_excitations}, n_samples, numerics.settings)
    n_tot = values["N_tot"]
    return {"m": m, "method": method, "rwa_generator": rwa_generator,
            "times": times, "n_tot": n_tot,
            "max_deviation": float(np.max(np.abs(n_tot - n_tot[0]))),
            "end_deviation": float(abs(n_tot[-1] - n_tot[0]))}


@dataclass(frozen=True)
class RotationGeometry:
    """
    K11 and K21 of an optimized pulse as the sum and difference of a fixed
    half-vector 1/2 and a rotating half-vector (-1)^m e^{i theta}/2.
    """
    m: int
    tau: float
    theta_r: float
    fixed: complex
    rotating: complex

    @property
    def k11(self) -> complex:
        return self.rotating + self.fixed

    @property
    def k21(self) -> complex:
        return self.rotating - self.fixed

    def to_dict(self) -> Dict:
        return {"m": self.m, "tau": self.tau, "theta_r": self.theta_r,
                "fixed": self.fixed, "rotating": self.rotating,
                "k11": self.k11, "k21": self.k21}


def rotation_geometry(m: int) -> RotationGeometry:
    p = qst_pulse(m)
    rotating = 0.5 * (-1) ** m * complex(math.cos(p.theta), math.sin(p.theta))
    return RotationGeometry(m=m, tau=p.tau, theta_r=rotation_angle(p),
                            fixed=0.5 + 0.0j, rotating=rotating)


def rotation_series(m_range: Iterable[int]) -> List[Dict]:
    """theta_r against pulse duration."""
    rows = []
    for m in m_range:
        g = rotation_geometry(m)
        rows.append({"m": m, "tau": g.tau, "theta_r": g.theta_r,
                     "abs_k11": abs(g.k11), "abs_k21": abs(g.k21)})
    return rows


# ── W-type transfer ──────────────────────────────────────────────

@dataclass(frozen=True)
class WTransferSpec:
    """Real amplitudes C_1..C_ns and the receiver weights k_{ns+1}..k_{2ns}."""
    amplitudes: Tuple[float, ...]
    receiver_weights: Tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.amplitudes)
        r = tuple(float(x) for x in self.receiver_weights)
        object.__setattr__(self, "amplitudes", c)
        object.__setattr__(self, "receiver_weights", r)
        if len(c) < 2:
            raise ValidationError("a W-type state needs at least two senders", key="amplitudes")
        if abs(sum(x * x for x in c) - 1.0) > 1e-10:
            raise ValidationError(f"amplitudes must be normalised, sum C^2 = {sum(x * x for x in c)}",
                                  key="amplitudes")
        if len(r) != len(c):
            raise ValidationError("one receiver weight per sender is required",
                                  key="receiver_weights")
        if not any(x != 0.0 for x in r):
            raise ValidationError("receiver weights are all zero", key="receiver_weights")
        # ratio rule k_{ns+i} / k_{ns+j} = C_i / C_j
        scale = sum(a * b for a, b in zip(c, r))
        if any(abs(b - scale * a) > 1e-12 * max(1.0, abs(scale)) for a, b in zip(c, r)):
            raise ValidationError("receiver weights must be proportional to the amplitudes",
                                  key="receiver_weights")

    @classmethod
    def with_scale(cls, amplitudes: Sequence[float], scale: float = 1.0) -> "WTransferSpec":
        c = tuple(float(x) for x in amplitudes)
        return cls(c, tuple(scale * x for x in c))

    @property
    def n_senders(self) -> int:
        return len(self.amplitudes)


def sender_residuals(c: Sequence[float], k: Sequence[float]) -> np.ndarray:
    """
    sum_i C_i (delta_{i j0} - 2 k_i k_j0 / sum k^2) for each sender j0;
    zero when no excitation is left on the sender side.
    """
    c = np.asarray(c, dtype=float)
    k = np.asarray(k, dtype=float)
    ns = c.size
    ks = k[:ns]
    return c - 2.0 * ks * np.dot(c, ks) / np.dot(k, k)


def _two_sender_weights(c: np.ndarray, r_sq: float) -> np.ndarray:
    """Positive k_2^2 root of the sender quadratic, then k_1^2 from the difference rule."""
    c1, c2 = c
    s = c1 * c1 + c2 * c2
    b = (c1 * c1 - c2 * c2) * r_sq / s
    q = (c1 * c2 * r_sq / s) ** 2
    k2_sq = 0.5 * (-b + math.sqrt(b * b + 4.0 * q))
    k1_sq = k2_sq + b
    return np.array([math.copysign(math.sqrt(max(k1_sq, 0.0)), c1),
                     math.copysign(math.sqrt(max(k2_sq, 0.0)), c2)])


def design_w_couplings(spec: WTransferSpec) -> CouplingWeights:
    """
    Sender weights that leave no excitation on the sender side after an
    exchange pulse. Zero-amplitude senders are decoupled; two active senders
    use the closed-form quadratic, more are solved with a damped Newton
    iteration seeded at the symmetric point.
    """
    c = np.asarray(spec.amplitudes)
    receivers = np.asarray(spec.receiver_weights)
    r_sq = float(np.dot(receivers, receivers))
    active = np.flatnonzero(c != 0.0)
    k_send = np.zeros(c.size)
    ca = c[active]
    if active.size == 1:
        k_send[active] = math.copysign(math.sqrt(r_sq), ca[0])
    elif active.size == 2:
        k_send[active] = _two_sender_weights(ca, r_sq)
    else:
        def fn(ks):
            return sender_residuals(ca, np.concatenate([ks, receivers]))
        seed = np.sign(ca) * math.sqrt(r_sq / active.size)
        sol = root(fn, seed, method="hybr", options={"xtol": 1e-14})
        if not sol.success:
            sol = root(fn, seed, method="lm", options={"xtol": 1e-14, "ftol": 1e-14})
        if not sol.success:
            raise ValidationError(f"sender restrictions not solvable: {sol.message}",
                                  key="amplitudes")
        k_send[active] = sol.x
    weights = CouplingWeights(tuple(k_send) + tuple(receivers), 1.0)
    logger.debug(f"designed W couplings {weights.k}; residual "
                 f"{np.max(np.abs(sender_residuals(c, weights.k))):.2e}")
    return weights


def ideal_transfer_amplitudes(c: Sequence[float], k: Sequence[float]) -> np.ndarray:
    """Single-excitation amplitudes after a_i -> a_i - (2 k_i / sum k^2) sum_j k_j a_j."""
    k = np.asarray(k, dtype=float)
    full = np.zeros(k.size)
    full[:len(c)] = c
    reflect = np.eye(k.size) - 2.0 * np.outer(k, k) / np.dot(k, k)
    return reflect @ full


@dataclass
class WTransferResult:
    amplitudes: Tuple[float, ...]
    weights: Tuple[float, ...]
    m: int
    channel_fock: int
    fidelity_ideal_transform: float
    fidelity_full: float
    sender_residual: float
    pulse: PulseParams
    dims: Tuple[int, ...]
    wall_time: float

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["pulse"] = self.pulse.to_dict()
        d["dims"] = list(self.dims)
        return d


def _single_excitation_vector(amps: Sequence[float], basis: FockBasisSpec,
                              modes: Sequence[int]) -> np.ndarray:
    vec = np.zeros(basis.total, dtype=complex)
    for a, j in zip(amps, modes):
        if a == 0.0:
            continue
        occ = [0] * basis.n_modes
        occ[j] = 1
        vec[np.ravel_multi_index(occ, basis.dims)] += a
    return vec


def run_w_transfer(spec: WTransferSpec, m: int, channel_fock: int = 0,
                   numerics: Numerics = DEFAULT_NUMERICS) -> WTransferResult:
    """
    Move a W-type state from the senders to the receivers with one optimized
    exchange pulse. fidelity_full includes the strong-coupling rotation the
    ideal transform leaves out.
    """
    started = time.time()
    weights = design_w_couplings(spec)
    ns = spec.n_senders
    c = np.asarray(spec.amplitudes)

    final_amps = ideal_transfer_amplitudes(c, weights.k)
    target = np.concatenate([np.zeros(ns), c])
    fid_ideal = float(abs(np.dot(target, final_amps)) ** 2)

    pulse = qst_pulse(m)
    cfg = SystemConfig(CouplingWeights(weights.k, pulse.g_prime / weights.norm), pulse.omega)
    explicit = isinstance(numerics.trunc, int)
    d = int(numerics.trunc) if explicit else W_CUTOFF
    basis = FockBasisSpec(tuple([d] * (2 * ns) + [max(d, channel_fock + 4)]))

    def simulate(b: FockBasisSpec) -> TruncatedState:
        node_vec = _single_excitation_vector(c, b.sub(range(2 * ns)), range(ns))
        start = TruncatedState.pure(b, np.kron(node_vec, fock_vector(channel_fock, b.dims[-1])))
        final = evolve(start, cfg, pulse.tau, numerics.opts, numerics.settings)
        return partial_trace(final, list(range(ns, 2 * ns)), numerics.settings)

    receivers, basis = grow_until_fits(simulate, basis, numerics.settings, grow=not explicit)
    rec_target = TruncatedState.pure(
        receivers.basis, _single_excitation_vector(c, receivers.basis, range(ns)))
    fid_full = fidelity(rec_target, receivers)

    result = WTransferResult(
        amplitudes=spec.amplitudes, weights=weights.k, m=m, channel_fock=channel_fock,
        fidelity_ideal_transform=fid_ideal, fidelity_full=fid_full,
        sender_residual=float(np.sum(np.abs(sender_residuals(c, weights.k)))),
        pulse=pulse, dims=basis.dims, wall_time=time.time() - started,
    )
    logger.info(f"wstate C={spec.amplitudes} m={m}: ideal={fid_ideal:.10f} "
                f"full={fid_full:.6f} ({result.wall_time:.2f}s)")
    return result


def channel_state_dependence(spec: WTransferSpec, m: int, n_c_values: Sequence[int] = (0, 1, 2),
                             numerics: Numerics = DEFAULT_NUMERICS) -> List[Dict]:
    """Full-simulation W-transfer fidelity for channel seeds |n_c>."""
    results = fan_out(lambda n: run_w_transfer(spec, m, n, numerics), list(n_c_values),
                      numerics.workers)
    return [{"n_c": r.channel_fock, "m": m, "fidelity_full": r.fidelity_full}
            for r in results]


# ── Entanglement preparation ─────────────────────────────────────

@dataclass(frozen=True)
class EpTask:
    weights: Tuple[float, ...]
    m: int
    method: str = "optimized"
    omega: float = 1.0

    def __post_init__(self):
        _check_method(self.method)
        CouplingWeights(tuple(self.weights), 1.0)
        if self.m < 2:
            raise UnboundedPotentialError(self.m, "EP")

    def pulse(self) -> PulseParams:
        p = ep_pulse(self.m, self.omega)
        return p if self.method == "optimized" else rwa_comparison_pulse(p)


@dataclass
class EpResult:
    weights: Tuple[float, ...]
    m: int
    method: str
    fidelity: float
    infidelity: float
    final_negativity: float
    max_negativity: float
    times: np.ndarray
    negativity_trace: np.ndarray
    pulse: PulseParams
    dims: Tuple[int, ...]
    wall_time: float
    final_state: Optional[TruncatedState] = None

    def to_dict(self) -> Dict:
        return {
            "weights": list(self.weights), "m": self.m, "method": self.method,
            "fidelity": self.fidelity, "infidelity": self.infidelity,
            "final_negativity": self.final_negativity,
            "max_negativity": self.max_negativity, "pulse": self.pulse.to_dict(),
            "dims": list(self.dims), "wall_time": self.wall_time, "frame": "interaction",
        }


def w_target(k: Sequence[float], d: Union[int, Sequence[int]]) -> TruncatedState:
    """sum_j k_j |1_j> / |k| on the node modes (cutoff d, or one per node)."""
    n = len(k)
    dims = tuple([d] * n) if isinstance(d, int) else tuple(d)
    basis = FockBasisSpec(dims, tuple(f"a{j + 1}" for j in range(n)))
    kn = math.sqrt(sum(x * x for x in k))
    return TruncatedState.pure(basis, _single_excitation_vector([x / kn for x in k], basis, range(n)))


def run_ep(task: EpTask, n_samples: int = TRACE_SAMPLES,
           numerics: Numerics = DEFAULT_NUMERICS) -> EpResult:
    """
    Seed the channel with one excitation and spread it over the nodes.
    The negativity of (a1, a2) is sampled along the pulse.
    """
    started = time.time()
    pulse = task.pulse()
    weights = CouplingWeights.from_g_prime(pulse.g_prime, task.weights)
    cfg = SystemConfig(weights, task.omega)
    n = cfg.n_modes
    explicit = isinstance(numerics.trunc, int)
    d = int(numerics.trunc) if explicit else EP_CUTOFF
    basis = FockBasisSpec.for_modes(n, d, d_channel=d if explicit else EP_CHANNEL_CUTOFF)

    def negativity(state):
        if n < 2:
            return 0.0
        return log_negativity(partial_trace(state, ["a1", "a2"], numerics.settings))

    def simulate(b: FockBasisSpec):
        # nodes in vacuum, one excitation in the channel
        nodes_total = int(np.prod(b.dims[:-1]))
        start = TruncatedState.pure(b, np.kron(fock_vector(0, nodes_total),
                                               fock_vector(1, b.dims[-1])))
        return evolve_trace(start, cfg, pulse.tau, numerics.opts,
                            {"E_N": negativity}, n_samples, numerics.settings)

    (times, values, final), basis = grow_until_fits(simulate, basis, numerics.settings,
                                                    grow=not explicit)
    nodes = partial_trace(final, [f"a{j + 1}" for j in range(n)], numerics.settings)
    fid = fidelity(w_target(task.weights, basis.dims[:-1]), nodes)
    trace = values["E_N"]
    result = EpResult(
        weights=tuple(task.weights), m=task.m, method=task.method, fidelity=fid,
        infidelity=1.0 - fid, final_negativity=float(trace[-1]),
        max_negativity=float(np.max(trace)), times=times, negativity_trace=trace,
        pulse=pulse, dims=basis.dims, wall_time=time.time() - started, final_state=final,
    )
    logger.info(f"ep k={task.weights} m={task.m} {task.method}: "
                f"infidelity={result.infidelity:.3e} E_N={result.final_negativity:.6f}")
    return result


def min_ep_time(n_nodes: int, m: int = 2) -> PulseParams:
    """
    Fastest entangling pulse. The EP pulse does not depend on the number of
    nodes, so this is ep_pulse(2) for every N >= 2.
    """
    if n_nodes < 2:
        raise ValidationError(f"entanglement needs N >= 2 nodes, got {n_nodes}", key="N")
    return ep_pulse(m)


def run_ep_then_continue(weights: Sequence[float], m: int,
                         numerics: Numerics = DEFAULT_NUMERICS) -> Dict:
    """
    Hold the EP coupling for 2 tau with one excitation on a1 and measure the
    population reaching a2. Two EP pulses make the QST pulse with index 2m,
    so the expected population is cos^2 theta_r(2m).
    """
    if len(weights) != 2:
        raise ValidationError("the exchange check uses two nodes", key="k")
    pulse = ep_pulse(m)
    cfg = SystemConfig(CouplingWeights.from_g_prime(pulse.g_prime, weights), pulse.omega)
    d = int(numerics.trunc) if isinstance(numerics.trunc, int) else default_truncation(1)
    basis = FockBasisSpec.for_modes(2, d)
    start = TruncatedState.pure(basis, np.kron(np.kron(fock_vector(1, d), fock_vector(0, d)),
                                               fock_vector(0, d)))
    final = evolve(start, cfg, 2.0 * pulse.tau, numerics.opts, numerics.settings)
    target = TruncatedState.pure(basis, np.kron(np.kron(fock_vector(0, d), fock_vector(1, d)),
                                                fock_vector(0, d)))
    overlap = fidelity(target, final)
    expected = None
    if weights[0] == weights[1]:
        expected = math.cos(rotation_angle(qst_pulse(2 * m))) ** 2
    return {"m": m, "weights": list(weights), "duration": 2.0 * pulse.tau,
            "overlap": overlap, "expected": expected}
