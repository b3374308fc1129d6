"""
Run configuration: parse a JSON document or key=value text into a validated
RunConfig with every default filled in.

    qst input=fock:1 m=8
    {"command": "sweep-m", "params": {"input": "fock:1", "m": "5..17"}}

Lists are comma separated ("1,1"); integer ranges use "a..b" (inclusive).
"""

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from qbus.errors import ConfigParseError, UnboundedPotentialError, ValidationError
from qbus.fockspace import EvolveOptions
from qbus.tasks import METHODS, InputState, Numerics

logger = logging.getLogger(__name__)

OUTPUT_ENV = "QBUS_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "results"

COMMANDS = ("qst", "sweep-m", "sweep-temp", "sweep-phase", "sweep-jitter", "wstate",
            "ep", "tradeoff", "wigner", "excitations", "rotation")
GLOBAL_KEYS = ("command", "output_dir", "trunc", "dt", "integrator", "frame",
               "workers", "omega")
ALIASES = {"correction": "apply_correction", "out": "output_dir", "temp": "T",
           "delta_tau": "jitter"}


# ── Value coercion ───────────────────────────────────────────────

def _fail(key: str, value: Any, what: str) -> ValidationError:
    return ValidationError(f"{key}={value!r}: expected {what}", key=key)


def as_int(key: str, value: Any) -> int:
    if isinstance(value, bool):
        raise _fail(key, value, "an integer")
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise _fail(key, value, "an integer")
    if not f.is_integer():
        raise _fail(key, value, "an integer")
    return int(f)


def as_float(key: str, value: Any) -> float:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise _fail(key, value, "a number")
    if not math.isfinite(f):
        raise _fail(key, value, "a finite number")
    return f


def as_bool(key: str, value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "yes", "1", "on"):
        return True
    if text in ("false", "no", "0", "off"):
        return False
    raise _fail(key, value, "true or false")


def _items(value: Any) -> List:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v for v in str(value).split(",") if v.strip()]


def as_int_list(key: str, value: Any) -> List[int]:
    """Comma list or inclusive range "a..b"."""
    if isinstance(value, str) and ".." in value:
        lo, _, hi = value.partition("..")
        lo, hi = as_int(key, lo), as_int(key, hi)
        if hi < lo:
            raise _fail(key, value, "an increasing range")
        return list(range(lo, hi + 1))
    out = [as_int(key, v) for v in _items(value)]
    if not out:
        raise _fail(key, value, "at least one integer")
    return out


def as_float_list(key: str, value: Any) -> List[float]:
    out = [as_float(key, v) for v in _items(value)]
    if not out:
        raise _fail(key, value, "at least one number")
    return out


def as_str_list(key: str, value: Any) -> List[str]:
    return [str(v).strip() for v in _items(value)]


def as_input(key: str, value: Any) -> str:
    text = str(value).strip()
    InputState.parse(text)
    return text


def as_method(key: str, value: Any) -> str:
    if value not in METHODS:
        raise _fail(key, value, f"one of {METHODS}")
    return value


def as_methods(key: str, value: Any) -> List[str]:
    return [as_method(key, v) for v in as_str_list(key, value)]


# ── Schemas ──────────────────────────────────────────────────────

Field = Tuple[Callable[[str, Any], Any], Any]

SCHEMAS: Dict[str, Dict[str, Field]] = {
    "qst": {
        "input": (as_input, "fock:1"), "m": (as_int, 8), "T": (as_float, 0.0),
        "jitter": (as_float, 0.0), "method": (as_method, "optimized"),
        "apply_correction": (as_bool, False),
    },
    "sweep-m": {
        "input": (as_input, "fock:1"), "m": (as_int_list, "5..17"),
        "method": (as_methods, "optimized,rwa"), "T": (as_float, 0.0),
    },
    "sweep-temp": {
        "input": (as_input, "fock:1"), "m": (as_int, 6), "T": (as_float_list, "0,1,2,3"),
        "method": (as_methods, "optimized,rwa"),
    },
    "sweep-phase": {
        "alpha": (as_float, 1.0), "m": (as_int, 5), "phases": (as_int, 16),
        "method": (as_methods, "optimized,rwa"),
    },
    "sweep-jitter": {
        "input": (as_input, "fock:1"), "m": (as_int_list, "5..11"),
        "periods": (as_float_list, "0.05"), "method": (as_method, "optimized"),
    },
    "wstate": {
        "C": (as_float_list, "0.6,0.8"), "m": (as_int, 8), "scale": (as_float, 1.0),
        "n_c": (as_int_list, "0"),
    },
    "ep": {
        "k": (as_float_list, "1,1"), "m": (as_int_list, "2..7"),
        "method": (as_methods, "optimized,rwa"), "samples": (as_int, 200),
    },
    "tradeoff": {
        "e_tol": (as_float, 1e-3), "mean_n": (as_float_list, "1,2,3"),
        "m": (as_int_list, "5..17"),
    },
    "wigner": {
        "input": (as_input, "cat:1.2"), "m": (as_int, 11),
        "apply_correction": (as_bool, False), "extent": (as_float, 4.0),
        "points": (as_int, 81),
    },
    "excitations": {
        "m": (as_int_list, "5,8,16"), "method": (as_method, "optimized"),
        "samples": (as_int, 200), "rwa_generator": (as_bool, False),
    },
    "rotation": {"m": (as_int_list, "2..20")},
}

# commands whose pulse index must give a bounded potential
_PULSE_KIND = {"qst": "QST", "sweep-m": "QST", "sweep-temp": "QST", "sweep-phase": "QST",
               "sweep-jitter": "QST", "wstate": "QST", "wigner": "QST",
               "excitations": "QST", "rotation": "QST", "ep": "EP", "tradeoff": "QST"}


@dataclass(frozen=True)
class RunConfig:
    """
    A validated experiment configuration.

    Attributes:
        command:    One of COMMANDS.
        params:     Command parameters with defaults filled and values coerced.
        output_dir: Directory for CSV/JSON artifacts and the manifest.
        trunc:      Node Fock cutoff, "auto", or None for the default rule.
        dt:         Integrator step in 1/omega (None: 2 pi / 200).
        integrator: "rk4" or "adaptive".
        frame:      "interaction" or "schrodinger".
        workers:    Thread pool size for sweeps.
        omega:      Mode frequency.
    """
    command: str
    params: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = DEFAULT_OUTPUT_DIR
    trunc: Union[int, str, None] = None
    dt: Optional[float] = None
    integrator: str = "rk4"
    frame: str = "interaction"
    workers: int = 1
    omega: float = 1.0

    def to_dict(self) -> Dict:
        return {
            "command": self.command, "params": dict(self.params),
            "output_dir": self.output_dir, "trunc": self.trunc, "dt": self.dt,
            "integrator": self.integrator, "frame": self.frame,
            "workers": self.workers, "omega": self.omega,
        }

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; output_dir and workers do not enter."""
        doc = self.to_dict()
        doc.pop("output_dir")
        doc.pop("workers")
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def numerics(self) -> Numerics:
        return Numerics(opts=EvolveOptions(self.integrator, self.dt, self.frame),
                        trunc=self.trunc, workers=self.workers)

    def with_overrides(self, **changes) -> "RunConfig":
        """Re-validate with some top-level fields replaced (CLI flags win over the file)."""
        raw = self.to_dict()
        raw.update({k: v for k, v in changes.items() if v is not None})
        return build_config(raw)


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV) or os.path.join(".", DEFAULT_OUTPUT_DIR)


# ── Parsing ──────────────────────────────────────────────────────

_TOKEN = re.compile(r"\S+")


def parse_pairs(text: str) -> Dict[str, Any]:
    """
    key=value tokens separated by whitespace or newlines; '#' starts a
    comment. A bare first token names the command.
    """
    raw: Dict[str, Any] = {}
    first = True
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        for match in _TOKEN.finditer(line):
            token = match.group(0)
            column = match.start() + 1
            key, sep, value = token.partition("=")
            if not sep:
                if first and "command" not in raw:
                    raw["command"] = token
                    first = False
                    continue
                raise ConfigParseError(f"expected key=value, got {token!r}", lineno, column)
            if not key or not value:
                raise ConfigParseError(f"empty key or value in {token!r}", lineno, column)
            key = ALIASES.get(key, key)
            if key in raw:
                raise ConfigParseError(f"duplicate key {key!r}", lineno, column)
            raw[key] = value
            first = False
    return raw


def parse_json(text: str) -> Dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(e.msg, e.lineno, e.colno)
    if not isinstance(doc, dict):
        raise ConfigParseError("top level must be an object", 1, 1)
    raw = {ALIASES.get(k, k): v for k, v in doc.items() if k != "params"}
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ValidationError("params must be an object", key="params")
    for k, v in params.items():
        key = ALIASES.get(k, k)
        if key in raw:
            raise ValidationError(f"key {key!r} given twice", key=key)
        raw[key] = v
    return raw


def parse_config(source: str) -> RunConfig:
    """
    Parse JSON or key=value config text into a validated RunConfig.

    Raises:
        ConfigParseError: malformed text, with line and column.
        ValidationError: unknown key or a value outside its domain.
    """
    text = source.strip()
    raw = parse_json(text) if text.startswith("{") else parse_pairs(source)
    return build_config(raw)


def _check_trunc(value: Any) -> Union[int, str, None]:
    if value is None or value == "":
        return None
    if str(value).lower() == "auto":
        return "auto"
    d = as_int("trunc", value)
    if d < 2:
        raise ValidationError(f"trunc={d} must be at least 2", key="trunc")
    return d


def build_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a flat key/value mapping (globals and command parameters)."""
    command = raw.get("command")
    if command not in COMMANDS:
        raise ValidationError(f"command must be one of {COMMANDS}, got {command!r}",
                              key="command")
    schema = SCHEMAS[command]
    incoming = dict(raw.get("params") or {})
    incoming.update({k: v for k, v in raw.items() if k not in GLOBAL_KEYS and k != "params"})

    unknown = sorted(set(incoming) - set(schema))
    if unknown:
        raise ValidationError(f"unknown key(s) for {command}: {', '.join(unknown)}",
                              key=unknown[0])

    params = {}
    for key, (coerce, default) in schema.items():
        value = incoming.get(key, default)
        params[key] = coerce(key, value)

    workers = as_int("workers", raw.get("workers", 1))
    if workers < 1:
        raise ValidationError(f"workers={workers} must be >= 1", key="workers")
    omega = as_float("omega", raw.get("omega", 1.0))
    if omega <= 0.0:
        raise ValidationError(f"omega={omega} must be positive", key="omega")
    dt = raw.get("dt")
    dt = None if dt in (None, "") else as_float("dt", dt)
    integrator = str(raw.get("integrator", "rk4"))
    frame = str(raw.get("frame", "interaction"))
    EvolveOptions(integrator, dt, frame)

    cfg = RunConfig(
        command=command, params=params,
        output_dir=str(raw.get("output_dir") or default_output_dir()),
        trunc=_check_trunc(raw.get("trunc")), dt=dt, integrator=integrator,
        frame=frame, workers=workers, omega=omega,
    )
    validate_params(cfg)
    logger.debug(f"config {command} {params} hash={cfg.config_hash[:12]}")
    return cfg


def validate_params(cfg: RunConfig) -> None:
    """Physical checks that need more than one key."""
    p = cfg.params
    if "m" in p:
        ms = p["m"] if isinstance(p["m"], list) else [p["m"]]
        for m in ms:
            if m < 2:
                raise UnboundedPotentialError(m, _PULSE_KIND[cfg.command])
    if p.get("apply_correction") and p.get("method", "optimized") == "rwa":
        raise ValidationError("phase correction is defined for optimized pulses only",
                              key="apply_correction")
    for key in ("T", "jitter", "periods", "scale", "extent"):
        values = p.get(key)
        if values is None:
            continue
        for v in values if isinstance(values, list) else [values]:
            if v < 0.0:
                raise ValidationError(f"{key}={v} must be non-negative", key=key)
    for key in ("phases", "points", "samples"):
        if key in p and p[key] < 2:
            raise ValidationError(f"{key}={p[key]} must be at least 2", key=key)
    if cfg.command == "tradeoff":
        if not 0.0 < p["e_tol"] < 1.0:
            raise ValidationError(f"e_tol={p['e_tol']} must lie in (0, 1)", key="e_tol")
        if any(n <= 0.0 for n in p["mean_n"]):
            raise ValidationError("mean_n values must be positive", key="mean_n")
    if cfg.command == "wstate":
        if len(p["C"]) < 2:
            raise ValidationError("a W-type state needs at least two amplitudes", key="C")
        if abs(sum(c * c for c in p["C"]) - 1.0) > 1e-10:
            raise ValidationError("amplitudes C must be normalised", key="C")
        if p["scale"] == 0.0:
            raise ValidationError("scale must be non-zero", key="scale")
    if cfg.command == "ep" and (not p["k"] or all(k == 0.0 for k in p["k"])):
        raise ValidationError("coupling weights k are all zero", key="k")


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
