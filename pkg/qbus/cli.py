"""
Command-line front end.

    python -m qbus.cli qst input=fock:1 m=8
    python -m qbus.cli sweep-m input=fock:1 m=5..17 --workers 4
    python -m qbus.cli --config config/default_run.json --out results/

Each command writes CSV tables (header cells carry units) and JSON records
to the output directory, then the manifest. Exit codes: 0 success,
2 invalid configuration, 3 numerical failure or non-convergence, 4 I/O.
"""

import argparse
import logging
import math
import os
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from qbus import __version__
from qbus.config import (
    ALIASES, RunConfig, build_config, parse_json, parse_pairs,
)
from qbus.errors import (
    StepSizeError, TruncationError, UnreachableToleranceError, ValidationError,
)
from qbus.fockspace import WIGNER_CONVENTION, wigner, wigner_csv_rows, wigner_integral
from qbus.observability import RunLedger
from qbus.pulsedesign import rotation_angle, qst_pulse, speed_limit, tradeoff_table
from qbus.records import dict_rows, write_csv, write_json
from qbus.tasks import (
    EpTask, InputState, Numerics, QstTask, RunFailure, WTransferSpec, excitation_trace,
    fan_out, rotation_series, run_ep, run_qst, run_w_transfer, sweep_jitter, sweep_m,
    sweep_phase, sweep_temperature, transfer_receiver,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

MANIFEST_NAME = "manifest.json"

# (row key, header cell with units)
QST_DIAGNOSTICS = [("status", "status"), ("dims", "dims"), ("dt", "dt[1/omega]"),
                   ("converged", "converged")]


class Context:
    """What a command handler needs: the config, numerics and the ledger."""

    def __init__(self, cfg: RunConfig, ledger: RunLedger):
        self.cfg = cfg
        self.ledger = ledger
        self.numerics: Numerics = cfg.numerics()
        self.params = cfg.params

    def path(self, name: str) -> str:
        return os.path.join(self.cfg.output_dir, name)

    def table(self, name: str, columns: Sequence[Tuple[str, str]], rows: List[Dict]) -> str:
        path = write_csv(self.path(name), [h for _, h in columns],
                         dict_rows(rows, [k for k, _ in columns]))
        self.ledger.record_output(path)
        print(f"  wrote {path} ({len(rows)} rows)")
        return path

    def record(self, name: str, doc) -> str:
        path = write_json(self.path(name), doc)
        self.ledger.record_output(path)
        print(f"  wrote {path}")
        return path


# ── Command handlers ─────────────────────────────────────────────

def cmd_qst(ctx: Context) -> None:
    p = ctx.params
    task = QstTask(InputState.parse(p["input"]), p["m"], p["T"], p["jitter"],
                   p["apply_correction"], p["method"], ctx.cfg.omega)
    result = run_qst(task, ctx.numerics)
    ctx.ledger.record_run("qst", p, result.pulse.to_dict(), result.dims, result.dt,
                          result.converged, result.wall_time)
    doc = result.to_dict()
    doc.pop("wall_time")
    ctx.record("qst.json", doc)
    print(f"  fidelity={result.fidelity:.10f}  infidelity={result.infidelity:.4e}  "
          f"theta_r={result.theta_r:.6f}")


def _sweep_table(ctx: Context, name: str, kind: str, rows: List[Dict],
                 columns: Sequence[Tuple[str, str]]) -> None:
    ctx.ledger.record_row_runs(kind, rows)
    ctx.table(name, list(columns) + QST_DIAGNOSTICS, rows)


def cmd_sweep_m(ctx: Context) -> None:
    p = ctx.params
    rows = sweep_m(InputState.parse(p["input"]), p["m"], p["method"], p["T"],
                   ctx.numerics, keep_going=True)
    _sweep_table(ctx, "sweep_m.csv", "sweep-m", rows, [
        ("m", "m"), ("method", "method"), ("tau", "tau[1/omega]"),
        ("g_prime", "g_prime[omega]"), ("infidelity", "infidelity"),
        ("predicted", "predicted_infidelity"),
    ])


def cmd_sweep_temp(ctx: Context) -> None:
    p = ctx.params
    inp = InputState.parse(p["input"])
    rows = []
    for method in p["method"]:
        rows += sweep_temperature(inp, p["m"], p["T"], method, ctx.numerics, keep_going=True)
    _sweep_table(ctx, "sweep_temp.csv", "sweep-temp", rows, [
        ("channel_temp", "T[omega]"), ("method", "method"), ("m", "m"),
        ("tau", "tau[1/omega]"), ("infidelity", "infidelity"),
    ])


def cmd_sweep_phase(ctx: Context) -> None:
    p = ctx.params
    phases = list(np.linspace(0.0, 2.0 * math.pi, p["phases"], endpoint=False))
    rows = []
    for method in p["method"]:
        rows += sweep_phase(p["alpha"], p["m"], phases, method, ctx.numerics, keep_going=True)
    _sweep_table(ctx, "sweep_phase.csv", "sweep-phase", rows, [
        ("phi", "phi[rad]"), ("method", "method"), ("m", "m"),
        ("tau", "tau[1/omega]"), ("infidelity", "infidelity"),
    ])


def cmd_sweep_jitter(ctx: Context) -> None:
    p = ctx.params
    deltas = [f * 2.0 * math.pi for f in p["periods"]]
    rows = sweep_jitter(InputState.parse(p["input"]), p["m"], deltas, p["method"],
                        ctx.numerics, keep_going=True)
    _sweep_table(ctx, "sweep_jitter.csv", "sweep-jitter", rows, [
        ("m", "m"), ("delta_tau", "delta_tau[1/omega]"), ("tau", "tau[1/omega]"),
        ("nominal_infidelity", "nominal_infidelity"),
        ("max_infidelity", "max_infidelity"), ("increase", "increase"),
    ])


def cmd_wstate(ctx: Context) -> None:
    p = ctx.params
    spec = WTransferSpec.with_scale(p["C"], p["scale"])
    outcomes = fan_out(lambda n_c: run_w_transfer(spec, p["m"], n_c, ctx.numerics),
                       p["n_c"], ctx.numerics.workers, keep_going=True)
    rows, records = [], []
    for n_c, r in zip(p["n_c"], outcomes):
        if isinstance(r, RunFailure):
            ctx.ledger.record_run("wstate", dict(p, n_c=n_c), status=r.status, converged=False)
            rows.append({"n_c": n_c, "m": p["m"], "status": r.status})
            continue
        ctx.ledger.record_run("wstate", dict(p, n_c=n_c), r.pulse.to_dict(), r.dims,
                              ctx.numerics.dt(), True, r.wall_time)
        rows.append({
            "n_c": n_c, "m": p["m"], "tau": r.pulse.tau,
            "weights": ";".join(f"{k:.12g}" for k in r.weights),
            "fidelity_ideal_transform": r.fidelity_ideal_transform,
            "fidelity_full": r.fidelity_full, "sender_residual": r.sender_residual,
            "status": "ok",
        })
        doc = r.to_dict()
        doc.pop("wall_time")
        records.append(doc)
    ctx.table("wstate.csv", [
        ("n_c", "n_c"), ("m", "m"), ("tau", "tau[1/omega]"), ("weights", "k"),
        ("fidelity_ideal_transform", "fidelity_ideal_transform"),
        ("fidelity_full", "fidelity_full"), ("sender_residual", "sender_residual"),
        ("status", "status"),
    ], rows)
    ctx.record("wstate.json", records)


def cmd_ep(ctx: Context) -> None:
    p = ctx.params
    tasks = [EpTask(tuple(p["k"]), m, method, ctx.cfg.omega)
             for method in p["method"] for m in p["m"]]
    outcomes = fan_out(lambda t: run_ep(t, p["samples"], ctx.numerics), tasks,
                       ctx.numerics.workers, keep_going=True)
    rows, trace_rows, records = [], [], []
    for task, r in zip(tasks, outcomes):
        pulse = task.pulse()
        row = {"m": task.m, "method": task.method, "tau": pulse.tau,
               "g_prime": pulse.g_prime, "note": pulse.note}
        if isinstance(r, RunFailure):
            ctx.ledger.record_run("ep", dict(p, m=task.m, method=task.method),
                                  pulse.to_dict(), status=r.status, converged=False)
            row["status"] = r.status
            rows.append(row)
            continue
        ctx.ledger.record_run("ep", dict(p, m=task.m, method=task.method), pulse.to_dict(),
                              r.dims, ctx.numerics.dt(ctx.cfg.omega), True, r.wall_time)
        row.update(fidelity=r.fidelity, infidelity=r.infidelity,
                   final_negativity=r.final_negativity, max_negativity=r.max_negativity,
                   status="ok")
        rows.append(row)
        trace_rows += [{"method": task.method, "m": task.m, "t": t, "E_N": e}
                       for t, e in zip(r.times, r.negativity_trace)]
        doc = r.to_dict()
        doc.pop("wall_time")
        records.append(doc)
    ctx.table("ep.csv", [
        ("m", "m"), ("method", "method"), ("tau", "tau[1/omega]"),
        ("g_prime", "g_prime[omega]"), ("fidelity", "fidelity"), ("infidelity", "infidelity"),
        ("final_negativity", "E_N(tau)"), ("max_negativity", "max_E_N"),
        ("note", "note"), ("status", "status"),
    ], rows)
    ctx.table("ep_trace.csv", [("method", "method"), ("m", "m"), ("t", "t[1/omega]"),
                               ("E_N", "E_N")], trace_rows)
    ctx.record("ep.json", records)


def cmd_tradeoff(ctx: Context) -> None:
    p = ctx.params
    started = time.time()
    limits = [speed_limit(p["e_tol"], n, ctx.cfg.omega).to_dict() for n in p["mean_n"]]
    table = tradeoff_table(p["mean_n"], p["m"])
    ctx.ledger.record_run("tradeoff", p, wall_time=time.time() - started)
    ctx.table("tradeoff_limits.csv", [
        ("mean_n", "mean_n"), ("e_tol", "e_tol"), ("m_th", "m_th"), ("m_chosen", "m"),
        ("theta_th", "theta[rad]"), ("tau_th", "tau[1/omega]"),
        ("predicted_infidelity", "predicted_infidelity"),
    ], limits)
    ctx.table("tradeoff.csv", [
        ("m", "m"), ("mean_n", "mean_n"), ("tau", "tau[1/omega]"),
        ("g_prime", "g_prime[omega]"), ("G", "G"),
        ("predicted_infidelity", "predicted_infidelity"),
    ], table)


def cmd_wigner(ctx: Context) -> None:
    p = ctx.params
    started = time.time()
    task = QstTask(InputState.parse(p["input"]), p["m"],
                   apply_correction=p["apply_correction"], omega=ctx.cfg.omega)
    receiver, fid, d = transfer_receiver(task, ctx.numerics)
    grid = np.linspace(-p["extent"], p["extent"], p["points"])
    w = wigner(receiver, grid, grid)
    ctx.ledger.record_run("wigner", p, task.pulse().to_dict(), receiver.basis.dims,
                          ctx.numerics.dt(ctx.cfg.omega), True, time.time() - started)
    rows = [{"x": x, "p": q, "W": v} for x, q, v in wigner_csv_rows(w, grid, grid)]
    ctx.table("wigner.csv", [("x", "x"), ("p", "p"), ("W", "W")], rows)
    ctx.record("wigner.json", {
        "input": task.input_state.label(), "m": task.m,
        "apply_correction": task.apply_correction, "fidelity": fid,
        "theta_r": rotation_angle(qst_pulse(task.m, task.omega)), "cutoff": d,
        "convention": WIGNER_CONVENTION, "integral": wigner_integral(w, grid, grid),
        "pulse": task.pulse().to_dict(),
    })
    print(f"  receiver fidelity={fid:.6f}")


def cmd_excitations(ctx: Context) -> None:
    p = ctx.params
    traces = fan_out(lambda m: excitation_trace(m, p["method"], p["samples"],
                                                p["rwa_generator"], ctx.numerics),
                     p["m"], ctx.numerics.workers, keep_going=True)
    rows, summary = [], []
    for m, tr in zip(p["m"], traces):
        if isinstance(tr, RunFailure):
            ctx.ledger.record_run("excitations", dict(p, m=m), status=tr.status, converged=False)
            summary.append({"m": m, "status": tr.status})
            continue
        ctx.ledger.record_run("excitations", dict(p, m=m), dt=ctx.numerics.dt())
        rows += [{"m": m, "t": t, "N_tot": n} for t, n in zip(tr["times"], tr["n_tot"])]
        summary.append({"m": m, "max_deviation": tr["max_deviation"],
                        "end_deviation": tr["end_deviation"], "status": "ok"})
    ctx.table("excitations.csv", [("m", "m"), ("t", "t[1/omega]"), ("N_tot", "N_tot")], rows)
    ctx.table("excitations_summary.csv", [
        ("m", "m"), ("max_deviation", "max_deviation"), ("end_deviation", "end_deviation"),
        ("status", "status"),
    ], summary)


def cmd_rotation(ctx: Context) -> None:
    p = ctx.params
    ctx.ledger.record_run("rotation", p)
    ctx.table("rotation.csv", [
        ("m", "m"), ("tau", "tau[1/omega]"), ("theta_r", "theta_r[rad]"),
        ("abs_k11", "|K11|"), ("abs_k21", "|K21|"),
    ], rotation_series(p["m"]))


HANDLERS: Dict[str, Callable[[Context], None]] = {
    "qst": cmd_qst, "sweep-m": cmd_sweep_m, "sweep-temp": cmd_sweep_temp,
    "sweep-phase": cmd_sweep_phase, "sweep-jitter": cmd_sweep_jitter,
    "wstate": cmd_wstate, "ep": cmd_ep, "tradeoff": cmd_tradeoff,
    "wigner": cmd_wigner, "excitations": cmd_excitations, "rotation": cmd_rotation,
}

# commands whose tables are in units of omega = 1
_DIMENSIONLESS = ("sweep-m", "sweep-temp", "sweep-phase", "sweep-jitter", "wstate",
                  "excitations", "rotation")


def run(cfg: RunConfig, ledger: Optional[RunLedger] = None) -> int:
    """
    Dispatch one validated config. The manifest is written after every
    other artifact. Returns EXIT_NUMERICAL when any run failed or did not
    converge; the partial tables are kept.
    """
    ledger = ledger or RunLedger()
    if cfg.omega != 1.0 and cfg.command in _DIMENSIONLESS:
        logger.warning(f"{cfg.command} tables are in units of omega; omega={cfg.omega} ignored")
    os.makedirs(cfg.output_dir, exist_ok=True)
    logger.info(f"qbus {__version__} {cfg.command} -> {cfg.output_dir} "
                f"(config {cfg.config_hash[:12]})")
    HANDLERS[cfg.command](Context(cfg, ledger))
    ledger.write_manifest(os.path.join(cfg.output_dir, MANIFEST_NAME), __version__,
                          cfg.config_hash, cfg.command)
    if ledger.has_failures:
        summary = ledger.get_metrics_summary()
        logger.error(f"{summary['failed_runs']} failed and {summary['non_converged_runs']} "
                     f"non-converged runs")
        return EXIT_NUMERICAL
    return EXIT_OK


# ── Argument handling ────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbus",
        description="Strong-coupling bosonic bus: pulse design, transfer and "
                    "entanglement runs.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("tokens", nargs="*",
                        help="command followed by key=value parameters")
    parser.add_argument("--config", help="JSON or key=value config file")
    parser.add_argument("--out", help="output directory (default $QBUS_OUTPUT_DIR or ./results)")
    parser.add_argument("--workers", type=int, help="parallel workers for sweeps")
    parser.add_argument("--trunc", help="node Fock cutoff or 'auto'")
    parser.add_argument("--dt", type=float, help="integrator step in 1/omega")
    parser.add_argument("--integrator", choices=("rk4", "adaptive"))
    parser.add_argument("--frame", choices=("interaction", "schrodinger"))
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--version", action="version", version=f"qbus {__version__}")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """File first, then inline tokens, then flags; later sources win."""
    raw: Dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
        raw = parse_json(text) if text.strip().startswith("{") else parse_pairs(text)
    if args.tokens:
        inline = parse_pairs(" ".join(args.tokens))
        if "command" in inline and "command" in raw and inline["command"] != raw["command"]:
            raise ValidationError(f"command {inline['command']!r} conflicts with config file "
                                  f"command {raw['command']!r}", key="command")
        raw.update(inline)
    flags = {"output_dir": args.out, "workers": args.workers, "trunc": args.trunc,
             "dt": args.dt, "integrator": args.integrator, "frame": args.frame}
    raw.update({ALIASES.get(k, k): v for k, v in flags.items() if v is not None})
    return build_config(raw)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except (ValidationError, UnreachableToleranceError) as e:
        key = getattr(e, "key", None)
        logger.error(f"invalid configuration{f' ({key})' if key else ''}: {e}")
        return EXIT_VALIDATION
    except (TruncationError, StepSizeError) as e:
        logger.error(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
