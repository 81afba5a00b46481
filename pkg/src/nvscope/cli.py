"""``nvscope`` command-line entry point.

Exit codes: 0 success, 2 usage/configuration or out-of-range input,
3 file I/O or parse failure, 4 acquisition failure, 5 analysis failure.
"""
from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from . import pll
from .analysis import AnalysisError, analyze, detect_dips
from .config import CliConfig, ConfigError, load_config
from .controller import AcquisitionError, ParseError, SerialTransport, load_spectrum, run_sweep, save_spectrum
from .plot import render_svg
from .simulator import LoopbackTransport, SimulatedDevice, default_state, serve_fd
from .spectrum import InvariantViolation

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_ACQUIRE = 4
EXIT_ANALYSIS = 5


def _err(message: str) -> None:
    print(f"nvscope: error: {message}", file=sys.stderr)


# -- argument groups ----------------------------------------------------------


def _pll_flags() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(add_help=False)
    g = ap.add_argument_group("PLL")
    g.add_argument("--ref-mhz", dest="ref_mhz", type=float, help="reference oscillator (default 25)")
    g.add_argument("--r-counter", dest="r_counter", type=int, help="reference divider R (default 1)")
    g.add_argument("--doubler", action="store_true", default=None, help="enable reference doubler")
    g.add_argument("--rdiv2", action="store_true", default=None, help="enable reference divide-by-2")
    return ap


def _nv_flags() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(add_help=False)
    g = ap.add_argument_group("NV model")
    g.add_argument("--d-mhz", dest="d_mhz", type=float, help="zero-field splitting (default 2870)")
    g.add_argument("--e-mhz", dest="e_mhz", type=float, help="strain splitting E (default 0)")
    g.add_argument("--gamma", dest="gamma_mhz_per_mt", type=float, help="MHz per mT (default 28)")
    return ap


def _sim_flags() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(add_help=False)
    g = ap.add_argument_group("simulated device")
    g.add_argument("--b-mt", dest="b_mt", type=float, default=0.0, help="axial field in mT")
    g.add_argument("--noise-mv", dest="noise_mv", type=float, default=1.0, help="per-sample noise sigma")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--linewidth-mhz", dest="linewidth_mhz", type=float)
    g.add_argument("--contrast", type=float)
    g.add_argument("--baseline-mv", dest="baseline_mv", type=float)
    return ap


def _sweep_flags() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(add_help=False)
    g = ap.add_argument_group("sweep")
    g.add_argument("--start-mhz", dest="start_mhz", type=float, help="default 2614")
    g.add_argument("--stop-mhz", dest="stop_mhz", type=float, help="default 3126")
    g.add_argument("--step-mhz", dest="step_mhz", type=float, help="default 4")
    g.add_argument("--avg", dest="n_avg", type=int, help="samples averaged per point (default 6)")
    g.add_argument("--settle-ms", dest="settle_ms", type=int, help="default 2")
    return ap


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvscope", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML config file (or NVSCOPE_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("registers", parents=[_pll_flags()], help="ADF4351 registers for one frequency")
    p.add_argument("--freq-mhz", dest="freq_mhz", required=True)

    p = sub.add_parser("sweep-table", parents=[_pll_flags(), _sweep_flags()], help="precomputed firmware sweep table")
    p.add_argument("--out", help="write the binary table here instead of printing hex")

    p = sub.add_parser(
        "simulate", parents=[_nv_flags(), _sim_flags(), _sweep_flags()], help="acquire from an in-process simulator"
    )
    p.add_argument("--out", required=True, help="spectrum CSV path")

    p = sub.add_parser("acquire", parents=[_sweep_flags()], help="acquire over a serial port")
    p.add_argument("--port", help="serial device (or NVSCOPE_PORT)")
    p.add_argument("--baud", type=int)
    p.add_argument("--timeout-ms", dest="timeout_ms", type=int)
    p.add_argument("--out", required=True, help="spectrum CSV path")

    p = sub.add_parser("analyze", parents=[_nv_flags()], help="fit a spectrum and estimate the field")
    p.add_argument("input", help="spectrum CSV")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("plot", help="SVG plot of one or two spectra")
    p.add_argument("inputs", nargs="+", help="one or two spectrum CSVs")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--report", help="analysis report whose fitted centres are marked")
    p.add_argument("--labels", help="comma-separated legend labels")
    p.add_argument("--title", default="ODMR spectrum")

    p = sub.add_parser(
        "sim-serve", parents=[_nv_flags(), _sim_flags()], help="serve the simulator on a pseudo-terminal"
    )
    p.add_argument("--ready-file", help="write the pty path here once serving")
    return parser


# -- commands -----------------------------------------------------------------


def _target_khz(freq_mhz: str):
    try:
        khz = Fraction(freq_mhz) * 1000
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid frequency {freq_mhz!r}") from exc
    return int(khz) if khz.denominator == 1 else khz


def cmd_registers(args, cfg: CliConfig) -> int:
    target = _target_khz(args.freq_mhz)
    try:
        plan = pll.plan_frequency(cfg.pll, target)
    except pll.PllError as exc:
        _err(str(exc))
        return EXIT_USAGE
    regs = pll.encode_registers(plan, cfg.pll)
    print(f"f_target_khz={float(target):.3f}")
    print(f"f_actual_khz={plan.f_actual_khz:.3f}")
    print(f"f_pfd_khz={plan.f_pfd_khz:.3f}")
    print(f"f_vco_khz={plan.f_vco_khz:.3f}")
    print(f"INT={plan.int_n} FRAC={plan.frac} MOD={plan.mod} RF_DIV_EXP={plan.rf_div_exp}")
    for i, word in enumerate(regs.hex_words()):
        print(f"R{i}={word}")
    return EXIT_OK


def cmd_sweep_table(args, cfg: CliConfig) -> int:
    try:
        table = pll.build_sweep_table(cfg.pll, cfg.sweep)
    except pll.PllError as exc:
        _err(str(exc))
        return EXIT_USAGE
    if args.out:
        data = table.to_bytes()
        try:
            Path(args.out).write_bytes(data)
        except OSError as exc:
            _err(f"cannot write {args.out}: {exc}")
            return EXIT_IO
        print(f"{len(table)} entries, {table.ENTRY_SIZE} bytes each, {len(data)} bytes total -> {args.out}")
    else:
        for entry in table:
            print(f"{entry.f_khz} " + " ".join(entry.registers.hex_words()))
    return EXIT_OK


def _sim_device(args, cfg: CliConfig) -> SimulatedDevice:
    return SimulatedDevice(default_state(cfg.nv, args.b_mt, args.noise_mv, args.seed))


def _dip_hint(spec) -> str:
    try:
        dips = detect_dips(spec)
    except ValueError:
        return "no dips detected"
    return "dips near " + ", ".join(f"{d:g}" for d in dips) + " MHz"


def cmd_simulate(args, cfg: CliConfig) -> int:
    device = _sim_device(args, cfg)
    spec = run_sweep(LoopbackTransport(device), cfg.sweep, timeout_ms=cfg.serial.timeout_ms)
    try:
        save_spectrum(spec, args.out)
    except OSError as exc:
        _err(f"cannot write {args.out}: {exc}")
        return EXIT_IO
    print(f"{len(spec)} points -> {args.out}; {_dip_hint(spec)}")
    return EXIT_OK


def cmd_acquire(args, cfg: CliConfig) -> int:
    port = cfg.serial.port
    if not port:
        _err("no serial port given (use --port or NVSCOPE_PORT)")
        return EXIT_ACQUIRE
    try:
        with SerialTransport(port, cfg.serial.baud) as transport:
            spec = run_sweep(transport, cfg.sweep, timeout_ms=cfg.serial.timeout_ms)
    except AcquisitionError as exc:
        _err(f"acquisition failed on {port} at stage {exc.stage} after {exc.received} points: {exc}")
        return EXIT_ACQUIRE
    try:
        save_spectrum(spec, args.out)
    except OSError as exc:
        _err(f"cannot write {args.out}: {exc}")
        return EXIT_IO
    print(f"{len(spec)} points from {port} -> {args.out}; {_dip_hint(spec)}")
    return EXIT_OK


def _load(path: str):
    try:
        return load_spectrum(path)
    except OSError as exc:
        raise _IoFailure(f"cannot read {path}: {exc}") from exc
    except (ParseError, InvariantViolation) as exc:
        raise _IoFailure(f"{path}: {exc}") from exc


class _IoFailure(Exception):
    pass


def _write_report(path: Optional[str], report) -> None:
    if path:
        try:
            Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
        except OSError as exc:
            raise _IoFailure(f"cannot write {path}: {exc}") from exc


def cmd_analyze(args, cfg: CliConfig) -> int:
    spec = _load(args.input)
    try:
        report = analyze(spec, cfg.nv)
    except AnalysisError as exc:
        if exc.report is not None:
            _write_report(args.report, exc.report)
        _err(f"analysis failed at stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}")
        return EXIT_ANALYSIS
    _write_report(args.report, report)
    print(report.summary())
    return EXIT_OK


def cmd_plot(args, cfg: CliConfig) -> int:
    if len(args.inputs) > 2:
        _err("plot takes one or two spectra")
        return EXIT_USAGE
    spectra = [_load(path) for path in args.inputs]
    centers = []
    if args.report:
        try:
            data = json.loads(Path(args.report).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise _IoFailure(f"cannot read report {args.report}: {exc}") from exc
        params = (data.get("fit") or {}).get("params") or {}
        centers = sorted({params[k] for k in ("c1", "c2") if k in params})
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.inputs]
    svg = render_svg(spectra, labels, centers, title=args.title)
    try:
        Path(args.out).write_text(svg, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise _IoFailure(f"cannot write {args.out}: {exc}") from exc
    print(f"{len(spectra)} trace(s) -> {args.out}")
    return EXIT_OK


def cmd_sim_serve(args, cfg: CliConfig) -> int:
    device = _sim_device(args, cfg)
    master, slave = os.openpty()
    import tty

    tty.setraw(slave)
    path = os.ttyname(slave)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    print(path, flush=True)
    if args.ready_file:
        Path(args.ready_file).write_text(path + "\n", encoding="utf-8")
    try:
        serve_fd(device, master, stop)
    except KeyboardInterrupt:
        pass
    finally:
        os.close(master)
        os.close(slave)
    return EXIT_OK


COMMANDS = {
    "registers": cmd_registers,
    "sweep-table": cmd_sweep_table,
    "simulate": cmd_simulate,
    "acquire": cmd_acquire,
    "analyze": cmd_analyze,
    "plot": cmd_plot,
    "sim-serve": cmd_sim_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(vars(args), config_path=args.config)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except _IoFailure as exc:
        _err(str(exc))
        return EXIT_IO
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
