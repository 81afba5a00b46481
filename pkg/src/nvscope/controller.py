"""Host-side acquisition: sweep driver, baseline adjustment and spectrum CSV I/O."""
from __future__ import annotations

import io
import math
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Protocol, TextIO, Union

import numpy as np

from . import protocol as p
from .spectrum import (
    SIMULATED_TIMESTAMP,
    InvariantViolation,
    Spectrum,
    SpectrumMeta,
    SpectrumPoint,
    SweepPlan,
    format_mhz,
)

CSV_VERSION = 1
CSV_REQUIRED_KEYS = (
    "version",
    "start_mhz",
    "stop_mhz",
    "step_mhz",
    "n_avg",
    "source",
    "baseline_applied",
    "timestamp",
)
CSV_COLUMNS = "f_mhz,signal_mv,n_avg"
DEFAULT_BAUD = 115200


class Transport(Protocol):
    def write(self, data: bytes) -> None: ...

    def read(self, timeout_s: float) -> bytes:
        """Return available bytes, or ``b""`` if none arrive within ``timeout_s``."""
        ...


# -- errors -------------------------------------------------------------------


class AcquisitionError(Exception):
    """Sweep failure carrying whatever was received before it happened."""

    def __init__(self, message: str, partial=(), stage: str = "sweep"):
        super().__init__(message)
        self.partial = list(partial)
        self.stage = stage

    @property
    def received(self) -> int:
        return len(self.partial)


class Timeout(AcquisitionError, TimeoutError):
    pass


class ProtocolError(AcquisitionError):
    pass


class DeviceError(AcquisitionError):
    def __init__(self, message: str, code: int, partial=(), stage: str = "sweep"):
        super().__init__(message, partial, stage)
        self.code = code


class SweepAborted(AcquisitionError):
    pass


class TransportError(AcquisitionError):
    pass


class AlreadyAdjusted(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


# -- transports -----------------------------------------------------------------


class SerialTransport:
    """pyserial-backed transport, 8N1."""

    def __init__(self, port: str, baud: int = DEFAULT_BAUD):
        import serial

        self.port = port
        try:
            self._serial = serial.Serial(
                port,
                baudrate=baud,
                bytesize=serial.EIGHTBITS,
                parity=serial.PARITY_NONE,
                stopbits=serial.STOPBITS_ONE,
                timeout=0,
            )
        except (serial.SerialException, OSError) as exc:
            raise TransportError(f"cannot open serial port {port}: {exc}", stage="open") from exc

    def write(self, data: bytes) -> None:
        self._serial.write(data)
        self._serial.flush()

    def read(self, timeout_s: float) -> bytes:
        self._serial.timeout = timeout_s
        first = self._serial.read(1)
        if not first:
            return b""
        waiting = self._serial.in_waiting
        return first + (self._serial.read(waiting) if waiting else b"")

    def close(self) -> None:
        self._serial.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class SweepProgress:
    """Progress shared with other threads; ``abort`` is checked between points."""

    total: int = 0
    completed: int = 0
    abort: threading.Event = field(default_factory=threading.Event)


class _Link:
    def __init__(self, transport: Transport, timeout_ms: float):
        self.transport = transport
        self.timeout_s = timeout_ms / 1000.0
        self.decoder = p.DecoderState(known_types=frozenset(p.RESPONSE_CODES))
        self.pending: list[p.Frame] = []
        self.seq = 0

    def send(self, message: p.Message) -> int:
        self.seq = (self.seq + 1) & 0xFF
        self.transport.write(p.encode_frame(message, self.seq))
        return self.seq

    def receive(self, partial, stage: str, seqs=None) -> p.Message:
        seqs = {self.seq} if seqs is None else seqs
        deadline = time.monotonic() + self.timeout_s
        while not self.pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout(
                    f"no response within {self.timeout_s * 1000:g} ms during {stage} "
                    f"({len(partial)} points received)",
                    partial,
                    stage,
                )
            chunk = self.transport.read(remaining)
            if chunk:
                frames, _ = self.decoder.feed(chunk)
                self.pending.extend(frames)
                deadline = time.monotonic() + self.timeout_s
        frame = self.pending.pop(0)
        if frame.seq not in seqs:
            raise ProtocolError(
                f"response seq {frame.seq} does not match request seq {self.seq}", partial, stage
            )
        try:
            message = p.parse_message(frame)
        except p.PayloadError as exc:
            raise ProtocolError(str(exc), partial, stage) from exc
        if isinstance(message, p.Err):
            raise DeviceError(f"device error 0x{message.code:02X} during {stage}", message.code, partial, stage)
        return message

    def expect(self, message: p.Message, kind: type, stage: str):
        self.send(message)
        reply = self.receive((), stage)
        if not isinstance(reply, kind):
            raise ProtocolError(f"expected {kind.__name__}, got {type(reply).__name__}", (), stage)
        return reply


def describe_device(info: p.Info) -> tuple[str, str]:
    """Device description and spectrum source derived from an Info reply."""
    simulated = bool(info.fw_version & p.FW_SIMULATED_FLAG)
    version = info.fw_version & ~p.FW_SIMULATED_FLAG
    text = f"fw {version >> 8}.{version & 0xFF}{' sim' if simulated else ''}, {info.adc_bits}-bit ADC, vref {info.vref_mv} mV"
    return text, "simulated" if simulated else "real"


def run_sweep(
    transport: Transport,
    plan: SweepPlan,
    timeout_ms: float = 2000,
    progress: Optional[SweepProgress] = None,
    timestamp: Optional[str] = None,
) -> Spectrum:
    """Acquire one spectrum over ``transport``.

    Simulated devices (flagged in their Info reply) get a fixed timestamp so
    repeated simulations are byte-identical; real devices get the UTC time.
    """
    link = _Link(transport, timeout_ms)
    progress = progress if progress is not None else SweepProgress()
    progress.total = plan.n_points
    progress.completed = 0

    info = link.expect(p.GetInfo(), p.Info, "info")
    device, source = describe_device(info)
    link.expect(p.SetRfEnable(1), p.Ack, "rf-enable")

    freqs = plan.frequencies_khz()
    link.send(p.SweepStart(plan.start_khz, plan.stop_khz, plan.step_khz, plan.n_avg, plan.settle_ms))
    points: list[SpectrumPoint] = []
    while True:
        if progress.abort.is_set():
            _abort(link, points)
        msg = link.receive(points, "sweep")
        if isinstance(msg, p.SweepPoint):
            i = len(points)
            if msg.index != i:
                raise ProtocolError(f"sweep index {msg.index} where {i} was expected", points)
            if i >= len(freqs) or msg.f_khz != freqs[i]:
                raise ProtocolError(f"point {i} at {msg.f_khz} kHz is off-plan", points)
            points.append(SpectrumPoint(msg.f_khz / 1000, msg.millivolts_x10 / 10, plan.n_avg))
            progress.completed = len(points)
        elif isinstance(msg, p.SweepDone):
            if msg.count != len(points) or msg.count != len(freqs):
                raise ProtocolError(
                    f"sweep finished with {msg.count} points, received {len(points)}, planned {len(freqs)}",
                    points,
                )
            break
        else:
            raise ProtocolError(f"unexpected {type(msg).__name__} during sweep", points)

    if timestamp is None:
        timestamp = (
            SIMULATED_TIMESTAMP
            if source == "simulated"
            else datetime.now(timezone.utc).isoformat(timespec="seconds")
        )
    meta = SpectrumMeta(plan=plan, source=source, timestamp=timestamp, device=device)
    return Spectrum(tuple(points), meta)


def _abort(link: _Link, points) -> None:
    sweep_seq = link.seq
    link.send(p.Abort())
    while True:
        # queued points of the aborted sweep still carry its seq
        msg = link.receive(points, "abort", seqs={sweep_seq, link.seq})
        if isinstance(msg, p.SweepDone):
            raise SweepAborted(f"sweep aborted after {len(points)} points", points, "abort")


# -- baseline -------------------------------------------------------------------


def estimate_baseline(signal_mv, margin_fraction: float = 0.2) -> float:
    """Median of the top ``margin_fraction`` of values, i.e. the off-resonance plateau."""
    if not 0 < margin_fraction <= 1:
        raise ValueError("margin_fraction must be in (0, 1]")
    values = np.sort(np.asarray(signal_mv, dtype=float))
    k = max(1, math.ceil(margin_fraction * values.size))
    return float(np.median(values[-k:]))


def baseline_adjust(spec: Spectrum, margin_fraction: float = 0.2, positive_depth: bool = False) -> Spectrum:
    """Shift a spectrum so its plateau sits at zero.

    Dips come out negative, or as positive depths with ``positive_depth``.
    """
    if spec.meta.baseline_applied:
        raise AlreadyAdjusted("spectrum is already baseline-adjusted")
    if len(spec) < 10:
        raise TooFewPoints(f"baseline adjustment needs at least 10 points, got {len(spec)}")
    signals = spec.signals
    base = estimate_baseline(signals, margin_fraction)
    adjusted = base - signals if positive_depth else signals - base
    return spec.with_signals(adjusted, baseline_applied=True)


# -- CSV ------------------------------------------------------------------------


def _format_signal(value: float) -> str:
    text = f"{value:.6g}"
    return "0" if text == "-0" else text


def dumps_spectrum(spec: Spectrum) -> str:
    plan = spec.meta.plan
    meta = spec.meta
    header = {
        "version": CSV_VERSION,
        "start_mhz": format_mhz(plan.start_khz),
        "stop_mhz": format_mhz(plan.stop_khz),
        "step_mhz": format_mhz(plan.step_khz),
        "n_avg": plan.n_avg,
        "settle_ms": plan.settle_ms,
        "source": meta.source,
        "baseline_applied": str(meta.baseline_applied).lower(),
        "timestamp": meta.timestamp,
        "device": meta.device,
    }
    lines = [f"# {k}={v}" for k, v in header.items()]
    lines.append(CSV_COLUMNS)
    for pt in spec.points:
        lines.append(f"{format_mhz(round(pt.f_mhz * 1000))},{_format_signal(pt.signal_mv)},{pt.n_avg}")
    return "\n".join(lines) + "\n"


def save_spectrum(spec: Spectrum, destination: Union[str, os.PathLike, TextIO]) -> None:
    """Write ``spec`` as CSV; signals keep 6 significant digits, frequencies are exact kHz."""
    text = dumps_spectrum(spec)
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text, encoding="utf-8", newline="\n")


def _parse_bool(value: str, lineno: int) -> bool:
    if value in ("true", "false"):
        return value == "true"
    raise ParseError(f"expected true/false, got {value!r}", lineno)


def loads_spectrum(text: str) -> Spectrum:
    meta: dict[str, tuple[str, int]] = {}
    rows = []
    header_seen = False
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            if header_seen:
                raise ParseError("comment after the column header", lineno)
            body = line[1:].strip()
            if "=" not in body:
                raise ParseError(f"malformed header line {line!r}", lineno)
            key, value = body.split("=", 1)
            meta[key.strip()] = (value.strip(), lineno)
            continue
        if not header_seen:
            if line.strip() != CSV_COLUMNS:
                raise ParseError(f"expected column header {CSV_COLUMNS!r}", lineno)
            header_seen = True
            continue
        fields_ = line.split(",")
        if len(fields_) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields_)}", lineno)
        try:
            f_mhz, signal, n_avg = float(fields_[0]), float(fields_[1]), int(fields_[2])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
        rows.append((f_mhz, signal, n_avg, lineno))

    for key in CSV_REQUIRED_KEYS:
        if key not in meta:
            raise ParseError(f"missing header key {key!r}")
    if not header_seen:
        raise ParseError(f"missing column header {CSV_COLUMNS!r}")

    def number(key, kind=float):
        value, lineno = meta[key]
        try:
            return kind(value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {value!r}", lineno) from exc

    if number("version", int) != CSV_VERSION:
        raise ParseError(f"unsupported version {meta['version'][0]}", meta["version"][1])
    try:
        plan = SweepPlan(
            start_mhz=number("start_mhz"),
            stop_mhz=number("stop_mhz"),
            step_mhz=number("step_mhz"),
            n_avg=number("n_avg", int),
            settle_ms=number("settle_ms", int) if "settle_ms" in meta else SweepPlan.settle_ms,
        )
    except InvariantViolation as exc:
        raise ParseError(f"invalid sweep header: {exc}") from exc
    spec_meta = SpectrumMeta(
        plan=plan,
        source=meta["source"][0],
        timestamp=meta["timestamp"][0],
        device=meta.get("device", ("", 0))[0],
        baseline_applied=_parse_bool(*meta["baseline_applied"]),
    )
    try:
        points = tuple(SpectrumPoint(f, s, n) for f, s, n, _ in rows)
    except InvariantViolation as exc:
        raise InvariantViolation(f"invalid point: {exc}") from exc
    spectrum = Spectrum(points, spec_meta)
    expected = plan.frequencies_khz()
    for pt, khz, (_, _, _, lineno) in zip(points, expected, rows):
        if round(pt.f_mhz * 1000) != khz:
            raise InvariantViolation(f"line {lineno}: {pt.f_mhz} MHz is off the sweep grid")
    return spectrum


def load_spectrum(source: Union[str, os.PathLike, TextIO]) -> Spectrum:
    if hasattr(source, "read"):
        return loads_spectrum(source.read())
    return loads_spectrum(Path(source).read_text(encoding="utf-8"))

