"""Virtual ODMR instrument speaking the binary protocol.

The device side is a synchronous state machine: frames in, frames out. A
:class:`SimulatedDevice` adds the byte-level decoder and an outbound queue,
and :class:`LoopbackTransport` exposes it with the same ``write``/``read``
interface the controller uses for a serial port.
"""
from __future__ import annotations

import collections
import os
import select
import time
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import protocol as p
from .physics import MagneticField, NvParameters, hamiltonian_resonances, lorentzian

FW_VERSION = 0x0100
MIN_KHZ, MAX_KHZ = 35_000, 4_400_000


@dataclass
class SimDeviceState:
    params: NvParameters = dataclasses.field(default_factory=NvParameters)
    field: MagneticField = dataclasses.field(default_factory=MagneticField)
    noise_sigma_mv: float = 0.0
    seed: int = 0
    current_f_khz: int = 0
    rf_on: bool = False
    vref_mv: int = 3000
    adc_bits: int = 12
    rng: np.random.Generator = dataclasses.field(init=False, repr=False)

    def __post_init__(self):
        if self.noise_sigma_mv < 0:
            raise ValueError("noise_sigma_mv must be non-negative")
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self._resonances = hamiltonian_resonances(self.params, self.field)

    @property
    def full_scale(self) -> int:
        return (1 << self.adc_bits) - 1

    def true_signal_mv(self, f_khz) -> np.ndarray:
        """Noise-free detector level at ``f_khz``; flat baseline with RF off."""
        f_mhz = np.asarray(f_khz, dtype=float) / 1000.0
        base = self.params.baseline_mv
        if not self.rf_on:
            return np.full(f_mhz.shape, base)
        nu_minus, nu_plus = self._resonances
        w = self.params.linewidth_mhz
        dips = lorentzian(f_mhz, nu_minus, w) + lorentzian(f_mhz, nu_plus, w)
        return base * (1.0 - self.params.contrast * dips)

    def sample_mv(self, f_khz, n_avg: int) -> np.ndarray:
        """Mean of ``n_avg`` noisy samples per frequency."""
        f = np.atleast_1d(np.asarray(f_khz))
        signal = self.true_signal_mv(f)
        if self.noise_sigma_mv > 0:
            noise = self.rng.normal(0.0, self.noise_sigma_mv, size=(f.size, n_avg))
            signal = signal + noise.mean(axis=1)
        return signal


def adc_quantize(state: SimDeviceState, signal_mv: float) -> tuple[int, int]:
    clipped = min(max(float(signal_mv), 0.0), float(state.vref_mv))
    counts = int(round(clipped / state.vref_mv * state.full_scale))
    return counts, counts_to_mv_x10(state, counts)


def counts_to_mv_x10(state: SimDeviceState, counts: int) -> int:
    return int(round(counts * state.vref_mv * 10 / state.full_scale))


def _sweep_frequencies(cmd: p.SweepStart) -> list[int] | None:
    if cmd.step_khz == 0 or cmd.start_khz > cmd.stop_khz or cmd.n_avg == 0:
        return None
    if cmd.start_khz < MIN_KHZ or cmd.stop_khz > MAX_KHZ:
        return None
    count = (cmd.stop_khz - cmd.start_khz) // cmd.step_khz + 1
    if count > 0xFFFF:
        return None
    return [cmd.start_khz + i * cmd.step_khz for i in range(count)]


def handle_frame(state: SimDeviceState, frame: p.Frame) -> tuple[SimDeviceState, list[p.Frame]]:
    """Process one request; faults come back as ``Err`` frames, never exceptions."""
    seq = frame.seq

    def reply(*messages):
        return state, [p.to_frame(m, seq) for m in messages]

    if frame.ftype not in p.COMMAND_CODES:
        return reply(p.Err(p.ErrorCode.UNKNOWN_TYPE))
    try:
        cmd = p.parse_message(frame)
    except p.PayloadError:
        return reply(p.Err(p.ErrorCode.BAD_PAYLOAD))

    if isinstance(cmd, p.Ping):
        return reply(p.Pong())
    if isinstance(cmd, p.GetInfo):
        return reply(p.Info(FW_VERSION | p.FW_SIMULATED_FLAG, state.adc_bits, state.vref_mv))
    if isinstance(cmd, p.SetFrequency):
        if not MIN_KHZ <= cmd.f_khz <= MAX_KHZ:
            return reply(p.Err(p.ErrorCode.OUT_OF_RANGE))
        state.current_f_khz = cmd.f_khz
        return reply(p.Ack(cmd.CODE))
    if isinstance(cmd, p.SetRfEnable):
        state.rf_on = bool(cmd.on)
        return reply(p.Ack(cmd.CODE))
    if isinstance(cmd, p.ReadAdc):
        if cmd.n_avg == 0:
            return reply(p.Err(p.ErrorCode.BAD_PAYLOAD))
        (mv,) = state.sample_mv(state.current_f_khz, cmd.n_avg)
        return reply(p.AdcValue(*adc_quantize(state, mv)))
    if isinstance(cmd, p.SweepStart):
        freqs = _sweep_frequencies(cmd)
        if freqs is None:
            return reply(p.Err(p.ErrorCode.OUT_OF_RANGE))
        values = state.sample_mv(freqs, cmd.n_avg)
        points = [
            p.SweepPoint(i, f, adc_quantize(state, mv)[1]) for i, (f, mv) in enumerate(zip(freqs, values))
        ]
        state.current_f_khz = freqs[-1]
        return reply(*points, p.SweepDone(len(points)))
    if isinstance(cmd, p.Abort):
        return reply(p.Ack(cmd.CODE))
    return reply(p.Err(p.ErrorCode.UNKNOWN_TYPE))


class SimulatedDevice:
    """Byte-level device: decodes requests and queues response frames.

    Responses leave one frame at a time through :meth:`pop_output`, so an
    ``Abort`` arriving mid-sweep drops the sweep points still queued and
    reports how many were actually sent.
    """

    def __init__(self, state: SimDeviceState | None = None):
        self.state = state if state is not None else SimDeviceState()
        self.decoder = p.DecoderState(known_types=frozenset(p.COMMAND_CODES))
        self.outbox: collections.deque[p.Frame] = collections.deque()
        self._sweep_sent = 0

    def receive(self, data: bytes) -> None:
        frames, errors = self.decoder.feed(data)
        for err in errors:
            if err.frame is not None:
                self._handle(err.frame)
        for frame in frames:
            self._handle(frame)

    def _handle(self, frame: p.Frame) -> None:
        if frame.ftype == p.Abort.CODE:
            dropped = [f for f in self.outbox if f.ftype in (p.SweepPoint.CODE, p.SweepDone.CODE)]
            if dropped:
                self.outbox = collections.deque(
                    f for f in self.outbox if f.ftype not in (p.SweepPoint.CODE, p.SweepDone.CODE)
                )
                self.outbox.append(p.to_frame(p.Ack(p.Abort.CODE), frame.seq))
                self.outbox.append(p.to_frame(p.SweepDone(self._sweep_sent), frame.seq))
                return
        if frame.ftype == p.SweepStart.CODE:
            self._sweep_sent = 0
        _, responses = handle_frame(self.state, frame)
        self.outbox.extend(responses)

    def pop_output(self) -> bytes:
        if not self.outbox:
            return b""
        frame = self.outbox.popleft()
        if frame.ftype == p.SweepPoint.CODE:
            self._sweep_sent += 1
        return frame.to_bytes()

    def respond_all(self, data: bytes) -> bytes:
        self.receive(data)
        out = []
        while self.outbox:
            out.append(self.pop_output())
        return b"".join(out)


class LoopbackTransport:
    """In-memory duplex channel to a :class:`SimulatedDevice`."""

    def __init__(self, device: SimulatedDevice):
        self.device = device

    def write(self, data: bytes) -> None:
        self.device.receive(bytes(data))

    def read(self, timeout_s: float) -> bytes:
        out = self.device.pop_output()
        if not out:
            # nothing can arrive until the host writes again
            time.sleep(timeout_s)
        return out

    def close(self) -> None:
        pass


def serve_fd(device: SimulatedDevice, fd: int, stop=None, poll_s: float = 0.05) -> None:
    """Run ``device`` over a file descriptor (pty master or pipe) until ``stop`` is set.

    Queued output is flushed in full between reads; the host sees the same
    byte stream as over :class:`LoopbackTransport`.
    """
    while stop is None or not stop.is_set():
        readable, _, _ = select.select([fd], [], [], poll_s)
        if not readable:
            continue
        try:
            data = os.read(fd, 4096)
        except OSError:
            return
        if not data:
            return
        device.receive(data)
        while device.outbox:
            out = device.pop_output()
            view = memoryview(out)
            while view:
                n = os.write(fd, view)
                view = view[n:]


def default_state(params: NvParameters, b_mt: float, noise_mv: float, seed: int) -> SimDeviceState:
    return SimDeviceState(
        params=params,
        field=MagneticField.axial(b_mt),
        noise_sigma_mv=noise_mv,
        seed=seed,
    )


def quantization_bound_mv(state: SimDeviceState) -> float:
    return state.vref_mv / 2**state.adc_bits / 2 + 0.05

