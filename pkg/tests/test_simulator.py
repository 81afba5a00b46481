import numpy as np
import pytest

from nvscope import protocol as p
from nvscope.physics import MagneticField, NvParameters, lorentzian
from nvscope.simulator import (
    SimDeviceState,
    SimulatedDevice,
    adc_quantize,
    handle_frame,
    quantization_bound_mv,
)


def exchange(device, *messages, seq=1):
    raw = b"".join(p.encode_frame(m, seq) for m in messages)
    return [p.parse_message(f) for f in p.decode_all(device.respond_all(raw))]


@pytest.mark.parametrize("mv, counts", [(0.0, 0), (3000.0, 4095), (1500.0, 2048), (-5.0, 0), (4000.0, 4095)])
def test_adc_quantize(mv, counts):
    got, mv_x10 = adc_quantize(SimDeviceState(), mv)
    assert got == counts
    assert mv_x10 == round(counts * 30000 / 4095)


def test_quantization_error_bounded():
    state = SimDeviceState()
    bound = quantization_bound_mv(state)
    for mv in np.linspace(0, 3000, 20001):
        _, x10 = adc_quantize(state, mv)
        assert abs(x10 / 10 - mv) <= bound


def test_ping_and_info():
    dev = SimulatedDevice()
    assert exchange(dev, p.Ping()) == [p.Pong()]
    (info,) = exchange(dev, p.GetInfo())
    assert info.fw_version & p.FW_SIMULATED_FLAG
    assert (info.adc_bits, info.vref_mv) == (12, 3000)


def test_rf_off_is_flat():
    dev = SimulatedDevice(SimDeviceState(field=MagneticField.axial(0.0)))
    exchange(dev, p.SetFrequency(2_870_000))
    (adc,) = exchange(dev, p.ReadAdc(6))
    _, expect = adc_quantize(dev.state, 200.0)
    assert adc.millivolts_x10 == expect


def test_dip_floor_at_zero_field():
    params = NvParameters()
    dev = SimulatedDevice(SimDeviceState(params=params))
    assert exchange(dev, p.SetRfEnable(1), p.SetFrequency(2_870_000)) == [p.Ack(0x04), p.Ack(0x03)]
    (adc,) = exchange(dev, p.ReadAdc(6))
    floor = params.baseline_mv * (1 - 2 * params.contrast * lorentzian(2870.0, 2870.0, params.linewidth_mhz))
    assert abs(adc.millivolts_x10 / 10 - floor) <= quantization_bound_mv(dev.state)


def test_sweep_count_and_order():
    dev = SimulatedDevice()
    out = exchange(dev, p.SweepStart(2_614_000, 3_126_000, 4_000, 6, 0), seq=9)
    points, done = out[:-1], out[-1]
    assert len(points) == 129
    assert [pt.index for pt in points] == list(range(129))
    assert points[-1].f_khz == 3_126_000
    assert done == p.SweepDone(129)


def test_errors_are_frames():
    dev = SimulatedDevice()
    assert exchange(dev, p.SetFrequency(10)) == [p.Err(p.ErrorCode.OUT_OF_RANGE)]
    assert exchange(dev, p.SweepStart(3_000_000, 2_000_000, 4_000, 6, 0)) == [p.Err(p.ErrorCode.OUT_OF_RANGE)]
    assert exchange(dev, p.ReadAdc(0)) == [p.Err(p.ErrorCode.BAD_PAYLOAD)]
    raw = p.Frame(0x42, 3, b"").to_bytes()
    frames = p.decode_all(dev.respond_all(raw))
    assert frames[0].seq == 3
    assert p.parse_message(frames[0]) == p.Err(p.ErrorCode.UNKNOWN_TYPE)
    raw = p.Frame(p.SetFrequency.CODE, 4, b"\x01").to_bytes()
    assert p.parse_message(p.decode_all(dev.respond_all(raw))[0]) == p.Err(p.ErrorCode.BAD_PAYLOAD)


def test_handle_frame_echoes_seq():
    state = SimDeviceState()
    _, frames = handle_frame(state, p.to_frame(p.Ping(), 77))
    assert frames[0].seq == 77


def test_abort_mid_sweep():
    dev = SimulatedDevice()
    dev.receive(p.encode_frame(p.SweepStart(2_614_000, 3_126_000, 4_000, 1, 0), 1))
    sent = [dev.pop_output() for _ in range(10)]
    assert all(sent)
    tail = [p.parse_message(f) for f in p.decode_all(dev.respond_all(p.encode_frame(p.Abort(), 2)))]
    assert tail == [p.Ack(p.Abort.CODE), p.SweepDone(10)]


def test_determinism():
    def run(seed):
        dev = SimulatedDevice(SimDeviceState(noise_sigma_mv=2.0, seed=seed))
        cmds = [p.SetRfEnable(1), p.SweepStart(2_614_000, 3_126_000, 4_000, 6, 0), p.ReadAdc(3)]
        return dev.respond_all(b"".join(p.encode_frame(c, i) for i, c in enumerate(cmds)))

    assert run(5) == run(5)
    assert run(5) != run(6)
