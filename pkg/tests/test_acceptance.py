"""End-to-end acceptance criteria, one test per criterion.

Each test records a single ``[PASS]``/``[FAIL]`` line; the lines are printed
in the pytest terminal summary (see conftest.py) and on stdout with ``-s``.
"""
import os
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nvscope import pll
from nvscope import protocol as p
from nvscope.analysis import analyze, model_jacobian, model_values
from nvscope.cli import main
from nvscope.physics import MagneticField, NvParameters, hamiltonian_resonances, resonance_pair
from nvscope.spectrum import SweepPlan

from conftest import PtySimulator, simulate

RESULTS = {}


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_criterion_1_closed_form_vs_hamiltonian():
    t0 = time.perf_counter()
    worst = 0.0
    for b in np.arange(0.0, 10.0 + 1e-9, 0.5):
        for e in range(11):
            params = NvParameters(e_mhz=float(e))
            closed = resonance_pair(params, float(b))
            full = hamiltonian_resonances(params, MagneticField.axial(float(b)))
            worst = max(worst, abs(closed[0] - full[0]), abs(closed[1] - full[1]))
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-6 and elapsed < 1.0, f"231 points, max error {worst:.2e} MHz in {elapsed:.3f} s")


def test_criterion_2_default_sweep_exact():
    cfg = pll.PllConfig(ref_mhz=25.0)
    errors = []
    for f_khz in SweepPlan().frequencies_khz():
        plan = pll.plan_frequency(cfg, f_khz)
        back = pll.decode_frequency(pll.encode_registers(plan, cfg), cfg)
        errors.append(abs(back - f_khz) * 1000)
    record(2, len(errors) == 129 and max(errors) == 0.0, f"{len(errors)} frequencies, max error {max(errors)} Hz")


def test_criterion_3_table_entry_size():
    table = pll.build_sweep_table(pll.PllConfig(), SweepPlan())
    data = table.to_bytes()
    per_entry = (len(data) - 10) / len(table)
    record(3, table.ENTRY_SIZE == 28 and per_entry == 28 and per_entry <= 30,
           f"{per_entry:g} bytes per entry ({len(table)} entries)")


def test_criterion_4_magnet_end_to_end():
    t0 = time.perf_counter()
    ok_magnet = ok_zero = 0
    worst = 0.0
    for seed in range(20):
        report = analyze(simulate(7.5, seed=seed, noise_mv=1.0))
        b, split = report.field.b_parallel_mt, report.field.splitting_mhz
        worst = max(worst, abs(b - 7.5))
        ok_magnet += abs(b - 7.5) <= 0.2 and abs(split - 420.0) <= 8.0
        zero = analyze(simulate(0.0, seed=seed, noise_mv=1.0))
        ok_zero += zero.field.b_parallel_mt < 0.2
    elapsed = time.perf_counter() - t0
    ok = ok_magnet >= 19 and ok_zero >= 19 and elapsed < 10.0
    record(4, ok, f"magnet {ok_magnet}/20 (worst |dB| {worst:.4f} mT), no magnet {ok_zero}/20, {elapsed:.2f} s")


def test_criterion_5_jacobian():
    rng = np.random.default_rng(2024)
    f = SweepPlan().frequencies_mhz()
    worst = 0.0
    for _ in range(100):
        theta = np.array([
            rng.uniform(-10, 10), rng.uniform(1, 60), rng.uniform(1, 60),
            rng.uniform(2620, 2860), rng.uniform(2880, 3120), rng.uniform(2, 40), rng.uniform(2, 40),
        ])
        ana = model_jacobian(theta, f)
        num = np.empty_like(ana)
        # centres and widths vary on the scale of the narrowest line, not their magnitude
        scales = [max(1.0, abs(theta[0])), theta[1], theta[2]] + [min(theta[5:7])] * 4
        for k in range(7):
            h = 1e-5 * scales[k]
            up, dn = theta.copy(), theta.copy()
            up[k] += h
            dn[k] -= h
            num[:, k] = (model_values(up, f) - model_values(dn, f)) / (2 * h)
        # relative to each column's scale so vanishing tail entries do not dominate
        scale = np.max(np.abs(ana), axis=0)
        worst = max(worst, float(np.max(np.abs(ana - num) / scale)))
    record(5, worst < 1e-6, f"100 parameter points, max relative error {worst:.2e}")


def test_criterion_6_protocol_robustness():
    rng = np.random.default_rng(6)
    fuzz = rng.integers(0, 256, 1_000_000, dtype=np.uint8).tobytes()
    state = p.DecoderState()
    pos = 0
    while pos < len(fuzz):
        n = int(rng.integers(1, 4096))
        state.feed(fuzz[pos:pos + n])
        pos += n
    bounded = state.high_water <= p.DECODER_CAPACITY

    types = sorted(p.MESSAGE_TYPES)
    frames = [
        p.Frame(int(rng.choice(types)), int(rng.integers(256)), rng.bytes(int(rng.integers(0, 65))))
        for _ in range(10_000)
    ]
    stream = b"".join(f.to_bytes() for f in frames)
    dec = p.DecoderState()
    got = []
    pos = 0
    while pos < len(stream):
        n = int(rng.integers(1, 300))
        out, errors = dec.feed(stream[pos:pos + n])
        assert not errors
        got.extend(out)
        pos += n
    round_trip = got == frames and b"".join(f.to_bytes() for f in got) == stream
    check = p.crc16(b"123456789")
    ok = bounded and round_trip and check == 0x29B1
    record(6, ok, f"fuzz high-water {state.high_water} B, {len(got)}/10000 frames exact, CRC check 0x{check:04X}")


def test_criterion_7_pll_round_trip():
    cfg = pll.PllConfig()
    rng = np.random.default_rng(7)
    bad_bound = bad_decode = 0
    for f_khz in rng.integers(cfg.min_out_khz, cfg.max_out_khz + 1, 10_000):
        plan = pll.plan_frequency(cfg, int(f_khz))
        exact = cfg.pfd_khz * (plan.int_n + Fraction(plan.frac, plan.mod)) / (1 << plan.rf_div_exp)
        bound = cfg.pfd_khz / (2 * pll.MOD_MAX * (1 << plan.rf_div_exp))
        bad_bound += abs(exact - int(f_khz)) > bound
        bad_decode += pll.decode_frequency(pll.encode_registers(plan, cfg), cfg) != plan.f_actual_khz
    record(7, bad_bound == 0 and bad_decode == 0,
           f"10000 targets, {bad_bound} outside error bound, {bad_decode} decode mismatches")


def test_criterion_8_transport_equivalence(tmp_path, capsys):
    sim = PtySimulator(b_mt=7.5, seed=42)
    try:
        acq = tmp_path / "acquired.csv"
        code_a = main(["acquire", "--port", sim.path, "--out", str(acq)])
    finally:
        sim.close()
    ref = tmp_path / "simulated.csv"
    code_s = main(["simulate", "--b-mt", "7.5", "--seed", "42", "--out", str(ref)])
    capsys.readouterr()
    same = code_a == 0 and code_s == 0 and acq.read_bytes() == ref.read_bytes()
    record(8, same, f"acquire over pty exit {code_a}, simulate exit {code_s}, CSVs byte-identical: {same}")


def test_criterion_9_valley_separation(tmp_path):
    from nvscope.plot import render_svg

    magnet, bare = simulate(7.5, seed=1), simulate(0.0, seed=1)
    sep = []
    for spec in (magnet, bare):
        m = analyze(spec).fit.model
        sep.append(m.c2 - m.c1)
    svg = render_svg([magnet, bare], ["magnet", "no magnet"])
    (tmp_path / "overlay.svg").write_text(svg)
    gain = sep[0] - sep[1]
    record(9, gain > 300.0 and svg.count('class="trace"') == 2,
           f"separation {sep[0]:.1f} MHz vs {sep[1]:.1f} MHz, increase {gain:.1f} MHz")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
