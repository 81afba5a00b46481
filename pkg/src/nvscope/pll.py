"""ADF4351 fractional-N frequency planning and register packing.

Output frequency is ``f_pfd * (INT + FRAC/MOD) / 2**rf_div_exp`` with the VCO
held in 2.2-4.4 GHz. All arithmetic is done on exact rationals and reported
values are rounded to the nearest hertz.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

from .spectrum import SweepPlan

VCO_MIN_KHZ = 2_200_000
VCO_MAX_KHZ = 4_400_000
MOD_MAX = 4095
INT_MIN, INT_MAX = 23, 65535
INT_MIN_PRESCALER_89 = 75
PRESCALER_89_ABOVE_KHZ = 3_600_000
PFD_MAX_KHZ = 32_000
BAND_SELECT_MAX_KHZ = 125

TABLE_MAGIC = b"NVSW"
TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sHI")
_TABLE_ENTRY = struct.Struct("<7I")


class PllError(ValueError):
    def __init__(self, message: str, f_target_khz=None):
        super().__init__(message)
        self.f_target_khz = f_target_khz


class OutOfRange(PllError):
    pass


class Unrepresentable(PllError):
    pass


class MalformedRegisters(PllError):
    pass


def _exact(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def _round_to_hz(khz: Fraction) -> float:
    return round(khz * 1000) / 1000


@dataclass(frozen=True)
class PllConfig:
    ref_mhz: float = 25.0
    r_counter: int = 1
    doubler: bool = False
    rdiv2: bool = False
    min_out_khz: int = 35_000
    max_out_khz: int = 4_400_000

    def __post_init__(self):
        if not self.ref_mhz > 0:
            raise ValueError("ref_mhz must be positive")
        if not 1 <= self.r_counter <= 1023:
            raise ValueError("r_counter must be in [1, 1023]")
        if self.min_out_khz > self.max_out_khz:
            raise ValueError("min_out_khz above max_out_khz")
        if self.pfd_khz > PFD_MAX_KHZ:
            raise ValueError(f"PFD frequency {float(self.pfd_khz)} kHz exceeds {PFD_MAX_KHZ} kHz")

    @property
    def pfd_khz(self) -> Fraction:
        ref_khz = _exact(self.ref_mhz) * 1000
        return ref_khz * (1 + self.doubler) / (self.r_counter * (1 + self.rdiv2))


@dataclass(frozen=True)
class FrequencyPlan:
    int_n: int
    frac: int
    mod: int
    rf_div_exp: int
    f_pfd_khz: float
    f_target_khz: float
    f_actual_khz: float

    @property
    def f_vco_khz(self) -> float:
        return self.f_actual_khz * (1 << self.rf_div_exp)

    def check(self) -> None:
        if not 2 <= self.mod <= MOD_MAX:
            raise Unrepresentable(f"MOD={self.mod} outside [2, {MOD_MAX}]", self.f_target_khz)
        if not 0 <= self.frac < self.mod:
            raise Unrepresentable(f"FRAC={self.frac} outside [0, MOD)", self.f_target_khz)
        if self.frac and math.gcd(self.frac, self.mod) != 1:
            raise Unrepresentable("FRAC/MOD not reduced", self.f_target_khz)
        if not INT_MIN <= self.int_n <= INT_MAX:
            raise Unrepresentable(f"INT={self.int_n} outside [{INT_MIN}, {INT_MAX}]", self.f_target_khz)
        if not 0 <= self.rf_div_exp <= 6:
            raise Unrepresentable("RF divider exponent outside [0, 6]", self.f_target_khz)
        # tolerance covers the sub-hertz rounding of f_actual
        if not VCO_MIN_KHZ - 1 <= self.f_vco_khz <= VCO_MAX_KHZ + 1:
            raise Unrepresentable(f"VCO {self.f_vco_khz} kHz outside lock range", self.f_target_khz)


class RegisterSet(NamedTuple):
    r0: int
    r1: int
    r2: int
    r3: int
    r4: int
    r5: int

    def hex_words(self) -> list[str]:
        return [f"0x{w:08X}" for w in self]

    def write_order(self) -> tuple[int, ...]:
        """Words in the order the device must be programmed (R5 first)."""
        return tuple(reversed(self))


# (register, shift, width) for each field used here; datasheet register map.
FIELDS = {
    "int": (0, 15, 16),
    "frac": (0, 3, 12),
    "phase_adjust": (1, 28, 1),
    "prescaler": (1, 27, 1),
    "phase": (1, 15, 12),
    "mod": (1, 3, 12),
    "noise_mode": (2, 29, 2),
    "muxout": (2, 26, 3),
    "ref_doubler": (2, 25, 1),
    "rdiv2": (2, 24, 1),
    "r_counter": (2, 14, 10),
    "double_buffer": (2, 13, 1),
    "cp_current": (2, 9, 4),
    "ldf": (2, 8, 1),
    "ldp": (2, 7, 1),
    "pd_polarity": (2, 6, 1),
    "power_down": (2, 5, 1),
    "cp_three_state": (2, 4, 1),
    "counter_reset": (2, 3, 1),
    "band_select_mode": (3, 23, 1),
    "abp": (3, 22, 1),
    "charge_cancel": (3, 21, 1),
    "csr": (3, 18, 1),
    "clk_div_mode": (3, 15, 2),
    "clock_divider": (3, 3, 12),
    "feedback_select": (4, 23, 1),
    "rf_div_select": (4, 20, 3),
    "band_select_div": (4, 12, 8),
    "vco_power_down": (4, 11, 1),
    "mtld": (4, 10, 1),
    "aux_select": (4, 9, 1),
    "aux_enable": (4, 8, 1),
    "aux_power": (4, 6, 2),
    "rf_enable": (4, 5, 1),
    "output_power": (4, 3, 2),
    "ld_pin_mode": (5, 22, 2),
    "r5_fixed": (5, 19, 2),
}

# bits that must read back as zero (address bits excluded)
RESERVED_MASKS = (
    1 << 31,
    0b111 << 29,
    1 << 31,
    (0xFF << 24) | (0b11 << 19) | (1 << 17),
    0xFF << 24,
    (0xFF << 24) | (1 << 21) | (0xFFFF << 3),
)


def get_field(regs: RegisterSet, name: str) -> int:
    reg, shift, width = FIELDS[name]
    return (regs[reg] >> shift) & ((1 << width) - 1)


def _pack(values: dict[str, int]) -> RegisterSet:
    words = [addr for addr in range(6)]
    for name, value in values.items():
        reg, shift, width = FIELDS[name]
        if not 0 <= value < (1 << width):
            raise ValueError(f"{name}={value} does not fit in {width} bits")
        words[reg] |= value << shift
    return RegisterSet(*words)


def plan_frequency(cfg: PllConfig, f_target_khz) -> FrequencyPlan:
    target = _exact(f_target_khz)
    if not cfg.min_out_khz <= target <= cfg.max_out_khz:
        raise OutOfRange(
            f"{float(target) / 1000:g} MHz outside output range "
            f"{cfg.min_out_khz / 1000:g}-{cfg.max_out_khz / 1000:g} MHz",
            f_target_khz,
        )
    for exp in range(7):
        if target * (1 << exp) >= VCO_MIN_KHZ:
            break
    else:
        raise OutOfRange(f"{float(target)} kHz too low for the VCO divider chain", f_target_khz)
    pfd = cfg.pfd_khz
    n = target * (1 << exp) / pfd
    int_n = math.floor(n)
    fraction = n - int_n
    if fraction.denominator <= MOD_MAX:
        frac, mod = fraction.numerator, fraction.denominator
    else:
        frac, mod = round(fraction * MOD_MAX), MOD_MAX
        if frac == mod:
            int_n, frac = int_n + 1, 0
        g = math.gcd(frac, mod)
        if frac:
            frac, mod = frac // g, mod // g
    if frac == 0:
        mod = 2
    if not INT_MIN <= int_n <= INT_MAX:
        raise Unrepresentable(
            f"INT={int_n} outside [{INT_MIN}, {INT_MAX}] for {float(target)} kHz", f_target_khz
        )
    actual = pfd * (int_n + Fraction(frac, mod)) / (1 << exp)
    plan = FrequencyPlan(
        int_n=int_n,
        frac=frac,
        mod=mod,
        rf_div_exp=exp,
        f_pfd_khz=float(pfd),
        f_target_khz=f_target_khz,
        f_actual_khz=_round_to_hz(actual),
    )
    plan.check()
    return plan


def encode_registers(plan: FrequencyPlan, cfg: PllConfig) -> RegisterSet:
    plan.check()
    prescaler_89 = plan.f_vco_khz > PRESCALER_89_ABOVE_KHZ
    if prescaler_89 and plan.int_n < INT_MIN_PRESCALER_89:
        raise Unrepresentable(f"INT={plan.int_n} below 75 with the 8/9 prescaler", plan.f_target_khz)
    # band-select clock must stay at or below 125 kHz; the field saturates at 255
    band_div = min(255, max(1, math.ceil(cfg.pfd_khz / BAND_SELECT_MAX_KHZ)))
    return _pack(
        {
            "int": plan.int_n,
            "frac": plan.frac,
            "prescaler": int(prescaler_89),
            "phase": 1,
            "mod": plan.mod,
            "ref_doubler": int(cfg.doubler),
            "rdiv2": int(cfg.rdiv2),
            "r_counter": cfg.r_counter,
            "cp_current": 7,
            "ldf": int(plan.frac == 0),
            "pd_polarity": 1,
            "muxout": 6,
            "clock_divider": 150,
            "feedback_select": 1,
            "rf_div_select": plan.rf_div_exp,
            "band_select_div": band_div,
            "rf_enable": 1,
            "output_power": 3,
            "ld_pin_mode": 1,
            "r5_fixed": 0b11,
        }
    )


def decode_frequency(regs: RegisterSet, cfg: PllConfig) -> float:
    """Output frequency in kHz (rounded to 1 Hz) programmed by ``regs``.

    The PFD is rebuilt from the R2 counter/doubler fields and ``cfg.ref_mhz``.
    """
    regs = RegisterSet(*regs)
    for addr, word in enumerate(regs):
        if not 0 <= word <= 0xFFFFFFFF:
            raise MalformedRegisters(f"R{addr} is not a 32-bit word")
        if word & 0b111 != addr:
            raise MalformedRegisters(f"R{addr} carries address {word & 0b111}")
        if word & RESERVED_MASKS[addr]:
            raise MalformedRegisters(f"R{addr} has reserved bits set")
    mod = get_field(regs, "mod")
    if mod < 2:
        raise MalformedRegisters(f"MOD={mod} below 2")
    r_counter = get_field(regs, "r_counter")
    if r_counter == 0:
        raise MalformedRegisters("R counter is zero")
    ref_khz = _exact(cfg.ref_mhz) * 1000
    pfd = ref_khz * (1 + get_field(regs, "ref_doubler")) / (r_counter * (1 + get_field(regs, "rdiv2")))
    n = get_field(regs, "int") + Fraction(get_field(regs, "frac"), mod)
    return _round_to_hz(pfd * n / (1 << get_field(regs, "rf_div_select")))


class SweepEntry(NamedTuple):
    f_khz: int
    plan: FrequencyPlan
    registers: RegisterSet


class SweepTable(list):
    """Ascending list of :class:`SweepEntry` with firmware serialisation."""

    ENTRY_SIZE = _TABLE_ENTRY.size

    def to_bytes(self) -> bytes:
        parts = [_TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, len(self))]
        parts.extend(_TABLE_ENTRY.pack(e.f_khz, *e.registers) for e in self)
        return b"".join(parts)


def build_sweep_table(cfg: PllConfig, plan: SweepPlan) -> SweepTable:
    table = SweepTable()
    for f_khz in plan.frequencies_khz():
        try:
            fplan = plan_frequency(cfg, f_khz)
        except PllError as exc:
            raise type(exc)(f"sweep point {f_khz} kHz: {exc}", f_khz) from exc
        regs = encode_registers(fplan, cfg)
        if abs(decode_frequency(regs, cfg) - f_khz) >= 1:
            raise Unrepresentable(f"sweep point {f_khz} kHz decodes off-target", f_khz)
        table.append(SweepEntry(f_khz, fplan, regs))
    return table


def parse_sweep_table(data: bytes) -> list[tuple[int, RegisterSet]]:
    if len(data) < _TABLE_HEADER.size:
        raise MalformedRegisters("sweep table shorter than its header")
    magic, version, count = _TABLE_HEADER.unpack_from(data)
    if magic != TABLE_MAGIC:
        raise MalformedRegisters(f"bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise MalformedRegisters(f"unsupported table version {version}")
    expected = _TABLE_HEADER.size + count * _TABLE_ENTRY.size
    if len(data) != expected:
        raise MalformedRegisters(f"table length {len(data)} != {expected} for {count} entries")
    out = []
    for i in range(count):
        f_khz, *words = _TABLE_ENTRY.unpack_from(data, _TABLE_HEADER.size + i * _TABLE_ENTRY.size)
        out.append((f_khz, RegisterSet(*words)))
    return out
