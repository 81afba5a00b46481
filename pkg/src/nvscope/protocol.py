"""Host/device binary framing.

Frame layout (little-endian)::

    A5 | type u8 | seq u8 | len u16 | payload[len] | crc16 u16

The CRC is CRC-16/CCITT-FALSE over ``type..payload``. Payloads are at most
512 bytes, so a frame never exceeds 519 bytes.
"""
from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import ClassVar, Union

SOF = 0xA5
HEADER_SIZE = 5
CRC_SIZE = 2
OVERHEAD = HEADER_SIZE + CRC_SIZE
MAX_PAYLOAD = 512
MAX_FRAME = OVERHEAD + MAX_PAYLOAD
DECODER_CAPACITY = MAX_FRAME + OVERHEAD

_HEADER = struct.Struct("<BBBH")


def crc16(data: bytes, crc: int = 0xFFFF) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout."""
    return binascii.crc_hqx(data, crc)


class ProtocolError(Exception):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class PayloadError(ProtocolError):
    pass


class ErrorCode(IntEnum):
    UNKNOWN_TYPE = 0x01
    BAD_PAYLOAD = 0x02
    OUT_OF_RANGE = 0x03
    BUSY = 0x04


@dataclass(frozen=True)
class Frame:
    ftype: int
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.ftype <= 0xFF or not 0 <= self.seq <= 0xFF:
            raise ValueError("ftype and seq are single bytes")
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    def to_bytes(self) -> bytes:
        body = struct.pack("<BBH", self.ftype, self.seq, len(self.payload)) + bytes(self.payload)
        return bytes([SOF]) + body + struct.pack("<H", crc16(body))

    def __len__(self) -> int:
        return OVERHEAD + len(self.payload)


# -- messages ---------------------------------------------------------------

MESSAGE_TYPES: dict[int, type] = {}


def _message(code: int, fmt: str = ""):
    def register(cls):
        cls.CODE = code
        cls.FORMAT = struct.Struct("<" + fmt)
        MESSAGE_TYPES[code] = cls
        return dataclass(frozen=True)(cls)

    return register


class Message:
    CODE: ClassVar[int]
    FORMAT: ClassVar[struct.Struct]

    def payload(self) -> bytes:
        try:
            return self.FORMAT.pack(*(getattr(self, f.name) for f in fields(self)))
        except struct.error as exc:
            raise PayloadError(f"{type(self).__name__}: {exc}") from exc

    @classmethod
    def from_payload(cls, payload: bytes) -> "Message":
        if len(payload) != cls.FORMAT.size:
            raise PayloadError(
                f"{cls.__name__} expects {cls.FORMAT.size} payload bytes, got {len(payload)}"
            )
        return cls(*cls.FORMAT.unpack(payload))


@_message(0x01)
class Ping(Message):
    pass


@_message(0x02)
class GetInfo(Message):
    pass


@_message(0x03, "I")
class SetFrequency(Message):
    f_khz: int


@_message(0x04, "B")
class SetRfEnable(Message):
    on: int


@_message(0x05, "H")
class ReadAdc(Message):
    n_avg: int


@_message(0x06, "IIIHH")
class SweepStart(Message):
    start_khz: int
    stop_khz: int
    step_khz: int
    n_avg: int
    settle_ms: int


@_message(0x07)
class Abort(Message):
    pass


@_message(0x81)
class Pong(Message):
    pass


@_message(0x82, "HBH")
class Info(Message):
    fw_version: int
    adc_bits: int
    vref_mv: int


@_message(0x83, "B")
class Ack(Message):
    code: int


@_message(0x84, "HH")
class AdcValue(Message):
    counts: int
    millivolts_x10: int


@_message(0x85, "HIH")
class SweepPoint(Message):
    index: int
    f_khz: int
    millivolts_x10: int


@_message(0x86, "H")
class SweepDone(Message):
    count: int


@_message(0x87, "B")
class Err(Message):
    code: int


Command = Union[Ping, GetInfo, SetFrequency, SetRfEnable, ReadAdc, SweepStart, Abort]
Response = Union[Pong, Info, Ack, AdcValue, SweepPoint, SweepDone, Err]

COMMAND_CODES = frozenset(range(0x01, 0x08))
RESPONSE_CODES = frozenset(range(0x81, 0x88))

# bit 15 of Info.fw_version marks a simulator build
FW_SIMULATED_FLAG = 0x8000


def to_frame(message: Message, seq: int) -> Frame:
    return Frame(message.CODE, seq, message.payload())


def encode_frame(message: Message, seq: int) -> bytes:
    return to_frame(message, seq).to_bytes()


def parse_message(frame: Frame) -> Message:
    cls = MESSAGE_TYPES.get(frame.ftype)
    if cls is None:
        raise PayloadError(f"unknown frame type 0x{frame.ftype:02X}")
    return cls.from_payload(frame.payload)


# -- streaming decoder ------------------------------------------------------


@dataclass(frozen=True)
class DecodeError:
    kind: str  # "BadCrc" | "UnknownType" | "LengthOverflow"
    offset: int
    frame: Frame | None = None

    BAD_CRC: ClassVar[str] = "BadCrc"
    UNKNOWN_TYPE: ClassVar[str] = "UnknownType"
    LENGTH_OVERFLOW: ClassVar[str] = "LengthOverflow"


@dataclass
class DecoderState:
    """Incremental push parser; one instance per byte stream.

    CRC-valid frames of unregistered type are not returned as frames; they
    are reported as ``UnknownType`` errors that carry the frame so a device
    can answer them.
    """

    known_types: frozenset = frozenset(MESSAGE_TYPES)
    buffer: bytearray = field(default_factory=bytearray)
    consumed: int = 0  # stream offset of buffer[0]
    skipped: int = 0
    high_water: int = 0

    def feed(self, chunk: bytes) -> tuple[list[Frame], list[DecodeError]]:
        frames: list[Frame] = []
        errors: list[DecodeError] = []
        view = memoryview(chunk)
        pos = 0
        while pos < len(view):
            room = DECODER_CAPACITY - len(self.buffer)
            take = view[pos:pos + room]
            self.buffer += take
            pos += len(take)
            self.high_water = max(self.high_water, len(self.buffer))
            self._drain(frames, errors)
        return frames, errors

    def _discard(self, n: int) -> None:
        del self.buffer[:n]
        self.consumed += n

    def _drain(self, frames: list[Frame], errors: list[DecodeError]) -> None:
        buf = self.buffer
        while True:
            start = buf.find(SOF)
            if start < 0:
                self.skipped += len(buf)
                self._discard(len(buf))
                return
            if start:
                self.skipped += start
                self._discard(start)
            if len(buf) < HEADER_SIZE:
                return
            _, ftype, seq, length = _HEADER.unpack_from(buf)
            if length > MAX_PAYLOAD:
                errors.append(DecodeError(DecodeError.LENGTH_OVERFLOW, self.consumed))
                self._discard(1)
                continue
            total = OVERHEAD + length
            if len(buf) < total:
                return
            (crc,) = struct.unpack_from("<H", buf, HEADER_SIZE + length)
            if crc16(bytes(buf[1:HEADER_SIZE + length])) != crc:
                errors.append(DecodeError(DecodeError.BAD_CRC, self.consumed))
                self._discard(1)
                continue
            frame = Frame(ftype, seq, bytes(buf[HEADER_SIZE:HEADER_SIZE + length]))
            if ftype in self.known_types:
                frames.append(frame)
            else:
                errors.append(DecodeError(DecodeError.UNKNOWN_TYPE, self.consumed, frame))
            self._discard(total)


def feed_decoder(state: DecoderState, chunk: bytes) -> tuple[DecoderState, list[Frame], list[DecodeError]]:
    frames, errors = state.feed(chunk)
    return state, frames, errors


def decode_all(data: bytes) -> list[Frame]:
    frames, _ = DecoderState().feed(data)
    return frames
