"""
バス識別子の割り当て表とペイロードのエンコード/デコード
小さい id ほど優先（電源アラーム・CTS が最優先、周期センサーデータが最低）
"""
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple

from bus import Frame, FrameId, IdWidth
from sensors import SensorError, SensorKind, SensorReading

POWER_ALARM = FrameId(0x010)
SD_ALARM = FrameId(0x011)
CTS = FrameId(0x020)
COMMAND = FrameId(0x040)
TIMESTAMP = FrameId(0x080)
SENSOR_BASE = 0x400

CTS_MARKER = 0xC7
BROADCAST_TARGET = 0xFF

# 29-bit: 0x10000 | kind<<9 | phase<<8 | msg_type
TRANSPORT_BASE = 0x10000
PHASE_ANNOUNCE = 0
PHASE_DATA = 1

EFF_FLAG = 0x80000000


class MalformedReading(SensorError):
    pass


class TransportKind(IntEnum):
    BROADCAST = 0
    LARGE_TRANSFER = 1


class MsgType(IntEnum):
    NODE_STATUS = 0x01
    FIRMWARE_CHUNK = 0x10
    IMAGE = 0x20


class Opcode(IntEnum):
    DISABLE_PERIODIC = 0x01
    ENABLE_PERIODIC = 0x02
    ENABLE_FORWARDING = 0x03
    DISABLE_FORWARDING = 0x04
    ENTER_REFLASH = 0x10
    FINALIZE_REFLASH = 0x11
    ABORT_REFLASH = 0x12
    REQUEST_SENSOR = 0x20
    REQUEST_STATUS = 0x21
    DRIVE = 0x30
    DEEP_SLEEP = 0x40
    WAKE = 0x41
    BRIDGE_BATTERIES = 0x50
    CAPTURE_IMAGE = 0x60


class PowerAlarmKind(IntEnum):
    BROWN_OUT = 1


def transport_frame_id(kind: TransportKind, phase: int, msg_type: int) -> FrameId:
    return FrameId(TRANSPORT_BASE | (int(kind) << 9) | (phase << 8) | (msg_type & 0xFF),
                   IdWidth.EXTENDED29)


def parse_transport_id(frame_id: FrameId) -> Optional[Tuple[TransportKind, int, int]]:
    """(kind, phase, msg_type) または transport でなければ None"""
    if not frame_id.extended or frame_id.value & ~0x3FF != TRANSPORT_BASE:
        return None
    value = frame_id.value
    return TransportKind((value >> 9) & 1), (value >> 8) & 1, value & 0xFF


def is_file_transfer(frame_id: FrameId) -> bool:
    """ログ対象外: LargeTransfer の announce/data と CTS"""
    if frame_id == CTS:
        return True
    parsed = parse_transport_id(frame_id)
    return parsed is not None and parsed[0] is TransportKind.LARGE_TRANSFER


def sensor_frame_id(kind: SensorKind) -> FrameId:
    return FrameId(SENSOR_BASE + kind.code)


def sensor_kind_of(frame_id: FrameId) -> Optional[SensorKind]:
    if frame_id.extended or not SENSOR_BASE <= frame_id.value < SENSOR_BASE + 0x40:
        return None
    try:
        return SensorKind.from_code(frame_id.value - SENSOR_BASE)
    except KeyError:
        return None


# SMS とログレコードで使う 4 byte の id 表現（bit31 = 29-bit）
def pack_id(frame_id: FrameId) -> bytes:
    value = frame_id.value | (EFF_FLAG if frame_id.extended else 0)
    return struct.pack("<I", value)


def unpack_id(raw: int) -> FrameId:
    if raw & EFF_FLAG:
        return FrameId(raw & ~EFF_FLAG, IdWidth.EXTENDED29)
    return FrameId(raw)


# --- センサー値 ---

VECTOR_SCALE = {
    SensorKind.ACCEL: 1000.0,
    SensorKind.MAG: 10.0,
    SensorKind.GYRO: 10.0,
}
POSITION_SCALE = 1e7


def quantize_vector(kind: SensorKind, value) -> Tuple[float, float, float]:
    scale = VECTOR_SCALE[kind]
    ints = [max(-32768, min(32767, int(round(v * scale)))) for v in value]
    return tuple(i / scale for i in ints)


def encode_reading(kind: SensorKind, value, channel: int = 0) -> bytes:
    if kind is SensorKind.POSITION:
        lat, lon = value
        return struct.pack("<ii", int(round(lat * POSITION_SCALE)), int(round(lon * POSITION_SCALE)))
    if kind.vector:
        scale = VECTOR_SCALE[kind]
        ints = [max(-32768, min(32767, int(round(v * scale)))) for v in value]
        return struct.pack("<Bhhh", channel, *ints)
    return struct.pack("<Bf", channel, float(value))


def decode_reading(kind: SensorKind, payload: bytes):
    """(channel, value) を返す"""
    if kind is SensorKind.POSITION:
        lat, lon = struct.unpack("<ii", payload)
        return 0, (lat / POSITION_SCALE, lon / POSITION_SCALE)
    if kind.vector:
        channel, x, y, z = struct.unpack("<Bhhh", payload)
        scale = VECTOR_SCALE[kind]
        return channel, (x / scale, y / scale, z / scale)
    channel, value = struct.unpack("<Bf", payload)
    return channel, value


def reading_frame(kind: SensorKind, value, source: int, channel: int = 0) -> Frame:
    return Frame(sensor_frame_id(kind), encode_reading(kind, value, channel), source)


def reading_from_frame(frame: Frame, timestamp: float) -> Optional[SensorReading]:
    kind = sensor_kind_of(frame.id)
    if kind is None:
        return None
    try:
        channel, value = decode_reading(kind, frame.payload)
    except struct.error:
        raise MalformedReading(f"{kind.name} frame from node {frame.source} carries {len(frame.payload)} bytes") from None
    return SensorReading(timestamp, frame.source, kind, value, channel)


# --- コマンド ---

@dataclass(frozen=True)
class Command:
    opcode: Opcode
    target: int = BROADCAST_TARGET
    args: bytes = b""

    def addressed_to(self, node_id: int) -> bool:
        return self.target in (BROADCAST_TARGET, node_id)


def command_frame(opcode: Opcode, target: int = BROADCAST_TARGET, args: bytes = b"",
                  source: int = 0) -> Frame:
    return Frame(COMMAND, bytes([int(opcode), target]) + args, source)


def parse_command(frame: Frame) -> Optional[Command]:
    if frame.id != COMMAND or len(frame.payload) < 2:
        return None
    try:
        opcode = Opcode(frame.payload[0])
    except ValueError:
        return None
    return Command(opcode, frame.payload[1], frame.payload[2:])


def reflash_announce_args(behavior: int, version: int, size: int, crc: int) -> bytes:
    return struct.pack("<BBHH", behavior, version & 0xFF, size, crc)


def parse_reflash_announce(args: bytes) -> Tuple[int, int, int, int]:
    return struct.unpack("<BBHH", args[:6])


def cts_frame(index: int, source: int) -> Frame:
    return Frame(CTS, struct.pack("<BI", CTS_MARKER, index), source)


def parse_cts(frame: Frame) -> Optional[int]:
    if frame.id != CTS or len(frame.payload) != 5 or frame.payload[0] != CTS_MARKER:
        return None
    return struct.unpack("<I", frame.payload[1:])[0]


def timestamp_frame(unix_us: int, source: int) -> Frame:
    return Frame(TIMESTAMP, struct.pack("<Q", unix_us), source)


def parse_timestamp(frame: Frame) -> Optional[int]:
    if frame.id != TIMESTAMP or len(frame.payload) != 8:
        return None
    return struct.unpack("<Q", frame.payload)[0]


def power_alarm_frame(logic_v: float, power_v: float, source: int,
                      kind: PowerAlarmKind = PowerAlarmKind.BROWN_OUT) -> Frame:
    """ブラウンアウト時の最後の信号（電圧は 0.01V 単位）"""
    return Frame(POWER_ALARM, struct.pack("<BHH", int(kind), int(round(logic_v * 100)),
                                          int(round(power_v * 100))), source)


def sd_alarm_frame(free_bytes: int, source: int) -> Frame:
    return Frame(SD_ALARM, struct.pack("<I", free_bytes), source)
