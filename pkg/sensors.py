"""
センサー処理の数学とプロトコルパーサ
距離・姿勢・方位・風速・7セグ表示・1-Wire 列挙・NMEA
"""
import logging
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Vector = Tuple[float, float, float]


class SensorError(Exception):
    """センサー処理エラーの基底クラス"""


class NegativeDuration(SensorError):
    pass


class ZeroVector(SensorError):
    pass


class DegenerateField(SensorError):
    pass


class AngleOutOfRange(SensorError):
    pass


class EmptyTable(SensorError):
    pass


class NonMonotoneTable(SensorError):
    pass


class UnknownGlyph(SensorError):
    def __init__(self, mask: int, position: int):
        super().__init__(f"unknown segment mask 0b{mask:b} at digit {position}")
        self.mask = mask
        self.position = position


class MalformedDisplay(SensorError):
    pass


class BadChecksum(SensorError):
    pass


class MalformedField(SensorError):
    pass


class UnsupportedSentenceType(SensorError):
    pass


class EmptyInput(SensorError):
    pass


class SensorRangeError(SensorError):
    pass


class SensorKind(Enum):
    """(code, 単位, ベクトルか)"""
    TEMPERATURE = (0, "°C", False)
    PRESSURE = (1, "kPa", False)
    HUMIDITY = (2, "%", False)
    WIND = (3, "m/s", False)
    RAINFALL = (4, "tips", False)
    PH = (5, "pH", False)
    SMOKE = (6, "relative", False)
    DISTANCE = (7, "m", False)
    ACCEL = (8, "g", True)
    MAG = (9, "µT", True)
    GYRO = (10, "°/s", True)
    BATTERY = (11, "V", False)
    ARM_ANGLE = (12, "°", False)
    POSITION = (13, "°", False)

    def __init__(self, code, unit, vector):
        self.code = code
        self.unit = unit
        self.vector = vector

    @classmethod
    def from_code(cls, code: int) -> "SensorKind":
        for kind in cls:
            if kind.code == code:
                return kind
        raise KeyError(code)

    @classmethod
    def from_name(cls, name: str) -> "SensorKind":
        return cls[name.upper()]


_RANGES = {
    SensorKind.ARM_ANGLE: (0.0, 90.0),
    SensorKind.HUMIDITY: (10.0, 95.0),
    SensorKind.PH: (0.0, 14.0),
}


@dataclass(frozen=True)
class SensorReading:
    timestamp: float
    source: int
    sensor: SensorKind
    value: Union[float, Vector]
    channel: int = 0

    def __post_init__(self):
        if self.sensor.vector and not isinstance(self.value, tuple):
            raise SensorRangeError(f"{self.sensor.name} needs a 3-vector")
        limits = _RANGES.get(self.sensor)
        if limits and not (limits[0] <= self.value <= limits[1]):
            raise SensorRangeError(f"{self.sensor.name} value {self.value} outside {limits}")


@dataclass(frozen=True)
class BiasCalibration:
    """磁力計のソフトアイアン補正（アーム上げ/下げ）"""
    bias_raised: Vector
    bias_lowered: Vector
    reference_free_field: Vector

    def __post_init__(self):
        for name in ("bias_raised", "bias_lowered", "reference_free_field"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != 3 or not all(math.isfinite(v) for v in vec):
                raise SensorError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, vec)

    def bias_at(self, arm_angle: float) -> np.ndarray:
        if not 0.0 <= arm_angle <= 90.0:
            raise AngleOutOfRange(f"arm angle {arm_angle} outside [0, 90]")
        lowered = np.asarray(self.bias_lowered)
        raised = np.asarray(self.bias_raised)
        return lowered + (arm_angle / 90.0) * (raised - lowered)

    @classmethod
    def from_dict(cls, data: dict) -> "BiasCalibration":
        return cls(tuple(data["bias_raised"]), tuple(data["bias_lowered"]),
                   tuple(data["reference_free_field"]))


# --- 距離 ---

def speed_of_sound(temperature: float) -> float:
    """音速 (m/s)、20°C で約 343 m/s"""
    return 331.3 + 0.606 * temperature


def ultrasonic_distance(echo_high_duration: float, temperature: float) -> float:
    if echo_high_duration < 0:
        raise NegativeDuration(f"echo duration {echo_high_duration} < 0")
    return speed_of_sound(temperature) * echo_high_duration / 2.0


# --- 姿勢と方位 ---

def tilt_from_accel(g: Sequence[float]) -> Tuple[float, float]:
    """加速度ベクトルから (pitch, roll) を度で返す"""
    gx, gy, gz = (float(v) for v in g)
    if gx == 0.0 and gy == 0.0 and gz == 0.0:
        raise ZeroVector("gravity vector has zero magnitude")
    pitch = math.atan2(-gx, math.sqrt(gy * gy + gz * gz))
    roll = math.atan2(gy, gz)
    return math.degrees(pitch), math.degrees(roll)


HORIZONTAL_EPSILON = 1e-9


def tilt_compensated_heading(mag: Sequence[float], pitch: float, roll: float) -> float:
    """傾き補正した方位（北から時計回り, [0, 360)）"""
    mx, my, mz = (float(v) for v in mag)
    if not all(math.isfinite(v) for v in (mx, my, mz)):
        raise DegenerateField("magnetometer reading is not finite")
    p = math.radians(pitch)
    r = math.radians(roll)
    # roll で戻してから pitch で戻す
    y_h = my * math.cos(r) - mz * math.sin(r)
    z_r = my * math.sin(r) + mz * math.cos(r)
    x_h = mx * math.cos(p) + z_r * math.sin(p)
    if math.hypot(x_h, y_h) < HORIZONTAL_EPSILON:
        raise DegenerateField("horizontal field component vanishes")
    heading = math.degrees(math.atan2(-y_h, x_h))
    return heading % 360.0


def soft_iron_correct(mag: Sequence[float], arm_angle: float, cal: BiasCalibration) -> Vector:
    corrected = np.asarray(mag, dtype=float) - cal.bias_at(arm_angle)
    return tuple(float(v) for v in corrected)


# --- 風速 ---

def wind_speed(deflection: float, tilt_correction: float,
               table: Sequence[Tuple[float, float]]) -> float:
    """校正テーブルで区分線形補間（両端でクランプ）"""
    if len(table) < 2:
        raise EmptyTable("wind calibration needs at least two entries")
    counts = np.array([p[0] for p in table], dtype=float)
    speeds = np.array([p[1] for p in table], dtype=float)
    if np.any(np.diff(counts) <= 0):
        raise NonMonotoneTable("deflection column must be strictly increasing")
    corrected = deflection - tilt_correction
    return float(np.interp(corrected, counts, speeds))


def wind_deflection(speed: float, table: Sequence[Tuple[float, float]]) -> float:
    """wind_speed の逆（シミュレーション用）"""
    counts = np.array([p[0] for p in table], dtype=float)
    speeds = np.array([p[1] for p in table], dtype=float)
    return float(np.interp(speed, speeds, counts))


# --- 7セグメント表示 ---

# bit0=a ... bit6=g
SEGMENT_DIGITS = {
    0x3F: "0", 0x06: "1", 0x5B: "2", 0x4F: "3", 0x66: "4",
    0x6D: "5", 0x7D: "6", 0x07: "7", 0x7F: "8", 0x6F: "9",
    0x00: " ", 0x40: "-",
}
_GLYPH_MASKS = {char: mask for mask, char in SEGMENT_DIGITS.items()}


def decode_segments(patterns: Sequence[int], decimal_point_mask: int = 0) -> float:
    """
    画面の信号から表示値を復元

    Args:
        patterns: 桁ごとのセグメントマスク（左から）
        decimal_point_mask: bit i が立っていれば i 桁目の後ろに小数点
    """
    text = []
    for position, mask in enumerate(patterns):
        if mask not in SEGMENT_DIGITS:
            raise UnknownGlyph(mask, position)
        text.append(SEGMENT_DIGITS[mask])
        if decimal_point_mask >> position & 1:
            text.append(".")
    shown = "".join(text).strip()
    if not shown or shown in ("-", "."):
        raise MalformedDisplay("display is blank")
    try:
        return float(shown)
    except ValueError:
        raise MalformedDisplay(f"display shows {shown!r}") from None


def encode_segments(shown: str, width: Optional[int] = None) -> Tuple[List[int], int]:
    """表示文字列をマスク列に（右詰め）"""
    digits: List[str] = []
    points: Set[int] = set()
    for char in shown:
        if char == ".":
            if not digits:
                digits.append("0")
            points.add(len(digits) - 1)
        else:
            digits.append(char)
    pad = 0 if width is None else width - len(digits)
    if pad < 0:
        raise MalformedDisplay(f"{shown!r} does not fit {width} digits")
    masks = [_GLYPH_MASKS[" "]] * pad + [_GLYPH_MASKS[c] for c in digits]
    dp_mask = 0
    for index in points:
        dp_mask |= 1 << (index + pad)
    return masks, dp_mask


# --- 1-Wire ---

class OneWireNetwork:
    """wired-AND の 1-Wire バス（ROM search のビット応答だけを模擬）"""

    ID_BITS = 64

    def __init__(self, devices: Iterable[int]):
        self.devices = set(devices)
        self.queries = 0
        self._active: Set[int] = set()

    def reset(self) -> bool:
        self._active = set(self.devices)
        return bool(self._active)

    def read_pair(self, bit: int) -> Tuple[int, int]:
        """ビットとその補数を読む（どれかが 0 を出せば 0）"""
        self.queries += 1
        bits = {(d >> bit) & 1 for d in self._active}
        id_bit = 0 if 0 in bits else 1
        cmp_bit = 0 if 1 in bits else 1
        return id_bit, cmp_bit

    def write_direction(self, bit: int, direction: int):
        self._active = {d for d in self._active if (d >> bit) & 1 == direction}


def onewire_search(devices: Union[Iterable[int], OneWireNetwork]) -> List[int]:
    network = devices if isinstance(devices, OneWireNetwork) else OneWireNetwork(devices)
    found: List[int] = []
    last_discrepancy = -1
    rom = 0
    while True:
        if not network.reset():
            break
        last_zero = -1
        for bit in range(OneWireNetwork.ID_BITS):
            id_bit, cmp_bit = network.read_pair(bit)
            if id_bit and cmp_bit:
                # 応答なし
                return sorted(found)
            if id_bit != cmp_bit:
                direction = id_bit
            elif bit < last_discrepancy:
                direction = (rom >> bit) & 1
            elif bit == last_discrepancy:
                direction = 1
            else:
                direction = 0
            if id_bit == cmp_bit and direction == 0:
                last_zero = bit
            rom = (rom & ~(1 << bit)) | (direction << bit)
            network.write_direction(bit, direction)
        found.append(rom)
        last_discrepancy = last_zero
        if last_discrepancy < 0:
            break
    logger.debug("1-Wire search: %d devices, %d bit queries", len(found), network.queries)
    return sorted(found)


# --- NMEA ---

@dataclass(frozen=True)
class RmcFix:
    timestamp: float
    latitude: Optional[float]
    longitude: Optional[float]
    valid: bool


def nmea_checksum(body: str) -> int:
    checksum = 0
    for char in body:
        checksum ^= ord(char)
    return checksum


def build_rmc(timestamp: float, latitude: float, longitude: float, valid: bool = True,
              talker: str = "GP") -> str:
    """RMC センテンスを作る（受信機シミュレーション用）"""
    when = datetime.fromtimestamp(timestamp, tz=timezone.utc)
    centis = int(round(when.microsecond / 10000.0))
    if centis == 100:
        centis = 99
    lat_deg = int(abs(latitude))
    lat_min = (abs(latitude) - lat_deg) * 60.0
    lon_deg = int(abs(longitude))
    lon_min = (abs(longitude) - lon_deg) * 60.0
    body = ",".join([
        f"{talker}RMC",
        f"{when:%H%M%S}.{centis:02d}",
        "A" if valid else "V",
        f"{lat_deg:02d}{lat_min:09.6f}", "N" if latitude >= 0 else "S",
        f"{lon_deg:03d}{lon_min:09.6f}", "E" if longitude >= 0 else "W",
        "0.0", "0.0",
        f"{when:%d%m%y}",
        "", "", "A",
    ])
    return f"${body}*{nmea_checksum(body):02X}"


_COORD = re.compile(r"^(\d+)(\d\d\.\d+|\d\d)$")


def _ddmm_to_degrees(value: str, hemisphere: str, positive: str, negative: str) -> Optional[float]:
    if not value and not hemisphere:
        return None
    match = _COORD.match(value)
    if not match or hemisphere not in (positive, negative):
        raise MalformedField(f"bad coordinate {value!r},{hemisphere!r}")
    degrees = int(match.group(1)) + float(match.group(2)) / 60.0
    return -degrees if hemisphere == negative else degrees


def parse_nmea_rmc(sentence: str) -> RmcFix:
    sentence = sentence.strip()
    star = sentence.rfind("*")
    if not sentence.startswith("$") or star < 0 or len(sentence) != star + 3:
        raise MalformedField("sentence must look like $...*HH")
    body = sentence[1:star]
    try:
        transmitted = int(sentence[star + 1:], 16)
    except ValueError:
        raise MalformedField("checksum is not hex") from None
    if nmea_checksum(body) != transmitted:
        raise BadChecksum(f"checksum {transmitted:02X} != {nmea_checksum(body):02X}")

    fields = body.split(",")
    if len(fields[0]) != 5 or not fields[0].endswith("RMC"):
        raise UnsupportedSentenceType(fields[0])
    if len(fields) < 10:
        raise MalformedField("RMC sentence has too few fields")
    time_field, status, lat, lat_h, lon, lon_h = fields[1:7]
    date_field = fields[9]
    try:
        hh, mm = int(time_field[0:2]), int(time_field[2:4])
        seconds = float(time_field[4:])
        dd, mo, yy = int(date_field[0:2]), int(date_field[2:4]), int(date_field[4:6])
        base = datetime(2000 + yy if yy < 80 else 1900 + yy, mo, dd, hh, mm, tzinfo=timezone.utc)
    except (ValueError, IndexError):
        raise MalformedField(f"bad time/date {time_field!r} {date_field!r}") from None
    if status not in ("A", "V"):
        raise MalformedField(f"bad status {status!r}")
    return RmcFix(
        timestamp=base.timestamp() + seconds,
        latitude=_ddmm_to_degrees(lat, lat_h, "N", "S"),
        longitude=_ddmm_to_degrees(lon, lon_h, "E", "W"),
        valid=status == "A",
    )


def average_position(fixes: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    if len(fixes) == 0:
        raise EmptyInput("no fixes to average")
    mean = np.mean(np.asarray(fixes, dtype=float), axis=0)
    return float(mean[0]), float(mean[1])


# --- その他の換算 ---

def humidity_from_voltage(volts: float) -> float:
    """CHM-02: 0.3-2.7 V が 10-95 %RH に線形対応"""
    percent = 10.0 + (volts - 0.3) * (95.0 - 10.0) / (2.7 - 0.3)
    return min(max(percent, 10.0), 95.0)


def rainfall_mm(tips: int, mm_per_tip: float = 0.3) -> float:
    return tips * mm_per_tip


def rain_heater_on(external_temperature: float) -> bool:
    return external_temperature < 0.0
