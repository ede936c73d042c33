"""
シミュレーション用の周辺機器
生の信号（エコー時間・電圧・セグメント・NMEA など）を作って sensors の処理に通す
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sensors import (BiasCalibration, OneWireNetwork, SensorError, SensorKind, Vector, build_rmc,
                     decode_segments, encode_segments, humidity_from_voltage,
                     onewire_search, parse_nmea_rmc, speed_of_sound, ultrasonic_distance,
                     wind_deflection, wind_speed)

logger = logging.getLogger(__name__)


class SourceError(SensorError):
    """周辺機器設定エラー"""


@dataclass
class World:
    """ロボットの周囲と内部の真値"""
    epoch_us: int = 1_577_836_800_000_000  # 2020-01-01T00:00:00Z
    now_us: int = 0
    ambient_temperature: float = 20.0
    heading: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    field_horizontal: float = 20.0
    field_vertical: float = 40.0
    wind: float = 3.0
    latitude: float = 0.0
    longitude: float = 0.0
    logic_v: float = 12.7
    power_v: float = 12.7
    static_arm_angle: float = 0.0
    arm: Optional[object] = None  # angle_at(now_us) を持つアクチュエータ

    @property
    def unix_seconds(self) -> float:
        return (self.epoch_us + self.now_us) / 1e6

    @property
    def arm_angle(self) -> float:
        if self.arm is not None:
            return self.arm.angle_at(self.now_us)
        return self.static_arm_angle


# --- 姿勢モデル ---

def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def body_gravity(pitch: float, roll: float) -> Vector:
    g = _rx(math.radians(roll)) @ _ry(math.radians(pitch)) @ np.array([0.0, 0.0, 1.0])
    return tuple(float(v) for v in g)


def body_field(heading: float, pitch: float, roll: float,
               horizontal: float, vertical: float) -> Vector:
    """地磁気 (北向き水平成分, 鉛直成分) をセンサー座標へ"""
    rotation = _rx(math.radians(roll)) @ _ry(math.radians(pitch)) @ _rz(math.radians(heading))
    b = rotation @ np.array([horizontal, 0.0, vertical])
    return tuple(float(v) for v in b)


# --- ソース ---

class Source:
    kind: Optional[SensorKind] = None

    def sample(self, world: World):
        raise NotImplementedError


class ConstantSource(Source):
    def __init__(self, value):
        self.value = tuple(value) if isinstance(value, (list, tuple)) else float(value)

    def sample(self, world: World):
        return self.value


class SineSource(Source):
    def __init__(self, mean: float, amplitude: float = 0.0, period: float = 3600.0,
                 noise: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.mean = mean
        self.amplitude = amplitude
        self.period = period
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> float:
        t = world.now_us / 1e6
        value = self.mean + self.amplitude * math.sin(2 * math.pi * t / self.period)
        if self.noise:
            value += float(self.rng.normal(0.0, self.noise))
        return value


class TemperatureNetworkSource(Source):
    """1-Wire 温度センサー網: 起動時に ROM search で列挙、channel 番目を読む"""

    def __init__(self, device_ids: Sequence[int], offsets: Sequence[float] = (),
                 channel: int = 0, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        self.network = OneWireNetwork(device_ids)
        self.offsets = dict(zip(sorted(device_ids), offsets))
        self.channel = channel
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)
        self.devices: Optional[List[int]] = None

    def sample(self, world: World) -> float:
        if self.devices is None:
            self.devices = onewire_search(self.network)
            logger.info("1-Wire: %d temperature sensors found with %d bit queries",
                        len(self.devices), self.network.queries)
        if self.channel >= len(self.devices):
            raise SourceError(f"temperature channel {self.channel} not on the network")
        device = self.devices[self.channel]
        value = world.ambient_temperature + self.offsets.get(device, 0.0)
        if self.noise:
            value += float(self.rng.normal(0.0, self.noise))
        return value


class UltrasonicSource(Source):
    """エコー時間を作って温度補正した距離に戻す"""

    def __init__(self, distance: float, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        self.distance = distance
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> float:
        distance = self.distance
        if self.noise:
            distance += float(self.rng.normal(0.0, self.noise))
        echo = max(0.0, 2.0 * distance / speed_of_sound(world.ambient_temperature))
        return ultrasonic_distance(echo, world.ambient_temperature)


class WindSource(Source):
    """しなる棒の加速度計: 風によるたわみ + 本体の傾き分"""

    def __init__(self, table: Sequence[Tuple[float, float]], counts_per_g: float = 256.0,
                 noise: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.table = [tuple(p) for p in table]
        self.counts_per_g = counts_per_g
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> float:
        tilt = self.counts_per_g * math.sin(math.radians(world.pitch))
        deflection = wind_deflection(world.wind, self.table) + tilt
        if self.noise:
            deflection += float(self.rng.normal(0.0, self.noise))
        return wind_speed(deflection, tilt, self.table)


class IrThermometerSource(Source):
    """赤外線温度計の LCD 信号を読み取る"""

    def __init__(self, offset: float = 0.0, digits: int = 4, decimals: int = 1):
        self.offset = offset
        self.digits = digits
        self.decimals = decimals

    def sample(self, world: World) -> float:
        shown = f"{world.ambient_temperature + self.offset:.{self.decimals}f}"
        masks, points = encode_segments(shown, self.digits)
        return decode_segments(masks, points)


class HumiditySource(Source):
    def __init__(self, percent: float, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        self.percent = percent
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> float:
        percent = self.percent
        if self.noise:
            percent += float(self.rng.normal(0.0, self.noise))
        volts = 0.3 + (percent - 10.0) * (2.7 - 0.3) / (95.0 - 10.0)
        return humidity_from_voltage(volts)


class RainSource(Source):
    """転倒ます雨量計（サンプル間のチップ数）"""

    def __init__(self, tips_per_hour: float, period: float,
                 rng: Optional[np.random.Generator] = None):
        self.tips_per_hour = tips_per_hour
        self.period = period
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> float:
        return float(self.rng.poisson(self.tips_per_hour * self.period / 3600.0))


class AccelSource(Source):
    def __init__(self, noise: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> Vector:
        g = np.asarray(body_gravity(world.pitch, world.roll))
        if self.noise:
            g = g + self.rng.normal(0.0, self.noise, 3)
        return tuple(float(v) for v in g)


class MagSource(Source):
    """地磁気 + アーム位置で変わるソフトアイアンのバイアス"""

    def __init__(self, calibration: Optional[BiasCalibration] = None, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        self.calibration = calibration
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> Vector:
        b = np.asarray(body_field(world.heading, world.pitch, world.roll,
                                  world.field_horizontal, world.field_vertical))
        if self.calibration is not None:
            b = b + self.calibration.bias_at(world.arm_angle)
        if self.noise:
            b = b + self.rng.normal(0.0, self.noise, 3)
        return tuple(float(v) for v in b)


class GyroSource(Source):
    def __init__(self, noise: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)

    def sample(self, world: World) -> Vector:
        if not self.noise:
            return (0.0, 0.0, 0.0)
        return tuple(float(v) for v in self.rng.normal(0.0, self.noise, 3))


class BatterySource(Source):
    def __init__(self, rail: str = "logic"):
        if rail not in ("logic", "power"):
            raise SourceError(f"unknown battery rail {rail!r}")
        self.rail = rail

    def sample(self, world: World) -> float:
        return world.logic_v if self.rail == "logic" else world.power_v


class ArmAngleSource(Source):
    """アクチュエータ内蔵のポテンショメータ"""

    def sample(self, world: World) -> float:
        return min(90.0, max(0.0, world.arm_angle))


class GpsSource(Source):
    """9600 baud の RMC センテンスを作ってパースする受信機"""

    def __init__(self, noise_deg: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.noise_deg = noise_deg
        self.rng = rng or np.random.default_rng(0)

    def sentence(self, world: World) -> str:
        lat, lon = world.latitude, world.longitude
        if self.noise_deg:
            lat += float(self.rng.normal(0.0, self.noise_deg))
            lon += float(self.rng.normal(0.0, self.noise_deg))
        return build_rmc(world.unix_seconds, lat, lon)

    def sample(self, world: World) -> Tuple[float, float]:
        fix = parse_nmea_rmc(self.sentence(world))
        return fix.latitude, fix.longitude


def _table(config: Dict, key: str, default=None):
    value = config.get(key, default)
    if value is None:
        raise SourceError(f"source needs {key!r}")
    return value


def build_source(config: Dict, kind: SensorKind, rng: np.random.Generator,
                 calibration: Optional[BiasCalibration] = None,
                 wind_table: Optional[Sequence] = None, period: float = 1.0) -> Source:
    """シナリオの source 項目から周辺機器を作る"""
    source_type = config.get("type", "constant")
    noise = float(config.get("noise", 0.0))
    if source_type == "constant":
        default = (0.0, 0.0, 0.0) if kind.vector else (0.0, 0.0) if kind is SensorKind.POSITION else 0.0
        return ConstantSource(config.get("value", default))
    if source_type == "sine":
        return SineSource(float(config.get("mean", 0.0)), float(config.get("amplitude", 0.0)),
                          float(config.get("period", 3600.0)), noise, rng)
    if source_type == "onewire":
        return TemperatureNetworkSource([int(d, 16) if isinstance(d, str) else int(d)
                                         for d in _table(config, "devices")],
                                        config.get("offsets", ()), int(config.get("channel", 0)),
                                        noise, rng)
    if source_type == "ultrasonic":
        return UltrasonicSource(float(config.get("distance", 1.0)), noise, rng)
    if source_type == "wind":
        table = config.get("table") or wind_table
        if not table:
            raise SourceError("wind source needs a calibration table")
        return WindSource(table, float(config.get("counts_per_g", 256.0)), noise, rng)
    if source_type == "ir_display":
        return IrThermometerSource(float(config.get("offset", 0.0)), int(config.get("digits", 4)))
    if source_type == "humidity":
        return HumiditySource(float(config.get("percent", 50.0)), noise, rng)
    if source_type == "rain":
        return RainSource(float(config.get("tips_per_hour", 0.0)), period, rng)
    if source_type == "accel":
        return AccelSource(noise, rng)
    if source_type == "mag":
        return MagSource(calibration, noise, rng)
    if source_type == "gyro":
        return GyroSource(noise, rng)
    if source_type == "battery":
        return BatterySource(config.get("rail", "logic"))
    if source_type == "arm":
        return ArmAngleSource()
    if source_type == "gps":
        return GpsSource(float(config.get("noise_deg", 0.0)), rng)
    raise SourceError(f"unknown source type {source_type!r}")


SOURCE_TYPES = ("constant", "sine", "onewire", "ultrasonic", "wind", "ir_display", "humidity",
                "rain", "accel", "mag", "gyro", "battery", "arm", "gps")
