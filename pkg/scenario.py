"""
シナリオ設定（JSON）の読み込みと検証
書式は SCENARIO_GUIDE.md を参照
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from bus import BusConfig
from filters import FilterError, make_filter
from messages import BROADCAST_TARGET, Opcode
from nodes import DEVICE_CODES, FLASH_SIZE, Behavior, HBridgeCommand
from power import PowerConfig, PowerError
from sensors import BiasCalibration, SensorError, SensorKind
from sources import SOURCE_TYPES, World

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    def __init__(self, message: str, field_path: str = "", line: Optional[int] = None,
                 column: Optional[int] = None):
        where = field_path
        if line is not None:
            where = f"line {line}, column {column}"
        super().__init__(f"{where}: {message}" if where else message)
        self.field = field_path
        self.line = line
        self.column = column


class FaultKind(Enum):
    KILL_NODE = "KillNode"
    RESTORE_NODE = "RestoreNode"
    CORRUPT_UPLOAD_BYTE = "CorruptUploadByte"
    FAIL_MAIN_MODEM = "FailMainModem"
    SD_FULL = "SdFull"
    BATTERY_DRAIN = "BatteryDrain"


TARGETED_FAULTS = (FaultKind.KILL_NODE, FaultKind.RESTORE_NODE, FaultKind.SD_FULL)

ACTIONS = ("command", "failover", "reflash", "activate_backup", "capture_image", "drive",
           "upload")
BROADCAST_ACTIONS = ("command", "capture_image")


@dataclass(frozen=True)
class Fault:
    time_us: int
    kind: FaultKind
    target: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ScriptedAction:
    """運用者の操作（アクティブモード）"""
    time_us: int
    action: str
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SensorSpec:
    name: str
    kind: SensorKind
    period_us: Optional[int]
    channel: int = 0
    source: Dict[str, Any] = field(default_factory=dict)
    filter: Optional[Dict[str, Any]] = None


@dataclass
class ThermalSpec:
    device: str
    band: Tuple[float, float]
    period_us: int
    source: Dict[str, Any]


@dataclass
class NodeSpec:
    node_id: int
    name: str
    behavior: Behavior
    version: int = 1
    sd_capacity: Optional[int] = None
    clock_error_us: int = 0
    load_w: float = 0.5
    sensors: List[SensorSpec] = field(default_factory=list)
    devices: List[str] = field(default_factory=list)
    actuator: Optional[Dict[str, float]] = None
    thermal: List[ThermalSpec] = field(default_factory=list)
    gps: Optional[Dict[str, Any]] = None


@dataclass
class UplinkSpec:
    bandwidth: float = 2000.0
    latency_us: int = 500_000
    upload_interval_us: Optional[int] = None
    gateway: str = "embedded"
    sms_segment_size: int = 140
    sms_latency_us: int = 5_000_000


@dataclass
class PowerSpec:
    config: PowerConfig
    battery_logic: float = 12.7
    battery_power: float = 12.7
    tick_us: int = 1_000_000
    solar_schedule: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class Scenario:
    duration_us: int
    seed: int = 0
    nodes: List[NodeSpec] = field(default_factory=list)
    faults: List[Fault] = field(default_factory=list)
    actions: List[ScriptedAction] = field(default_factory=list)
    calibration: Optional[BiasCalibration] = None
    wind_table: Optional[List[Tuple[float, float]]] = None
    uplink: UplinkSpec = field(default_factory=UplinkSpec)
    power: Optional[PowerSpec] = None
    bus: BusConfig = field(default_factory=BusConfig)
    world: Dict[str, float] = field(default_factory=dict)

    def node(self, node_id: int) -> NodeSpec:
        for spec in self.nodes:
            if spec.node_id == node_id:
                return spec
        raise KeyError(node_id)


# --- 検証ヘルパー ---

def _us(value, path: str, allow_zero: bool = False) -> int:
    seconds = _number(value, path)
    if seconds < 0 or (seconds == 0 and not allow_zero):
        raise ConfigError("must be a positive number of seconds", path)
    return int(round(seconds * 1_000_000))


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    return float(value)


def _int(value, path: str, lo: Optional[int] = None, hi: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ConfigError(f"{value} outside [{lo}, {hi}]", path)
    return value


def _object(value, path: str) -> Dict:
    if not isinstance(value, dict):
        raise ConfigError("expected an object", path)
    return value


def _list(value, path: str) -> List:
    if not isinstance(value, list):
        raise ConfigError("expected a list", path)
    return value


def _vector(value, path: str) -> Tuple[float, float, float]:
    items = _list(value, path)
    if len(items) != 3:
        raise ConfigError("expected 3 numbers", path)
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(items))


def _table(value, path: str) -> List[Tuple[float, float]]:
    rows = []
    for i, row in enumerate(_list(value, path)):
        row = _list(row, f"{path}[{i}]")
        if len(row) != 2:
            raise ConfigError("expected [x, y]", f"{path}[{i}]")
        rows.append((_number(row[0], f"{path}[{i}][0]"), _number(row[1], f"{path}[{i}][1]")))
    return rows


# --- 各セクション ---

def _check_onewire(source: Dict, path: str):
    """channel は ROM search で見つかる台数より小さいこと"""
    devices = set()
    for i, device in enumerate(_list(source.get("devices"), f"{path}.devices")):
        if isinstance(device, str):
            try:
                device = int(device, 16)
            except ValueError:
                raise ConfigError(f"bad ROM id {device!r}", f"{path}.devices[{i}]") from None
        devices.add(_int(device, f"{path}.devices[{i}]", 0))
    channel = _int(source.get("channel", 0), f"{path}.channel", 0)
    if channel >= len(devices):
        raise ConfigError(f"channel {channel} but only {len(devices)} devices on the network",
                          f"{path}.channel")


def _parse_sensor(data, path: str) -> SensorSpec:
    data = _object(data, path)
    kind_name = data.get("kind")
    try:
        kind = SensorKind.from_name(kind_name)
    except (KeyError, AttributeError, SensorError):
        raise ConfigError(f"unknown sensor kind {kind_name!r}", f"{path}.kind") from None
    name = data.get("name", kind.name.lower())
    period = data.get("period")
    source = _object(data.get("source", {}), f"{path}.source")
    source_type = source.get("type", "constant")
    if source_type not in SOURCE_TYPES:
        raise ConfigError(f"unknown source type {source_type!r}", f"{path}.source.type")
    if source_type == "onewire":
        _check_onewire(source, f"{path}.source")
    filter_config = data.get("filter")
    if filter_config is not None:
        try:
            make_filter(_object(filter_config, f"{path}.filter"), kind.vector)
        except FilterError as e:
            raise ConfigError(str(e), f"{path}.filter") from None
    return SensorSpec(str(name), kind,
                      _us(period, f"{path}.period") if period is not None else None,
                      _int(data.get("channel", 0), f"{path}.channel", 0, 255), source,
                      filter_config)


def _parse_node(data, path: str) -> NodeSpec:
    data = _object(data, path)
    if "id" not in data:
        raise ConfigError("missing", f"{path}.id")
    node_id = _int(data["id"], f"{path}.id", 1, 254)
    try:
        behavior = Behavior.from_name(str(data.get("behavior", "")))
    except KeyError:
        raise ConfigError(f"unknown behavior {data.get('behavior')!r}", f"{path}.behavior") from None
    sd = data.get("sd_capacity")
    spec = NodeSpec(
        node_id=node_id,
        name=str(data.get("name", f"node{node_id}")),
        behavior=behavior,
        version=_int(data.get("version", 1), f"{path}.version", 0, 255),
        sd_capacity=_int(sd, f"{path}.sd_capacity", 1) if sd is not None else None,
        clock_error_us=int(round(_number(data.get("clock_error", 0), f"{path}.clock_error") * 1e6)),
        load_w=_number(data.get("load_w", 0.5), f"{path}.load_w"),
    )
    if behavior in (Behavior.LOGGER, Behavior.CAMERA, Behavior.UPLINK) and spec.sd_capacity is None:
        spec.sd_capacity = 4 * 1024 * 1024
    for i, sensor in enumerate(_list(data.get("sensors", []), f"{path}.sensors")):
        spec.sensors.append(_parse_sensor(sensor, f"{path}.sensors[{i}]"))
    names = [s.name for s in spec.sensors]
    if len(set(names)) != len(names):
        raise ConfigError("sensor names must be unique", f"{path}.sensors")
    for i, device in enumerate(_list(data.get("devices", []), f"{path}.devices")):
        if device not in DEVICE_CODES:
            raise ConfigError(f"unknown device {device!r}", f"{path}.devices[{i}]")
        spec.devices.append(device)
    if "actuator" in data:
        actuator = _object(data["actuator"], f"{path}.actuator")
        spec.actuator = {"rate": _number(actuator.get("rate", 10.0), f"{path}.actuator.rate"),
                         "angle": _number(actuator.get("angle", 0.0), f"{path}.actuator.angle")}
        if "linear_actuator" not in spec.devices:
            spec.devices.append("linear_actuator")
    for i, loop in enumerate(_list(data.get("thermal", []), f"{path}.thermal")):
        loop_path = f"{path}.thermal[{i}]"
        loop = _object(loop, loop_path)
        device = loop.get("device")
        if device not in spec.devices:
            raise ConfigError(f"device {device!r} is not listed in devices", f"{loop_path}.device")
        band = _list(loop.get("band"), f"{loop_path}.band")
        if len(band) != 2 or not _number(band[0], f"{loop_path}.band[0]") < _number(band[1], f"{loop_path}.band[1]"):
            raise ConfigError("band must be [lo, hi] with lo < hi", f"{loop_path}.band")
        spec.thermal.append(ThermalSpec(device, (float(band[0]), float(band[1])),
                                        _us(loop.get("period", 10), f"{loop_path}.period"),
                                        _object(loop.get("source", {}), f"{loop_path}.source")))
    if "gps" in data:
        spec.gps = _object(data["gps"], f"{path}.gps")
    return spec


def _resolve_target(value, nodes: Dict, by_name: Dict, path: str) -> int:
    if isinstance(value, str) and value in by_name:
        return by_name[value]
    if isinstance(value, int) and not isinstance(value, bool) and value in nodes:
        return value
    raise ConfigError(f"target {value!r} is not a node in this scenario", path)


def _parse_fault(data, path: str, duration_us: int, nodes: Dict, by_name: Dict) -> Fault:
    data = _object(data, path)
    try:
        kind = FaultKind(data.get("kind"))
    except ValueError:
        raise ConfigError(f"unknown fault kind {data.get('kind')!r}", f"{path}.kind") from None
    time_us = _us(data.get("time"), f"{path}.time", allow_zero=True)
    if time_us > duration_us:
        raise ConfigError("fault time is after the end of the run", f"{path}.time")
    target = None
    if kind in TARGETED_FAULTS:
        target = _resolve_target(data.get("target"), nodes, by_name, f"{path}.target")
    params = {k: v for k, v in data.items() if k not in ("kind", "time", "target")}
    if kind is FaultKind.SD_FULL and nodes[target].sd_capacity is None:
        raise ConfigError("target node has no SD card", f"{path}.target")
    if kind is FaultKind.CORRUPT_UPLOAD_BYTE:
        params["offset"] = _int(params.get("offset", 0), f"{path}.offset", 0)
    if kind is FaultKind.FAIL_MAIN_MODEM:
        if "recover_after" in params:
            params["recover_after_us"] = _us(params.pop("recover_after"), f"{path}.recover_after")
        if "mid_transfer_fraction" in params:
            fraction = _number(params["mid_transfer_fraction"], f"{path}.mid_transfer_fraction")
            if not 0.0 <= fraction <= 1.0:
                raise ConfigError("must be within [0, 1]", f"{path}.mid_transfer_fraction")
    if kind is FaultKind.BATTERY_DRAIN:
        params["watts"] = _number(params.get("watts", 0.0), f"{path}.watts")
        params["duration_us"] = _us(params.pop("duration", 1), f"{path}.duration")
        rail = params.setdefault("rail", "logic")
        if rail not in ("logic", "power"):
            raise ConfigError(f"unknown rail {rail!r}", f"{path}.rail")
    if kind is FaultKind.SD_FULL:
        params["remaining"] = _int(params.get("remaining", 0), f"{path}.remaining", 0)
    return Fault(time_us, kind, target, params)


def _parse_action(data, path: str, duration_us: int, nodes: Dict, by_name: Dict) -> ScriptedAction:
    data = _object(data, path)
    action = data.get("action")
    if action not in ACTIONS:
        raise ConfigError(f"unknown action {action!r}", f"{path}.action")
    time_us = _us(data.get("time"), f"{path}.time", allow_zero=True)
    if time_us > duration_us:
        raise ConfigError("action time is after the end of the run", f"{path}.time")
    params = {k: v for k, v in data.items() if k not in ("action", "time")}
    for key in ("target", "dead", "camera"):
        if key not in params:
            continue
        if key == "target" and params[key] == "all":
            if action not in BROADCAST_ACTIONS:
                raise ConfigError(f"{action} cannot target every node", f"{path}.target")
            params[key] = BROADCAST_TARGET
        else:
            params[key] = _resolve_target(params[key], nodes, by_name, f"{path}.{key}")
    if action == "command":
        try:
            params["opcode"] = Opcode[str(params.get("opcode", "")).upper()]
        except KeyError:
            raise ConfigError(f"unknown opcode {params.get('opcode')!r}", f"{path}.opcode") from None
        params["args"] = bytes(_int(b, f"{path}.args[{i}]", 0, 255)
                               for i, b in enumerate(_list(params.get("args", []), f"{path}.args")))
        if len(params["args"]) > 6:
            raise ConfigError("at most 6 argument bytes", f"{path}.args")
    if action == "drive":
        if params.get("device") not in DEVICE_CODES:
            raise ConfigError(f"unknown device {params.get('device')!r}", f"{path}.device")
        try:
            params["command"] = HBridgeCommand[str(params.get("command", "")).upper()]
        except KeyError:
            raise ConfigError(f"unknown drive command {params.get('command')!r}",
                              f"{path}.command") from None
    if action == "failover":
        for key in ("dead", "camera"):
            if key not in params:
                raise ConfigError("missing", f"{path}.{key}")
    if action == "reflash":
        if "target" not in params:
            raise ConfigError("missing", f"{path}.target")
        try:
            params["behavior"] = Behavior.from_name(str(params.get("behavior", "")))
        except KeyError:
            raise ConfigError(f"unknown behavior {params.get('behavior')!r}",
                              f"{path}.behavior") from None
        params["version"] = _int(params.get("version", 2), f"{path}.version", 0, 255)
        params["size"] = _int(params.get("size", 4096), f"{path}.size", 1)
        if params["size"] > FLASH_SIZE and not params.get("allow_oversize"):
            raise ConfigError(f"image larger than {FLASH_SIZE} bytes of flash", f"{path}.size")
    if action == "capture_image" and "target" not in params:
        raise ConfigError("missing", f"{path}.target")
    return ScriptedAction(time_us, action, params)


def parse_scenario(data: Dict) -> Scenario:
    data = _object(data, "")
    if "duration" not in data:
        raise ConfigError("missing", "duration")
    duration_us = _us(data["duration"], "duration")
    scenario = Scenario(duration_us=duration_us,
                        seed=_int(data.get("seed", 0), "seed", 0))

    nodes: Dict[int, NodeSpec] = {}
    for i, node in enumerate(_list(data.get("nodes", []), "nodes")):
        spec = _parse_node(node, f"nodes[{i}]")
        if spec.node_id in nodes:
            raise ConfigError(f"duplicate node id {spec.node_id}", f"nodes[{i}].id")
        nodes[spec.node_id] = spec
        scenario.nodes.append(spec)
    if not scenario.nodes:
        raise ConfigError("a scenario needs at least one node", "nodes")
    by_name = {spec.name: spec.node_id for spec in scenario.nodes}
    if len(by_name) != len(scenario.nodes):
        raise ConfigError("node names must be unique", "nodes")

    if "calibration" in data:
        cal = _object(data["calibration"], "calibration")
        try:
            scenario.calibration = BiasCalibration(
                _vector(cal.get("bias_raised"), "calibration.bias_raised"),
                _vector(cal.get("bias_lowered"), "calibration.bias_lowered"),
                _vector(cal.get("reference_free_field"), "calibration.reference_free_field"))
        except SensorError as e:
            raise ConfigError(str(e), "calibration") from None
    if "wind_table" in data:
        scenario.wind_table = _table(data["wind_table"], "wind_table")

    uplink = _object(data.get("uplink", {}), "uplink")
    interval = uplink.get("upload_interval")
    scenario.uplink = UplinkSpec(
        bandwidth=_number(uplink.get("bandwidth", 2000.0), "uplink.bandwidth"),
        latency_us=_us(uplink.get("latency", 0.5), "uplink.latency", allow_zero=True),
        upload_interval_us=_us(interval, "uplink.upload_interval") if interval is not None else None,
        gateway=str(uplink.get("gateway", "embedded")),
        sms_segment_size=_int(uplink.get("sms_segment_size", 140), "uplink.sms_segment_size", 1),
        sms_latency_us=_us(uplink.get("sms_latency", 5), "uplink.sms_latency", allow_zero=True),
    )
    if scenario.uplink.bandwidth <= 0:
        raise ConfigError("must be positive", "uplink.bandwidth")

    if "power" in data:
        power = _object(data["power"], "power")
        try:
            config = PowerConfig(
                capacity_ah=_number(power.get("capacity_ah", 54.0), "power.capacity_ah"),
                solar_w=_number(power.get("solar_w", 10.0), "power.solar_w"),
                bridge_resistance=_number(power.get("bridge_resistance", 0.1),
                                          "power.bridge_resistance"),
                solar_share_logic=_number(power.get("solar_share_logic", 0.5),
                                          "power.solar_share_logic"))
        except PowerError as e:
            raise ConfigError(str(e), "power") from None
        scenario.power = PowerSpec(
            config,
            _number(power.get("battery_logic", 12.7), "power.battery_logic"),
            _number(power.get("battery_power", 12.7), "power.battery_power"),
            _us(power.get("tick", 1.0), "power.tick"),
            _table(power.get("solar_schedule", []), "power.solar_schedule"))

    if "bus" in data:
        bus = _object(data["bus"], "bus")
        bitrate = _int(bus.get("bitrate", 125000), "bus.bitrate", 1)
        scenario.bus = BusConfig(bitrate, _int(bus.get("frame_overhead_bits", 47),
                                               "bus.frame_overhead_bits", 0))

    world = _object(data.get("world", {}), "world")
    known = World.__dataclass_fields__
    for key, value in world.items():
        if key not in known or key == "arm":
            raise ConfigError("unknown world field", f"world.{key}")
        scenario.world[key] = int(value) if key in ("epoch_us", "now_us") else _number(value, f"world.{key}")

    for i, fault in enumerate(_list(data.get("faults", []), "faults")):
        scenario.faults.append(_parse_fault(fault, f"faults[{i}]", duration_us, nodes, by_name))
    for i, action in enumerate(_list(data.get("actions", []), "actions")):
        scenario.actions.append(_parse_action(action, f"actions[{i}]", duration_us, nodes, by_name))
    return scenario


def load_scenario(source: Union[str, Path, Dict]) -> Scenario:
    """ファイルパス・JSON 文字列・dict のどれでも受け付ける"""
    if isinstance(source, dict):
        return parse_scenario(source)
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    else:
        text = Path(source).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno, column=e.colno) from None
    scenario = parse_scenario(data)
    logger.debug("scenario loaded: %d nodes, %d faults, %d actions", len(scenario.nodes),
                 len(scenario.faults), len(scenario.actions))
    return scenario
