"""
ノードの状態機械
各ノードは周辺機器に合わせたイベントループを持ち、ファームウェアの behavior で動作が決まる
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Dict, Iterator, List, Optional, Protocol, Tuple

import numpy as np

from bus import BusEvent, Frame, FrameId, NodeId
from filters import PassThrough
from messages import (CTS, COMMAND, POWER_ALARM, TIMESTAMP, Command, MsgType, Opcode,
                      TransportKind, command_frame, cts_frame, is_file_transfer, pack_id,
                      parse_command, parse_cts, parse_reflash_announce, parse_timestamp,
                      parse_transport_id, reading_frame, reflash_announce_args,
                      sd_alarm_frame, timestamp_frame, unpack_id)
from sensors import (SensorError, SensorKind, SensorReading, average_position,
                     parse_nmea_rmc)
from sources import World
from transport import (CTS_TIMEOUT_US, CtsStream, CtsTimeout, CtsToken, Reassembler,
                       TransportError, TransportMessage, crc16, fragment, stream_with_cts)

logger = logging.getLogger(__name__)

FLASH_SIZE = 8192
REFLASH_CHUNK = 64
CLOCK_TOLERANCE_US = 1_000_000


class NodeError(Exception):
    """ノード関連エラーの基底クラス"""


class UnknownSensor(NodeError):
    pass


class UnknownDevice(NodeError):
    pass


class InvalidBand(NodeError):
    pass


class InvalidMode(NodeError):
    pass


class ImageTooLarge(NodeError):
    pass


class CrcMismatch(NodeError):
    pass


class ChunkGap(NodeError):
    pass


class SdFull(NodeError):
    pass


class FailoverRejected(NodeError):
    pass


class ReflashFailed(NodeError):
    def __init__(self, reason: Exception):
        super().__init__(f"reflash failed: {reason}")
        self.reason = reason


class NodeMode(IntEnum):
    NORMAL = 0
    REFLASH_LOOP = 1
    HIBERNATE = 2
    DEAD = 3


class Behavior(IntEnum):
    SENSOR_SUITE = 1
    LOGGER = 2
    CAMERA = 3
    UPLINK = 4
    SMS_BRIDGE = 5
    GPS = 6
    OUTPUT = 7

    @classmethod
    def from_name(cls, name: str) -> "Behavior":
        return cls[name.upper()]


# --- ファームウェアと SD カード ---

@dataclass(frozen=True)
class FirmwareImage:
    data: bytes
    version: int
    behavior: Behavior
    crc: Optional[int] = None

    def __post_init__(self):
        if len(self.data) > FLASH_SIZE:
            raise ImageTooLarge(f"image is {len(self.data)} bytes, flash holds {FLASH_SIZE}")
        if self.crc is None:
            object.__setattr__(self, "crc", crc16(self.data))

    def verify(self) -> bool:
        return crc16(self.data) == self.crc

    @classmethod
    def build(cls, behavior: Behavior, version: int, size: int = 4096,
              seed: int = 0) -> "FirmwareImage":
        """シミュレーション用の不透明なイメージ"""
        rng = np.random.default_rng([seed, int(behavior), version])
        return cls(rng.integers(0, 256, size, dtype=np.uint8).tobytes(), version, behavior)


class SdCard:
    def __init__(self, capacity: int):
        if capacity <= 0:
            raise NodeError("SD capacity must be positive")
        self.capacity = capacity
        self.files: Dict[str, bytearray] = {}

    @property
    def used(self) -> int:
        return sum(len(data) for data in self.files.values())

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def write(self, name: str, data: bytes):
        old = len(self.files.get(name, b""))
        if len(data) - old > self.free:
            raise SdFull(f"{name}: {len(data)} bytes do not fit ({self.free} free)")
        self.files[name] = bytearray(data)

    def append(self, name: str, data: bytes):
        if len(data) > self.free:
            raise SdFull(f"{name}: {len(data)} bytes do not fit ({self.free} free)")
        self.files.setdefault(name, bytearray()).extend(data)

    def read(self, name: str) -> bytes:
        return bytes(self.files[name])

    def delete(self, name: str):
        del self.files[name]

    def names(self, prefix: str = "") -> List[str]:
        return sorted(name for name in self.files if name.startswith(prefix))

    def fill(self, remaining: int):
        """空き容量を remaining バイトまで埋める（障害注入用）"""
        padding = self.free - max(0, remaining)
        if padding > 0:
            self.files.setdefault("FILLER.BIN", bytearray()).extend(bytes(padding))


# --- ログレコード ---

LOG_HEADER = struct.Struct("<QBIB")


@dataclass(frozen=True)
class LogRecord:
    timestamp_us: int
    source: NodeId
    frame_id: FrameId
    payload: bytes

    def encode(self) -> bytes:
        raw_id = struct.unpack("<I", pack_id(self.frame_id))[0]
        return LOG_HEADER.pack(self.timestamp_us, self.source, raw_id, len(self.payload)) + self.payload

    def to_frame(self) -> Frame:
        return Frame(self.frame_id, self.payload, self.source)


def encode_record(timestamp_us: int, frame: Frame) -> bytes:
    return LogRecord(timestamp_us, frame.source, frame.id, frame.payload).encode()


def iter_records(data: bytes) -> Iterator[Tuple[int, LogRecord]]:
    """(オフセット, レコード) を順に返す。途中で切れていたら ValueError(offset)"""
    offset = 0
    while offset < len(data):
        if offset + LOG_HEADER.size > len(data):
            raise ValueError(offset)
        timestamp, source, raw_id, length = LOG_HEADER.unpack_from(data, offset)
        end = offset + LOG_HEADER.size + length
        if end > len(data) or length > 8:
            raise ValueError(offset)
        yield offset, LogRecord(timestamp, source, unpack_id(raw_id),
                                bytes(data[offset + LOG_HEADER.size:end]))
        offset = end


def log_file_name(seq: int) -> str:
    return f"LOG{seq:04d}.BIN"


def log_seq(name: str) -> Optional[int]:
    if name.startswith("LOG") and name.endswith(".BIN"):
        try:
            return int(name[3:-4])
        except ValueError:
            return None
    return None


# --- 出力 ---

class HBridgeCommand(Enum):
    STOP = 0
    FORWARD = 1
    REVERSE = 2


COOL = HBridgeCommand.FORWARD
HEAT = HBridgeCommand.REVERSE


@dataclass(frozen=True)
class HBridgeState:
    relay_a: bool = False
    relay_b: bool = False

    @property
    def motion(self) -> str:
        return {
            (False, False): "off",
            (True, False): "forward",
            (False, True): "reverse",
            (True, True): "brake",
        }[(self.relay_a, self.relay_b)]

    @classmethod
    def from_command(cls, command: HBridgeCommand) -> "HBridgeState":
        if command is HBridgeCommand.FORWARD:
            return cls(True, False)
        if command is HBridgeCommand.REVERSE:
            return cls(False, True)
        return cls(False, False)


DEVICE_CODES = {
    "drive_left": 0,
    "drive_right": 1,
    "linear_actuator": 2,
    "peltier_camera": 3,
    "peltier_battery": 4,
}
DEVICE_NAMES = {code: name for name, code in DEVICE_CODES.items()}
DEVICE_LOAD_W = {"drive_left": 20.0, "drive_right": 20.0, "linear_actuator": 10.0,
                 "peltier_camera": 15.0, "peltier_battery": 15.0}


class Actuator:
    """リニアアクチュエータ: Forward で上昇、0-90° にクランプ"""

    def __init__(self, rate: float = 10.0, angle: float = 0.0):
        self.rate = rate
        self.angle = min(90.0, max(0.0, angle))
        self.direction = 0
        self.since_us = 0

    def angle_at(self, now_us: int) -> float:
        moved = self.direction * self.rate * (now_us - self.since_us) / 1e6
        return min(90.0, max(0.0, self.angle + moved))

    def set(self, command: HBridgeCommand, now_us: int):
        self.angle = self.angle_at(now_us)
        self.since_us = now_us
        self.direction = {HBridgeCommand.FORWARD: 1, HBridgeCommand.REVERSE: -1}.get(command, 0)


def thermal_regulate(device_temp: float, band: Tuple[float, float]) -> HBridgeCommand:
    """範囲外なら冷却/加熱（ペルチェの極性を反転）"""
    lo, hi = band
    if not lo < hi:
        raise InvalidBand(f"band [{lo}, {hi}] is empty")
    if device_temp > hi:
        return COOL
    if device_temp < lo:
        return HEAT
    return HBridgeCommand.STOP


# --- ノード状態 ---

@dataclass(frozen=True)
class NodeStatus:
    node_id: NodeId
    behavior: int
    version: int
    mode: int
    periodic: bool
    sd_free: int

    _LAYOUT = struct.Struct("<BBBBBI")

    def encode(self) -> bytes:
        return self._LAYOUT.pack(self.node_id, self.behavior, self.version & 0xFF, self.mode,
                                 int(self.periodic), max(0, self.sd_free))

    @classmethod
    def decode(cls, payload: bytes) -> "NodeStatus":
        node_id, behavior, version, mode, periodic, sd_free = cls._LAYOUT.unpack(payload)
        return cls(node_id, behavior, version, mode, bool(periodic), sd_free)


class Timer(Protocol):
    def cancel(self) -> None:
        ...


class NodeHost(Protocol):
    """ノードから見たシミュレーション"""
    now: int
    world: World

    def schedule(self, time: int, callback: Callable[[int], None]) -> Timer:
        ...

    def offer(self, node: "Node", frame: Frame) -> None:
        ...


@dataclass
class SensorChannel:
    name: str
    kind: SensorKind
    source: object
    filter: object = field(default_factory=PassThrough)
    channel: int = 0
    period_us: Optional[int] = None
    enabled: bool = True
    sent: int = 0
    timer: Optional[Timer] = None


@dataclass
class _ReflashTarget:
    host: NodeId
    behavior: Behavior
    version: int
    size: int
    crc: int
    buffer: bytearray = field(default_factory=bytearray)
    expected: int = 0


class Node:
    def __init__(self, node_id: NodeId, name: str, firmware: FirmwareImage,
                 sd: Optional[SdCard] = None, clock_error_us: int = 0, load_w: float = 0.5,
                 seed: int = 0):
        self.id = node_id
        self.name = name
        self.firmware = firmware
        self.sd = sd
        self.clock_error_us = clock_error_us
        self.load_w = load_w
        self.rng = np.random.default_rng([seed, node_id])
        self.mode = NodeMode.NORMAL
        self.sleep_reason: Optional[str] = None
        self.periodic_enabled = True
        self.sensors: Dict[str, SensorChannel] = {}
        self.devices: Dict[str, HBridgeState] = {}
        self.actuator: Optional[Actuator] = None
        self.reassembler = Reassembler()
        self.host_session: Optional["ReflashSession"] = None
        self._reflash: Optional[_ReflashTarget] = None
        self.sim: Optional[NodeHost] = None
        self.frames_sent = 0
        self.gps_source = None
        self.thermal_loops: List["ThermalLoop"] = []
        self.program: "Program" = PROGRAMS[firmware.behavior](self)

    def __repr__(self):
        return f"Node({self.name}#{self.id}, {self.behavior.name}, {self.mode.name})"

    @property
    def behavior(self) -> Behavior:
        return self.firmware.behavior

    @property
    def version(self) -> int:
        return self.firmware.version

    @property
    def alive(self) -> bool:
        return self.mode is not NodeMode.DEAD

    def attach(self, sim: NodeHost):
        self.sim = sim
        self.program.start()

    def clock_us(self, sim_time: Optional[int] = None) -> int:
        t = self.sim.now if sim_time is None else sim_time
        return self.sim.world.epoch_us + t + self.clock_error_us

    # --- 送信 ---

    def send(self, frame: Frame):
        if self.mode is NodeMode.DEAD:
            return
        self.frames_sent += 1
        self.sim.offer(self, frame)

    def send_message(self, msg: TransportMessage):
        for frame in fragment(msg):
            self.send(frame)

    def send_command(self, opcode: Opcode, target: int, args: bytes = b""):
        self.send(command_frame(opcode, target, args, self.id))

    # --- センサー ---

    def add_sensor(self, channel: SensorChannel):
        self.sensors[channel.name] = channel

    def schedule_periodic(self, sensor: str, period_us: int):
        channel = self.sensors.get(sensor)
        if channel is None:
            raise UnknownSensor(f"{self.name} has no sensor {sensor!r}")
        if period_us <= 0:
            raise NodeError("period must be positive")
        if channel.timer is not None:
            channel.timer.cancel()
        channel.period_us = period_us

        def tick(now: int):
            if self.mode is NodeMode.NORMAL and self.periodic_enabled and channel.enabled:
                self.broadcast_reading(channel)
            channel.timer = self.sim.schedule(now + period_us, tick)

        channel.timer = self.sim.schedule(self.sim.now, tick)

    def sample(self, channel: SensorChannel) -> Optional[SensorReading]:
        self.sim.world.now_us = self.sim.now
        try:
            raw = channel.source.sample(self.sim.world)
            value = channel.filter.update(raw)
            if channel.kind.vector or channel.kind is SensorKind.POSITION:
                value = tuple(float(v) for v in value)
            return SensorReading(self.clock_us() / 1e6, self.id, channel.kind, value,
                                 channel.channel)
        except SensorError as e:
            logger.warning("%s: sensor %s unreadable: %s", self.name, channel.name, e)
            return None

    def broadcast_reading(self, channel: SensorChannel):
        reading = self.sample(channel)
        if reading is None:
            return
        channel.sent += 1
        self.send(reading_frame(reading.sensor, reading.value, self.id, reading.channel))

    # --- 受信 ---

    def on_event(self, event: BusEvent):
        frame = event.frame
        if self.mode is NodeMode.DEAD:
            return
        if self.mode is NodeMode.HIBERNATE:
            command = parse_command(frame)
            if (command and command.opcode is Opcode.WAKE and command.addressed_to(self.id)
                    and self.sleep_reason == "deep_sleep"):
                self.wake()
            return
        if self.mode is NodeMode.REFLASH_LOOP:
            self._reflash_event(event)
            return

        self.program.on_frame(event)
        if self.mode is not NodeMode.NORMAL or frame.source == self.id:
            return
        if frame.id == TIMESTAMP:
            self._resync(event)
        elif frame.id == COMMAND:
            command = parse_command(frame)
            if command is not None and command.addressed_to(self.id):
                self.handle_command(command, event)
        elif frame.id == CTS:
            if self.host_session is not None:
                index = parse_cts(frame)
                if index is not None:
                    self.host_session.on_cts(CtsToken(index, frame.source))
        else:
            self._transport(event)

    def _transport(self, event: BusEvent):
        parsed = parse_transport_id(event.frame.id)
        if parsed is None or parsed[2] not in self.program.interested:
            return
        try:
            message = self.reassembler.feed(event.frame, event.time)
        except TransportError as e:
            logger.warning("%s: transport error from node %s: %s", self.name,
                           event.frame.source, e)
            return
        if message is not None:
            self.program.on_message(message)

    def _resync(self, event: BusEvent):
        reference = parse_timestamp(event.frame)
        if reference is None:
            return
        error = self.clock_us(event.time) - reference
        if abs(error) > CLOCK_TOLERANCE_US:
            self.clock_error_us -= error
            logger.info("%s: clock resynchronised by %.3f s", self.name, -error / 1e6)

    def handle_command(self, command: Command, event: Optional[BusEvent] = None):
        opcode = command.opcode
        if opcode is Opcode.DISABLE_PERIODIC:
            self.periodic_enabled = False
        elif opcode is Opcode.ENABLE_PERIODIC:
            self.periodic_enabled = True
        elif opcode is Opcode.ENTER_REFLASH:
            try:
                behavior, version, size, crc = parse_reflash_announce(command.args)
                self.enter_reflash(Behavior(behavior), version, size, crc,
                                   host=event.frame.source if event else None)
            except (NodeError, ValueError, struct.error) as e:
                logger.warning("%s: reflash request refused: %s", self.name, e)
        elif opcode is Opcode.REQUEST_SENSOR:
            self._answer_sensor_request(command.args)
        elif opcode is Opcode.REQUEST_STATUS:
            self.send_message(TransportMessage(TransportKind.BROADCAST, MsgType.NODE_STATUS,
                                               self.status().encode(), self.id))
        elif opcode is Opcode.DEEP_SLEEP:
            self.hibernate("deep_sleep")
        else:
            self.program.on_command(command)

    def _answer_sensor_request(self, args: bytes):
        """周期送信が止まっていても即答する"""
        code = args[0] if args else None
        for channel in self.sensors.values():
            if code is None or channel.kind.code == code:
                self.broadcast_reading(channel)

    def status(self) -> NodeStatus:
        return NodeStatus(self.id, int(self.behavior), self.version, int(self.mode),
                          self.periodic_enabled, self.sd.free if self.sd else 0)

    # --- モード遷移 ---

    def kill(self):
        if self.mode is NodeMode.DEAD:
            return
        self.program.stop()
        self._reflash = None
        if self.host_session is not None:
            self.host_session.cancel()
        self.mode = NodeMode.DEAD
        self.sim.flush(self)
        logger.warning("%s: node killed", self.name)

    def restore(self):
        if self.mode is not NodeMode.DEAD:
            return
        self.mode = NodeMode.NORMAL
        self.sleep_reason = None
        self.reassembler.reset()
        self.program.start()
        logger.info("%s: node restored", self.name)

    def hibernate(self, reason: str):
        if self.mode is not NodeMode.NORMAL:
            return
        self.mode = NodeMode.HIBERNATE
        self.sleep_reason = reason
        logger.info("%s: hibernating (%s)", self.name, reason)

    def wake(self):
        if self.mode is not NodeMode.HIBERNATE:
            return
        self.mode = NodeMode.NORMAL
        self.sleep_reason = None
        logger.info("%s: awake", self.name)

    # --- 書き換え対象 ---

    def enter_reflash(self, behavior: Behavior, version: int, size: int, crc: int,
                      host: Optional[NodeId] = None):
        if self.mode is not NodeMode.NORMAL:
            raise InvalidMode(f"{self.name} is {self.mode.name}, cannot enter reflash loop")
        if size > FLASH_SIZE:
            raise ImageTooLarge(f"announced image of {size} bytes exceeds flash")
        self.program.stop()
        self._reflash = _ReflashTarget(host, behavior, version, size, crc)
        self.reassembler.reset()
        self.mode = NodeMode.REFLASH_LOOP
        logger.info("%s: entered reflash loop for %s v%d (%d bytes)",
                    self.name, behavior.name, version, size)

    def apply_chunk(self, index: int, data: bytes) -> CtsToken:
        state = self._reflash
        if self.mode is not NodeMode.REFLASH_LOOP or state is None:
            raise InvalidMode(f"{self.name} is not in the reflash loop")
        if index != state.expected:
            raise ChunkGap(f"expected chunk {state.expected}, got {index}")
        if len(state.buffer) + len(data) > state.size:
            raise ImageTooLarge("chunks exceed the announced image size")
        # 受け取ったそばから書き込む
        state.buffer.extend(data)
        state.expected += 1
        return CtsToken(index, self.id)

    def finalize(self):
        state = self._reflash
        if self.mode is not NodeMode.REFLASH_LOOP or state is None:
            raise InvalidMode(f"{self.name} is not in the reflash loop")
        if len(state.buffer) != state.size or crc16(bytes(state.buffer)) != state.crc:
            self.abort()
            raise CrcMismatch(f"{self.name}: flashed image does not match announced CRC")
        self.firmware = FirmwareImage(bytes(state.buffer), state.version, state.behavior,
                                      state.crc)
        self._reflash = None
        self.mode = NodeMode.NORMAL
        self.program = PROGRAMS[self.behavior](self)
        self.program.start()
        logger.info("%s: now running %s v%d", self.name, self.behavior.name, self.version)
        if self.sim is not None and hasattr(self.sim, "on_reflash_finalized"):
            self.sim.on_reflash_finalized(self)

    def abort(self):
        if self.mode is not NodeMode.REFLASH_LOOP:
            return
        self._reflash = None
        self.mode = NodeMode.NORMAL
        self.program.start()
        logger.warning("%s: reflash aborted, still %s v%d", self.name, self.behavior.name,
                       self.version)

    def _reflash_event(self, event: BusEvent):
        frame = event.frame
        if frame.source == self.id:
            return
        command = parse_command(frame)
        if command is not None:
            if not command.addressed_to(self.id):
                return
            if command.opcode is Opcode.ABORT_REFLASH:
                self.abort()
            elif command.opcode is Opcode.FINALIZE_REFLASH:
                try:
                    self.finalize()
                except CrcMismatch as e:
                    logger.error("%s", e)
            return
        parsed = parse_transport_id(frame.id)
        if parsed is None or parsed[2] != MsgType.FIRMWARE_CHUNK:
            return
        state = self._reflash
        if state.host is not None and frame.source != state.host:
            return
        try:
            message = self.reassembler.feed(frame, event.time)
        except TransportError as e:
            logger.warning("%s: firmware chunk dropped: %s", self.name, e)
            return
        if message is None:
            return
        if state.host is None:
            state.host = message.origin
        index = struct.unpack("<I", message.payload[:4])[0]
        try:
            token = self.apply_chunk(index, message.payload[4:])
        except (ChunkGap, ImageTooLarge) as e:
            logger.error("%s: %s", self.name, e)
            self.abort()
            return
        self.send(cts_frame(token.chunk_index, self.id))

    # --- 出力 ---

    def hbridge_set(self, device: str, command: HBridgeCommand) -> HBridgeState:
        if device not in self.devices:
            raise UnknownDevice(f"{self.name} does not drive {device!r}")
        state = HBridgeState.from_command(command)
        self.devices[device] = state
        if device == "linear_actuator" and self.actuator is not None:
            self.actuator.set(command, self.sim.now if self.sim else 0)
        return state

    def power_load(self) -> Dict[str, float]:
        if self.mode is not NodeMode.NORMAL and self.mode is not NodeMode.REFLASH_LOOP:
            return {"logic": 0.0, "power": 0.0}
        motors = sum(DEVICE_LOAD_W.get(name, 0.0) for name, state in self.devices.items()
                     if state.motion in ("forward", "reverse"))
        return {"logic": self.load_w, "power": motors}


# --- 書き換えホスト ---

class SdFileReceiver:
    """書き換えイメージの受け取り: 順番どおりに SD のファイルへ書き足して CTS を返す"""

    def __init__(self, node: Node, name: str):
        if node.sd is None:
            raise NodeError(f"{node.name} has no SD card")
        self.node = node
        self.name = name
        self.expected = 0
        self.error: Optional[Exception] = None
        node.sd.write(name, b"")

    def accept_chunk(self, index: int, data: bytes) -> Optional[CtsToken]:
        if index != self.expected:
            return None
        try:
            self.node.sd.append(self.name, data)
        except SdFull as e:
            self.error = e
            return None
        self.expected += 1
        return CtsToken(index, self.node.id)

    def rollback(self):
        if self.name in self.node.sd.files:
            self.node.sd.delete(self.name)


class ReflashSession:
    """
    ファームウェア書き換え（ホスト側）
    1. 届いたイメージを host の SD に書き、CRC-16 を確かめる（stage）
    2. ENTER_REFLASH → SD のコピーをチャンクごとに CTS 待ちで流す → FINALIZE
    """

    def __init__(self, host: Node, target: NodeId, image: FirmwareImage,
                 chunk_size: int = REFLASH_CHUNK, cts_timeout: int = CTS_TIMEOUT_US,
                 on_done: Optional[Callable[["ReflashSession"], None]] = None):
        self.host = host
        self.target = target
        self.image = image
        self.chunk_size = chunk_size
        self.cts_timeout = cts_timeout
        self.on_done = on_done
        self.stream = CtsStream(image.data, chunk_size)
        self.state = "idle"
        self.error: Optional[Exception] = None
        self.started_at: Optional[int] = None
        self.finished_at: Optional[int] = None
        self._timer: Optional[Timer] = None

    @property
    def transcript(self):
        return self.stream.transcript

    @property
    def staged_name(self) -> str:
        return f"FW{self.target:03d}V{self.image.version:03d}.BIN"

    def stage(self, data: bytes) -> bool:
        """受信したイメージを SD に置く。CRC が合わなければ ENTER_REFLASH を送らずに失敗"""
        if self.host.mode is not NodeMode.NORMAL:
            self.fail(NodeError(f"{self.host.name} is {self.host.mode.name} when the image arrived"))
            return False
        self.state = "staging"
        receiver = SdFileReceiver(self.host, self.staged_name)
        try:
            stream_with_cts(data, self.chunk_size, receiver)
        except CtsTimeout as e:
            self.fail(receiver.error or e)
            return False
        staged = self.host.sd.read(self.staged_name)
        crc = crc16(staged)
        if crc != self.image.crc:
            self.fail(CrcMismatch(f"staged image CRC {crc:#06x}, expected {self.image.crc:#06x}"))
            return False
        logger.info("%s: %s staged, %d bytes", self.host.name, self.staged_name, len(staged))
        self.image = FirmwareImage(staged, self.image.version, self.image.behavior, crc)
        self.stream = CtsStream(staged, self.chunk_size)
        return True

    def start(self):
        if not self.image.verify():
            raise CrcMismatch("image CRC check failed before reflash")
        if self.host.host_session is not None and self.host.host_session.state == "running":
            raise NodeError(f"{self.host.name} already runs a reflash session")
        self.host.host_session = self
        self.state = "running"
        self.started_at = self.host.sim.now
        args = reflash_announce_args(int(self.image.behavior), self.image.version,
                                     len(self.image.data), self.image.crc)
        self.host.send_command(Opcode.ENTER_REFLASH, self.target, args)
        logger.info("reflash of node %d started: %s v%d, %d chunks", self.target,
                    self.image.behavior.name, self.image.version, self.stream.total)
        self._advance()

    def _advance(self):
        if self.stream.complete:
            self.host.send_command(Opcode.FINALIZE_REFLASH, self.target)
            self._finish("done")
            return
        index, data = self.stream.next_chunk()
        self.host.send_message(TransportMessage(TransportKind.LARGE_TRANSFER,
                                                MsgType.FIRMWARE_CHUNK,
                                                struct.pack("<I", index) + data, self.host.id))
        self._timer = self.host.sim.schedule(self.host.sim.now + self.cts_timeout,
                                             lambda now, index=index: self._timeout(index))

    def on_cts(self, token: CtsToken):
        if self.state != "running" or token.receiver != self.target:
            return
        if not self.stream.on_cts(token):
            return
        if self._timer is not None:
            self._timer.cancel()
        self._advance()

    def _timeout(self, index: int):
        if self.state != "running" or self.stream.awaiting != index:
            return
        self.host.send_command(Opcode.ABORT_REFLASH, self.target)
        self.fail(CtsTimeout(index, self.stream.transcript))

    def cancel(self):
        if self.state == "running":
            self.fail(NodeError("host node went down"))

    def fail(self, reason: Exception):
        if self._timer is not None:
            self._timer.cancel()
        self.error = ReflashFailed(reason)
        logger.error("reflash of node %d: %s", self.target, reason)
        self._finish("failed")

    def _finish(self, state: str):
        self.state = state
        self.finished_at = self.host.sim.now
        if self.host.host_session is self:
            self.host.host_session = None
        if self.host.sd is not None and self.staged_name in self.host.sd.files:
            self.host.sd.delete(self.staged_name)
        if self.on_done is not None:
            self.on_done(self)


# --- behavior ---

class Program:
    """behavior ごとの処理（書き換えで差し替わる）"""
    interested: Tuple[int, ...] = ()

    def __init__(self, node: Node):
        self.node = node
        self.active = False

    def start(self):
        self.active = True

    def stop(self):
        self.active = False

    def on_frame(self, event: BusEvent):
        pass

    def on_command(self, command: Command):
        pass

    def on_message(self, message: TransportMessage):
        pass


class SensorSuiteProgram(Program):
    pass


class LoggerProgram(Program):
    """バス上の全トラフィックを SD に記録（ファイル転送は除く）"""

    def __init__(self, node: Node):
        super().__init__(node)
        self.file: Optional[str] = None
        self.records = 0
        self.dropped = 0
        self._alarmed = False
        self._final_expected: Optional[int] = None
        self._final_seen = 0

    def start(self):
        super().start()
        self.file = None
        self._alarmed = False

    def stop(self):
        self.rotate()
        super().stop()

    def _next_name(self) -> str:
        seqs = [log_seq(name) for name in self.node.sd.names("LOG")]
        return log_file_name(max([s for s in seqs if s is not None], default=0) + 1)

    def on_frame(self, event: BusEvent):
        self.ingest(event)
        if self._final_expected is not None and event.frame.id == POWER_ALARM:
            self._final_seen += 1
            if self._final_seen >= self._final_expected:
                self._final_expected = None
                self.node.hibernate("brown_out")

    def ingest(self, event: BusEvent):
        frame = event.frame
        if not self.active or self.node.sd is None or is_file_transfer(frame.id):
            return
        if self.file is None:
            self.file = self._next_name()
            self.node.sd.files.setdefault(self.file, bytearray())
            logger.debug("%s: logging to %s", self.node.name, self.file)
        try:
            self.node.sd.append(self.file, encode_record(self.node.clock_us(event.time), frame))
            self.records += 1
        except SdFull:
            self.dropped += 1
            if not self._alarmed:
                self._alarmed = True
                logger.warning("%s: SD card full, log records dropped", self.node.name)
                self.node.send(sd_alarm_frame(self.node.sd.free, self.node.id))

    def rotate(self) -> Optional[str]:
        closed, self.file = self.file, None
        self._alarmed = False
        return closed

    def expect_final_frames(self, count: int):
        """ブラウンアウト: 全ノードの最後の信号を記録してから休止"""
        self._final_expected = count
        self._final_seen = 0


class CameraProgram(Program):
    image_size = 2048

    def __init__(self, node: Node):
        super().__init__(node)
        self.captured = 0

    def on_command(self, command: Command):
        if command.opcode is Opcode.CAPTURE_IMAGE:
            self.capture()

    def capture(self) -> Optional[str]:
        node = self.node
        self.captured += 1
        name = f"IMG{self.captured:04d}.JPG"
        data = node.rng.integers(0, 256, self.image_size, dtype=np.uint8).tobytes()
        if node.sd is not None:
            try:
                node.sd.write(name, data)
            except SdFull:
                logger.warning("%s: no room for %s", node.name, name)
        node.send_message(TransportMessage(TransportKind.LARGE_TRANSFER, MsgType.IMAGE,
                                           encode_image(name, data), node.id))
        logger.info("%s: captured %s (%d bytes)", node.name, name, len(data))
        return name


def encode_image(name: str, data: bytes) -> bytes:
    raw = name.encode("ascii")
    return bytes([len(raw)]) + raw + data


def decode_image(payload: bytes) -> Tuple[str, bytes]:
    length = payload[0]
    return payload[1:1 + length].decode("ascii"), payload[1 + length:]


class UplinkProgram(Program):
    """メインモデム側: 画像の受け取りとステータス収集"""
    interested = (MsgType.IMAGE, MsgType.NODE_STATUS)

    def __init__(self, node: Node):
        super().__init__(node)
        self.staged: List[str] = []
        self.statuses: List[NodeStatus] = []

    def on_message(self, message: TransportMessage):
        if message.msg_type == MsgType.IMAGE:
            name, data = decode_image(message.payload)
            name = f"N{message.origin:02d}_{name}"
            if self.node.sd is None:
                return
            try:
                self.node.sd.write(name, data)
                self.staged.append(name)
            except SdFull:
                logger.warning("%s: staging SD full, %s dropped", self.node.name, name)
        elif message.msg_type == MsgType.NODE_STATUS:
            self.statuses.append(NodeStatus.decode(message.payload))


class SmsBridgeProgram(Program):
    """予備モデム: 転送モード中は全フレームを SMS へ"""

    def __init__(self, node: Node):
        super().__init__(node)
        self.forwarding = False

    def on_frame(self, event: BusEvent):
        if self.forwarding and self.active:
            self.node.sim.sms_forward(self.node, event)

    def on_command(self, command: Command):
        if command.opcode is Opcode.ENABLE_FORWARDING:
            self.forwarding = True
            logger.info("%s: forwarding bus traffic over SMS", self.node.name)
        elif command.opcode is Opcode.DISABLE_FORWARDING:
            self.forwarding = False


class GpsProgram(Program):
    """RMC を読んで TIMESTAMP を流し、数回分の平均位置を送る"""
    period_us = 1_000_000
    fixes_per_report = 10

    def __init__(self, node: Node):
        super().__init__(node)
        self.fixes: List[Tuple[float, float]] = []
        self.generation = 0

    def start(self):
        super().start()
        self.generation += 1
        generation = self.generation
        receiver = self.node.gps_source
        if receiver is None or self.node.sim is None:
            return

        def tick(now: int):
            if not self.active or generation != self.generation:
                return
            node = self.node
            if node.mode is NodeMode.NORMAL and node.periodic_enabled:
                node.sim.world.now_us = now
                fix = parse_nmea_rmc(receiver.sentence(node.sim.world))
                node.send(timestamp_frame(int(round(fix.timestamp * 1e6)), node.id))
                if fix.valid and fix.latitude is not None:
                    self.fixes.append((fix.latitude, fix.longitude))
                if len(self.fixes) >= self.fixes_per_report:
                    node.send(reading_frame(SensorKind.POSITION, average_position(self.fixes),
                                            node.id))
                    self.fixes.clear()
            node.sim.schedule(now + self.period_us, tick)

        self.node.sim.schedule(self.node.sim.now, tick)


@dataclass
class ThermalLoop:
    device: str
    band: Tuple[float, float]
    source: object
    period_us: int = 10_000_000
    history: List[Tuple[int, HBridgeCommand]] = field(default_factory=list)


class OutputProgram(Program):
    """H ブリッジ（駆動・アーム・ペルチェ）とバッテリーブリッジのリレー"""

    def __init__(self, node: Node):
        super().__init__(node)
        self.generation = 0

    def start(self):
        super().start()
        self.generation += 1
        if self.node.sim is None:
            return
        for loop in self.node.thermal_loops:
            self._schedule(loop, self.node.sim.now, self.generation)

    def _schedule(self, loop: ThermalLoop, at: int, generation: int):
        def tick(now: int):
            if not self.active or generation != self.generation:
                return
            if self.node.mode is NodeMode.NORMAL:
                self.node.sim.world.now_us = now
                command = thermal_regulate(loop.source.sample(self.node.sim.world), loop.band)
                self.node.hbridge_set(loop.device, command)
                loop.history.append((now, command))
            self._schedule(loop, now + loop.period_us, generation)

        self.node.sim.schedule(at, tick)

    def on_command(self, command: Command):
        if command.opcode is Opcode.DRIVE and len(command.args) >= 2:
            device = DEVICE_NAMES.get(command.args[0])
            try:
                self.node.hbridge_set(device, HBridgeCommand(command.args[1]))
            except (UnknownDevice, ValueError) as e:
                logger.warning("%s: drive command ignored: %s", self.node.name, e)
        elif command.opcode is Opcode.BRIDGE_BATTERIES:
            self.node.sim.bridge_batteries()


PROGRAMS: Dict[Behavior, type] = {
    Behavior.SENSOR_SUITE: SensorSuiteProgram,
    Behavior.LOGGER: LoggerProgram,
    Behavior.CAMERA: CameraProgram,
    Behavior.UPLINK: UplinkProgram,
    Behavior.SMS_BRIDGE: SmsBridgeProgram,
    Behavior.GPS: GpsProgram,
    Behavior.OUTPUT: OutputProgram,
}


def drive_args(device: str, command: HBridgeCommand) -> bytes:
    if device not in DEVICE_CODES:
        raise UnknownDevice(f"unknown device {device!r}")
    return bytes([DEVICE_CODES[device], command.value])
