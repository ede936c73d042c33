import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, Iterable, List, Optional, Tuple

logger = logging.getLogger(__name__)

NodeId = int

MAX_PAYLOAD = 8


class BusError(Exception):
    """バス関連エラーの基底クラス"""


class UnknownNode(BusError):
    pass


class OversizePayload(BusError):
    pass


class EmptyContention(BusError):
    pass


class InvalidFrameId(BusError):
    pass


class OfferInPast(BusError):
    pass


class IdWidth(Enum):
    STANDARD11 = 11
    EXTENDED29 = 29


@dataclass(frozen=True, order=True)
class FrameId:
    value: int
    width: IdWidth = IdWidth.STANDARD11

    def __post_init__(self):
        if self.value < 0 or self.value >= (1 << self.width.value):
            raise InvalidFrameId(f"identifier 0x{self.value:X} does not fit {self.width.value} bits")

    @property
    def extended(self) -> bool:
        return self.width is IdWidth.EXTENDED29

    def hex(self) -> str:
        # 幅は桁数で表す（trace から復元できるように）
        return f"0x{self.value:08X}" if self.extended else f"0x{self.value:03X}"

    @classmethod
    def from_hex(cls, text: str) -> "FrameId":
        digits = text[2:] if text.lower().startswith("0x") else text
        width = IdWidth.EXTENDED29 if len(digits) > 3 else IdWidth.STANDARD11
        return cls(int(digits, 16), width)


@dataclass(frozen=True)
class Frame:
    id: FrameId
    payload: bytes = b""
    source: NodeId = 0

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise OversizePayload(f"{len(self.payload)} byte payload exceeds {MAX_PAYLOAD}")
        object.__setattr__(self, "payload", bytes(self.payload))


@dataclass(frozen=True)
class BusConfig:
    bitrate: int = 125000
    frame_overhead_bits: int = 47

    def __post_init__(self):
        if self.bitrate <= 0:
            raise ValueError("bitrate must be positive")


@dataclass(frozen=True)
class BusEvent:
    time: int
    frame: Frame

    def trace_line(self) -> str:
        """time_us,src,id_hex,len,payload_hex"""
        frame = self.frame
        return f"{self.time},{frame.source},{frame.id.hex()},{len(frame.payload)},{frame.payload.hex()}"

    @classmethod
    def from_trace_line(cls, line: str) -> "BusEvent":
        time_us, src, id_hex, length, payload_hex = line.strip().split(",")
        payload = bytes.fromhex(payload_hex)
        if len(payload) != int(length):
            raise ValueError(f"length field {length} does not match payload")
        return cls(int(time_us), Frame(FrameId.from_hex(id_hex), payload, int(src)))


def frame_time(frame: Frame, cfg: BusConfig) -> int:
    """フレーム送信時間（µs, 切り上げ）"""
    bits = cfg.frame_overhead_bits + 8 * len(frame.payload)
    return -(-(bits * 1_000_000) // cfg.bitrate)


def arbitrate(contenders: Iterable[Frame]) -> Frame:
    """最小の識別子が勝つ（dominant bit）"""
    contenders = list(contenders)
    if not contenders:
        raise EmptyContention("no frames contending")
    return min(contenders, key=lambda f: f.id.value)


Listener = Callable[[BusEvent], None]


@dataclass
class _Pending:
    offer_time: int
    seq: int
    frame: Frame


@dataclass
class _Port:
    node: NodeId
    listener: Optional[Listener] = None
    loopback: bool = False
    queue: Deque[_Pending] = field(default_factory=deque)


class Bus:
    """CAN 風の放送バスの離散イベントシミュレーション"""

    def __init__(self, cfg: Optional[BusConfig] = None):
        self.cfg = cfg or BusConfig()
        self.now = 0
        self._free_at = 0
        self._seq = 0
        self._ports: Dict[NodeId, _Port] = {}
        self._monitors: List[Listener] = []
        self.offered = 0
        self.delivered = 0
        self.flushed = 0

    def register(self, node: NodeId, listener: Optional[Listener] = None, loopback: bool = False):
        if node in self._ports:
            raise BusError(f"node {node} already registered")
        self._ports[node] = _Port(node, listener, loopback)

    def add_monitor(self, monitor: Listener):
        self._monitors.append(monitor)

    @property
    def nodes(self) -> List[NodeId]:
        return list(self._ports)

    def offer(self, frame: Frame, node: NodeId, time: int):
        port = self._ports.get(node)
        if port is None:
            raise UnknownNode(f"node {node} is not on the bus")
        if len(frame.payload) > MAX_PAYLOAD:
            raise OversizePayload(f"{len(frame.payload)} byte payload")
        if time < self.now:
            raise OfferInPast(f"offer at {time} before bus time {self.now}")
        if frame.source != node:
            frame = Frame(frame.id, frame.payload, node)
        port.queue.append(_Pending(time, self._seq, frame))
        self._seq += 1
        self.offered += 1

    def flush(self, node: NodeId) -> int:
        """ノードの送信待ちを破棄（ノード停止時）"""
        port = self._ports.get(node)
        if port is None:
            raise UnknownNode(f"node {node} is not on the bus")
        dropped = len(port.queue)
        port.queue.clear()
        self.flushed += dropped
        if dropped:
            logger.debug("node %s: %d pending frames dropped", node, dropped)
        return dropped

    def pending(self) -> int:
        return sum(len(p.queue) for p in self._ports.values())

    def _next_slot(self) -> Optional[Tuple[int, _Port]]:
        heads = [p for p in self._ports.values() if p.queue]
        if not heads:
            return None
        earliest = min(p.queue[0].offer_time for p in heads)
        start = max(self._free_at, earliest)
        contenders = [p for p in heads if p.queue[0].offer_time <= start]
        # 同一 id は先に offer された方を優先
        winner = min(contenders, key=lambda p: (p.queue[0].frame.id.value, p.queue[0].seq))
        return start, winner

    def next_completion(self) -> Optional[int]:
        slot = self._next_slot()
        if slot is None:
            return None
        start, port = slot
        return start + frame_time(port.queue[0].frame, self.cfg)

    def step(self, until: int) -> List[BusEvent]:
        if until < self.now:
            raise BusError(f"cannot step back from {self.now} to {until}")
        events: List[BusEvent] = []
        while True:
            slot = self._next_slot()
            if slot is None:
                break
            start, port = slot
            done = start + frame_time(port.queue[0].frame, self.cfg)
            if done > until:
                break
            pending = port.queue.popleft()
            self._free_at = done
            self.now = done
            event = BusEvent(done, pending.frame)
            events.append(event)
            self.delivered += 1
            self._dispatch(event)
        self.now = until
        return events

    def _dispatch(self, event: BusEvent):
        for monitor in self._monitors:
            monitor(event)
        for port in list(self._ports.values()):
            if port.listener is None:
                continue
            if port.node == event.frame.source and not port.loopback:
                continue
            port.listener(event)


def write_trace(events: Iterable[BusEvent], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write("time_us,src,id_hex,len,payload_hex\n")
        for event in events:
            f.write(event.trace_line() + "\n")
            count += 1
    return count


def read_trace(path) -> List[BusEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("time_us"):
                continue
            try:
                events.append(BusEvent.from_trace_line(line))
            except (ValueError, BusError) as e:
                raise ValueError(f"trace line {lineno}: {e}") from e
    return events
