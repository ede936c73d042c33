"""
マルチパケット転送（J1939-TP 風 + 大容量転送）と CTS フロー制御
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

from bus import Frame, NodeId
from messages import (PHASE_ANNOUNCE, PHASE_DATA, TransportKind, parse_transport_id,
                      transport_frame_id)

logger = logging.getLogger(__name__)

BROADCAST_CHUNK = 7
LARGE_CHUNK = 4
BROADCAST_MAX_CHUNKS = 255
BROADCAST_MAX = BROADCAST_MAX_CHUNKS * BROADCAST_CHUNK

SESSION_TIMEOUT_US = 5_000_000
CTS_TIMEOUT_US = 1_000_000


class TransportError(Exception):
    """転送エラーの基底クラス"""


class TooLarge(TransportError):
    pass


class UnknownSession(TransportError):
    pass


class ChunkOutOfRange(TransportError):
    pass


class MalformedChunk(TransportError):
    pass


class SessionTimeout(TransportError):
    pass


class CtsTimeout(TransportError):
    def __init__(self, index: int, transcript=None):
        super().__init__(f"no CTS for chunk {index}")
        self.index = index
        self.transcript = list(transcript or [])


class FlowViolation(TransportError):
    pass


# --- CRC-16/ARC ---

def _crc16_entry(byte: int) -> int:
    crc = byte
    for _ in range(8):
        crc = (crc >> 1) ^ 0xA001 if crc & 1 else crc >> 1
    return crc


_CRC16_TABLE = [_crc16_entry(i) for i in range(256)]


def crc16(data: bytes, crc: int = 0x0000) -> int:
    """CRC-16/ARC（poly 0x8005 reflected, init 0, xorout 0）"""
    for byte in data:
        crc = (crc >> 8) ^ _CRC16_TABLE[(crc ^ byte) & 0xFF]
    return crc


# --- メッセージ ---

def chunk_size_for(kind: TransportKind) -> int:
    return BROADCAST_CHUNK if kind is TransportKind.BROADCAST else LARGE_CHUNK


@dataclass(frozen=True)
class TransportMessage:
    kind: TransportKind
    msg_type: int
    payload: bytes
    origin: NodeId

    @property
    def total_chunks(self) -> int:
        size = chunk_size_for(self.kind)
        return -(-len(self.payload) // size)


def fragment(msg: TransportMessage) -> List[Frame]:
    """announce フレーム + データフレームに分割"""
    if msg.kind is TransportKind.BROADCAST and len(msg.payload) > BROADCAST_MAX:
        raise TooLarge(f"broadcast payload {len(msg.payload)} > {BROADCAST_MAX} bytes")
    chunks = msg.total_chunks
    announce = struct.pack("<BBIH", int(msg.kind), msg.msg_type, len(msg.payload), chunks & 0xFFFF)
    frames = [Frame(transport_frame_id(msg.kind, PHASE_ANNOUNCE, msg.msg_type), announce, msg.origin)]
    data_id = transport_frame_id(msg.kind, PHASE_DATA, msg.msg_type)
    size = chunk_size_for(msg.kind)
    for index in range(chunks):
        data = msg.payload[index * size:(index + 1) * size]
        if msg.kind is TransportKind.BROADCAST:
            header = struct.pack("<B", index)
        else:
            header = struct.pack("<I", index)
        frames.append(Frame(data_id, header + data, msg.origin))
    return frames


@dataclass
class ReassemblyState:
    kind: TransportKind
    msg_type: int
    origin: NodeId
    length: int
    expected_chunks: int
    deadline: int
    received: int = 0  # bitmap
    count: int = 0
    buffer: bytearray = field(default_factory=bytearray)

    def __post_init__(self):
        if not self.buffer:
            self.buffer = bytearray(self.length)

    @property
    def complete(self) -> bool:
        return self.count == self.expected_chunks

    def message(self) -> TransportMessage:
        return TransportMessage(self.kind, self.msg_type, bytes(self.buffer), self.origin)


def reassemble(state: ReassemblyState, frame: Frame, now: int = 0,
               session_timeout: int = SESSION_TIMEOUT_US) -> Optional[TransportMessage]:
    """データフレームを 1 枚取り込み、最後の欠片で完成メッセージを返す"""
    if now > state.deadline:
        raise SessionTimeout(f"session {state.origin}/{state.msg_type} expired at {state.deadline}")
    if state.kind is TransportKind.BROADCAST:
        if len(frame.payload) < 1:
            raise MalformedChunk("broadcast data frame without sequence byte")
        index, data = frame.payload[0], frame.payload[1:]
    else:
        if len(frame.payload) < 4:
            raise MalformedChunk("large transfer data frame without index")
        index, data = struct.unpack("<I", frame.payload[:4])[0], frame.payload[4:]
    if index >= state.expected_chunks:
        raise ChunkOutOfRange(f"chunk {index} >= {state.expected_chunks}")
    size = chunk_size_for(state.kind)
    start = index * size
    if len(data) != min(size, state.length - start):
        raise MalformedChunk(f"chunk {index} carries {len(data)} bytes")
    state.deadline = now + session_timeout
    bit = 1 << index
    if state.received & bit:
        return None
    state.received |= bit
    state.count += 1
    state.buffer[start:start + len(data)] = data
    return state.message() if state.complete else None


class Reassembler:
    """(origin, msg_type) ごとに 1 セッション"""

    def __init__(self, session_timeout: int = SESSION_TIMEOUT_US):
        self.session_timeout = session_timeout
        self.sessions: Dict[Tuple[NodeId, int], ReassemblyState] = {}

    def feed(self, frame: Frame, now: int = 0) -> Optional[TransportMessage]:
        parsed = parse_transport_id(frame.id)
        if parsed is None:
            return None
        kind, phase, msg_type = parsed
        key = (frame.source, msg_type)
        if phase == PHASE_ANNOUNCE:
            return self._announce(kind, msg_type, frame, now)
        state = self.sessions.get(key)
        if state is None or state.kind is not kind:
            raise UnknownSession(f"data frame from {frame.source} type {msg_type} without announce")
        try:
            message = reassemble(state, frame, now, self.session_timeout)
        except SessionTimeout:
            del self.sessions[key]
            raise
        if message is not None:
            del self.sessions[key]
        return message

    def _announce(self, kind: TransportKind, msg_type: int, frame: Frame,
                  now: int) -> Optional[TransportMessage]:
        if len(frame.payload) != 8:
            raise MalformedChunk("announce frame must carry 8 bytes")
        kind_byte, type_byte, length, chunks = struct.unpack("<BBIH", frame.payload)
        if kind_byte != int(kind) or type_byte != msg_type:
            raise MalformedChunk("announce header disagrees with identifier")
        expected = -(-length // chunk_size_for(kind))
        # 2 byte のチャンク数は下位 16 bit のみ照合
        if expected & 0xFFFF != chunks:
            raise MalformedChunk(f"announce claims {chunks} chunks for {length} bytes")
        key = (frame.source, msg_type)
        if key in self.sessions:
            logger.debug("session %s restarted by new announce", key)
        state = ReassemblyState(kind, msg_type, frame.source, length, expected,
                                now + self.session_timeout)
        if expected == 0:
            self.sessions.pop(key, None)
            return state.message()
        self.sessions[key] = state
        return None

    def expire(self, now: int) -> List[Tuple[NodeId, int]]:
        expired = [key for key, s in self.sessions.items() if now > s.deadline]
        for key in expired:
            del self.sessions[key]
        return expired

    def reset(self):
        self.sessions.clear()


# --- CTS フロー制御 ---

@dataclass(frozen=True)
class CtsToken:
    chunk_index: int
    receiver: NodeId


@dataclass(frozen=True)
class TranscriptEntry:
    kind: str  # 'chunk' or 'cts'
    index: int

    def __repr__(self):
        return f"{'C' if self.kind == 'chunk' else 'CTS'}{self.index}"


class CtsStream:
    """送信側: チャンク k は CTS(k-1) を受けてから"""

    def __init__(self, payload: bytes, chunk_size: int):
        if chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        self.payload = bytes(payload)
        self.chunk_size = chunk_size
        self.total = -(-len(self.payload) // chunk_size)
        self.next_index = 0
        self.awaiting: Optional[int] = None
        self.transcript: List[TranscriptEntry] = []

    @property
    def complete(self) -> bool:
        return self.awaiting is None and self.next_index >= self.total

    def next_chunk(self) -> Tuple[int, bytes]:
        if self.awaiting is not None:
            raise FlowViolation(f"chunk {self.next_index} before CTS {self.awaiting}")
        if self.next_index >= self.total:
            raise FlowViolation("all chunks already sent")
        index = self.next_index
        data = self.payload[index * self.chunk_size:(index + 1) * self.chunk_size]
        self.transcript.append(TranscriptEntry("chunk", index))
        self.awaiting = index
        self.next_index += 1
        return index, data

    def on_cts(self, token: CtsToken) -> bool:
        """期待した CTS なら True"""
        if self.awaiting is None or token.chunk_index != self.awaiting:
            logger.debug("unexpected CTS %d (awaiting %s)", token.chunk_index, self.awaiting)
            return False
        self.transcript.append(TranscriptEntry("cts", token.chunk_index))
        self.awaiting = None
        return True


class CtsReceiver(Protocol):
    def accept_chunk(self, index: int, data: bytes) -> Optional[CtsToken]:
        ...

    def rollback(self) -> None:
        ...


class BufferReceiver:
    """ファイル受信モード: 順番どおりにバッファへ追加して CTS を返す"""

    def __init__(self, node: NodeId = 0):
        self.node = node
        self.buffer = bytearray()
        self.expected = 0

    def accept_chunk(self, index: int, data: bytes) -> Optional[CtsToken]:
        if index != self.expected:
            return None
        self.buffer.extend(data)
        self.expected += 1
        return CtsToken(index, self.node)

    def rollback(self):
        self.buffer.clear()
        self.expected = 0


def stream_with_cts(payload: bytes, chunk_size: int,
                    receiver: CtsReceiver) -> List[TranscriptEntry]:
    """
    受信側が同期的に答える相手への CTS 送信
    accept_chunk が CTS を返さなければその場で中断する（待ち時間は ReflashSession 側で管理）
    """
    stream = CtsStream(payload, chunk_size)
    while not stream.complete:
        index, data = stream.next_chunk()
        token = receiver.accept_chunk(index, data)
        if token is None or not stream.on_cts(token):
            receiver.rollback()
            logger.warning("no CTS for chunk %d, session aborted", index)
            raise CtsTimeout(index, stream.transcript)
    return stream.transcript
