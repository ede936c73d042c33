"""
二系統のアップリンク
- メインモデム: gateway へのバイトチャネル（ログのアップロード）
- SMS ブリッジ: 非常時にバスの生フレームをそのまま中継
"""
import logging
import socket
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple
from urllib.parse import urlparse

from bus import Frame
from messages import BROADCAST_TARGET, Opcode, command_frame, pack_id, unpack_id
from transport import crc16

logger = logging.getLogger(__name__)

SMS_SEGMENT_SIZE = 140
SMS_LATENCY_US = 5_000_000
SMS_FLUSH_DELAY_US = 100_000
SMS_HEADER = struct.Struct("<IB")


class UplinkError(Exception):
    """アップリンク関連エラーの基底クラス"""


class ModemFailed(UplinkError):
    def __init__(self, message: str, session: Optional["UploadSession"] = None):
        super().__init__(message)
        self.session = session


class BackupUnavailable(UplinkError):
    pass


class TruncatedStream(UplinkError):
    pass


class MalformedUpload(UplinkError):
    pass


class ModemState(Enum):
    IDLE = "idle"
    CONNECTED = "connected"
    FAILED = "failed"


class MainModem:
    """帯域と遅延だけを持つ信頼できるバイトチャネル"""

    def __init__(self, bandwidth: float = 2000.0, latency_us: int = 500_000):
        if bandwidth <= 0:
            raise UplinkError("bandwidth must be positive")
        self.bandwidth = bandwidth
        self.latency_us = latency_us
        self.state = ModemState.IDLE
        self.fail_at_fraction: Optional[float] = None
        self.bytes_sent = 0
        self.failures = 0

    @property
    def connected(self) -> bool:
        return self.state is ModemState.CONNECTED

    def connect(self):
        if self.state is not ModemState.FAILED:
            self.state = ModemState.CONNECTED

    def fail(self):
        self.state = ModemState.FAILED
        self.fail_at_fraction = None
        self.failures += 1
        logger.warning("main modem failed")

    def arm_failure(self, fraction: float):
        """次の転送を fraction の位置で切断する"""
        self.fail_at_fraction = min(max(fraction, 0.0), 1.0)

    def recover(self):
        self.state = ModemState.CONNECTED
        logger.info("main modem reconnected")

    def transfer_time(self, size: int) -> int:
        return self.latency_us + int(size * 1_000_000 / self.bandwidth)


# --- アップロードの電文 ---

def encode_upload(name: str, data: bytes, crc: Optional[int] = None) -> bytes:
    """[name_len:1][name][size:8 LE][bytes][crc:2 LE]"""
    raw = name.encode("ascii")
    if not 0 < len(raw) < 256:
        raise UplinkError(f"file name {name!r} must be 1-255 bytes")
    crc = crc16(data) if crc is None else crc
    return bytes([len(raw)]) + raw + struct.pack("<Q", len(data)) + data + struct.pack("<H", crc)


def decode_upload(wire: bytes) -> Tuple[str, bytes, int]:
    if len(wire) < 1:
        raise MalformedUpload("empty upload")
    name_len = wire[0]
    header = 1 + name_len + 8
    if name_len == 0 or len(wire) < header + 2:
        raise MalformedUpload("upload header truncated")
    try:
        name = wire[1:1 + name_len].decode("ascii")
    except UnicodeDecodeError:
        raise MalformedUpload("file name is not ASCII") from None
    if "/" in name or "\\" in name or name.startswith("."):
        raise MalformedUpload(f"illegal file name {name!r}")
    size = struct.unpack("<Q", wire[1 + name_len:header])[0]
    if len(wire) != header + size + 2:
        raise MalformedUpload(f"{name}: declared {size} bytes, got {len(wire) - header - 2}")
    data = bytes(wire[header:header + size])
    crc = struct.unpack("<H", wire[header + size:])[0]
    return name, data, crc


def encode_reply(ok: bool, crc: int) -> bytes:
    return bytes([1 if ok else 0]) + struct.pack("<H", crc & 0xFFFF)


def decode_reply(reply: bytes) -> Tuple[bool, int]:
    if len(reply) != 3 or reply[0] not in (0, 1):
        raise UplinkError(f"bad gateway reply {reply.hex()}")
    return reply[0] == 1, struct.unpack("<H", reply[1:])[0]


# --- gateway への接続 ---

class EmbeddedGatewayLink:
    """同一プロセス内の gateway（時刻はシミュレーションから）"""

    def __init__(self, gateway, clock: Optional[Callable[[], int]] = None):
        self.gateway = gateway
        self.clock = clock

    def exchange(self, wire: bytes) -> bytes:
        received_ms = self.clock() if self.clock else None
        return self.gateway.receive_upload(wire, received_ms)


class TcpGatewayLink:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def exchange(self, wire: bytes) -> bytes:
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as conn:
            conn.sendall(wire)
            conn.shutdown(socket.SHUT_WR)
            reply = b""
            while len(reply) < 3:
                chunk = conn.recv(3 - len(reply))
                if not chunk:
                    break
                reply += chunk
        return reply


def gateway_link(url: str, gateway=None, clock=None):
    """'embedded' または 'tcp://host:port'"""
    if url == "embedded":
        if gateway is None:
            raise UplinkError("embedded link needs a gateway instance")
        return EmbeddedGatewayLink(gateway, clock)
    parsed = urlparse(url)
    if parsed.scheme != "tcp" or not parsed.hostname or not parsed.port:
        raise UplinkError(f"gateway must be 'embedded' or tcp://host:port, got {url!r}")
    return TcpGatewayLink(parsed.hostname, parsed.port)


# --- アップロード ---

class UploadResult(Enum):
    ACKED = "acked"
    CHECKSUM_MISMATCH = "checksum_mismatch"
    MODEM_FAILED = "modem_failed"


@dataclass
class UploadSession:
    name: str
    bytes_sent: int = 0
    local_crc: Optional[int] = None
    remote_crc: Optional[int] = None
    result: Optional[UploadResult] = None
    duration_us: int = 0


def upload_log(session: UploadSession, sd, channel: MainModem, link,
               corrupt_offset: Optional[int] = None) -> UploadSession:
    """
    ファイルを 1 回で送り、両側の CRC-16 が一致したときだけ SD から削除

    Args:
        corrupt_offset: 転送中に壊すバイト位置（障害注入）
    """
    if not channel.connected:
        raise ModemFailed("main modem is not connected", session)
    data = sd.read(session.name)
    session.local_crc = crc16(data)
    wire = bytearray(encode_upload(session.name, data, session.local_crc))
    if corrupt_offset is not None and len(data):
        position = len(wire) - 2 - len(data) + corrupt_offset % len(data)
        wire[position] ^= 0xFF

    if channel.fail_at_fraction is not None:
        session.bytes_sent = int(len(wire) * channel.fail_at_fraction)
        session.duration_us = channel.transfer_time(session.bytes_sent)
        session.result = UploadResult.MODEM_FAILED
        channel.fail()
        raise ModemFailed(f"{session.name}: link lost after {session.bytes_sent} bytes", session)

    reply = link.exchange(bytes(wire))
    session.bytes_sent = len(wire)
    session.duration_us = channel.transfer_time(len(wire))
    channel.bytes_sent += len(wire)
    try:
        ok, session.remote_crc = decode_reply(reply)
    except UplinkError:
        ok = False
    if ok and session.remote_crc == session.local_crc:
        sd.delete(session.name)
        session.result = UploadResult.ACKED
        logger.info("%s uploaded (%d bytes, crc %04X)", session.name, len(data), session.local_crc)
    else:
        session.result = UploadResult.CHECKSUM_MISMATCH
        logger.warning("%s: checksum mismatch (local %04X, remote %s), file kept", session.name,
                       session.local_crc,
                       "none" if session.remote_crc is None else f"{session.remote_crc:04X}")
    return session


# --- SMS ---

def serialize_frame_for_sms(frame: Frame) -> bytes:
    """[id:4 LE][len:1][payload]"""
    return pack_id(frame.id) + bytes([len(frame.payload)]) + frame.payload


class FrameStreamDecoder:
    """SMS の区切りとフレーム境界は一致しないのでバッファする"""

    def __init__(self, source: int = 0):
        self.source = source
        self.buffer = bytearray()

    def feed(self, data: bytes) -> List[Frame]:
        self.buffer.extend(data)
        frames = []
        while len(self.buffer) >= SMS_HEADER.size:
            raw_id, length = SMS_HEADER.unpack_from(self.buffer)
            end = SMS_HEADER.size + length
            if len(self.buffer) < end:
                break
            frames.append(Frame(unpack_id(raw_id), bytes(self.buffer[SMS_HEADER.size:end]),
                                self.source))
            del self.buffer[:end]
        return frames

    def close(self):
        if self.buffer:
            leftover = len(self.buffer)
            self.buffer.clear()
            raise TruncatedStream(f"{leftover} trailing bytes at end of session")


def deserialize(data: bytes, source: int = 0) -> List[Frame]:
    decoder = FrameStreamDecoder(source)
    frames = decoder.feed(data)
    decoder.close()
    return frames


def segment(data: bytes, size: int = SMS_SEGMENT_SIZE) -> List[bytes]:
    return [bytes(data[i:i + size]) for i in range(0, len(data), size)]


class SmsBridge:
    """
    SMS の往復（FIFO, 1 通ごとに latency）
    時刻は呼び出し側が渡し、到着時刻つきの区切りを返す
    """

    def __init__(self, segment_size: int = SMS_SEGMENT_SIZE, latency_us: int = SMS_LATENCY_US,
                 flush_delay_us: int = SMS_FLUSH_DELAY_US):
        if segment_size <= 0:
            raise UplinkError("segment size must be positive")
        self.segment_size = segment_size
        self.latency_us = latency_us
        self.flush_delay_us = flush_delay_us
        self.outbound = bytearray()
        self._out_free_at = 0
        self._in_free_at = 0
        self.segments_out = 0
        self.segments_in = 0

    def push(self, data: bytes, now: int) -> Optional[int]:
        """送信バッファに追加。空からの追加ならフラッシュ予定時刻を返す"""
        was_empty = not self.outbound
        self.outbound.extend(data)
        return now + self.flush_delay_us if was_empty else None

    def flush(self, now: int) -> List[Tuple[int, bytes]]:
        data, self.outbound = bytes(self.outbound), bytearray()
        return self._schedule(segment(data, self.segment_size), now, outbound=True)

    def send_inbound(self, data: bytes, now: int) -> List[Tuple[int, bytes]]:
        return self._schedule(segment(data, self.segment_size), now, outbound=False)

    def _schedule(self, segments: List[bytes], now: int, outbound: bool) -> List[Tuple[int, bytes]]:
        scheduled = []
        free_at = self._out_free_at if outbound else self._in_free_at
        for seg in segments:
            free_at = max(free_at, now) + self.latency_us
            scheduled.append((free_at, seg))
        if outbound:
            self._out_free_at = free_at
            self.segments_out += len(segments)
        else:
            self._in_free_at = free_at
            self.segments_in += len(segments)
        return scheduled


def activate_backup(sim) -> List[Frame]:
    """
    予備モデムへの切り替え
    1. 周期送信を全ノードで停止  2. SMS ノードに転送開始を指示
    """
    bridge_node = sim.sms_node
    if bridge_node is None or not bridge_node.alive:
        raise BackupUnavailable("SMS bridge node is not available")
    if sim.modem.connected:
        raise UplinkError("main modem is still connected")
    frames = [
        command_frame(Opcode.DISABLE_PERIODIC, BROADCAST_TARGET, source=bridge_node.id),
        command_frame(Opcode.ENABLE_FORWARDING, bridge_node.id, source=bridge_node.id),
    ]
    # 別々の SMS で送るので順序が保たれる
    for frame in frames:
        sim.send_sms([frame])
    sim.backup_requested = True
    logger.info("backup uplink activation sent over SMS")
    return frames
