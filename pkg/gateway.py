"""
gateway サーバー
アップロードの CRC 検証とアーカイブ、サイト番号の管理、磁力計の正規化
"""
import bisect
import logging
import os
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from database import GatewayDB
from messages import reading_from_frame
from nodes import LogRecord, iter_records, log_seq
from sensors import (BiasCalibration, SensorError, SensorKind, SensorReading, Vector,
                     average_position, soft_iron_correct)
from transport import crc16
from uplink import MalformedUpload, decode_upload, encode_reply

logger = logging.getLogger(__name__)

DEFAULT_PORT = int(os.environ.get('DORI_GATEWAY_PORT', '7531'))
DEFAULT_ARCHIVE = os.environ.get('DORI_ARCHIVE_DIR', 'archive')
INDEX_NAME = "index.tsv"
MAX_UPLOAD = 64 * 1024 * 1024
ACTIVITY_LIMIT = 200


class GatewayError(Exception):
    """gateway 関連エラーの基底クラス"""


class TruncatedRecord(GatewayError):
    def __init__(self, offset: int, records: List):
        super().__init__(f"log truncated at byte {offset}")
        self.offset = offset
        self.records = records


class MissingCalibration(GatewayError):
    pass


class EmptyTimeline(GatewayError):
    pass


# --- アーカイブ ---

@dataclass(frozen=True)
class ArchiveEntry:
    name: str
    size: int
    crc: int
    received_ms: int

    def index_line(self) -> str:
        return f"{self.name}\t{self.size}\t{self.crc:04x}\t{self.received_ms}\n"

    @classmethod
    def from_index_line(cls, line: str) -> "ArchiveEntry":
        name, size, crc, received = line.rstrip("\n").split("\t")
        return cls(name, int(size), int(crc, 16), int(received))


class Archive:
    """受信したバイト列そのまま + 1 行 1 ファイルのインデックス"""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.entries: Dict[str, ArchiveEntry] = {}
        index = self.root / INDEX_NAME
        if index.exists():
            for line in index.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    entry = ArchiveEntry.from_index_line(line)
                    self.entries[entry.name] = entry

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def _unique_name(self, name: str) -> str:
        if name not in self.entries:
            return name
        base, ext = os.path.splitext(name)
        version = 2
        while f"{base}.v{version}{ext}" in self.entries:
            version += 1
        return f"{base}.v{version}{ext}"

    def store(self, name: str, data: bytes, received_ms: int) -> ArchiveEntry:
        with self._lock:
            stored = self._unique_name(name)
            if stored != name:
                logger.info("archive: %s already present, stored as %s", name, stored)
            (self.root / stored).write_bytes(data)
            entry = ArchiveEntry(stored, len(data), crc16(data), received_ms)
            with open(self.root / INDEX_NAME, "a", encoding="utf-8") as f:
                f.write(entry.index_line())
            self.entries[stored] = entry
            return entry

    def read(self, name: str) -> bytes:
        if name not in self.entries:
            raise KeyError(name)
        return (self.root / name).read_bytes()

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self.entries if name.startswith(prefix)]

    def verify(self) -> List[str]:
        """CRC が合わないファイル名"""
        bad = []
        for name, entry in self.entries.items():
            path = self.root / name
            if not path.exists() or crc16(path.read_bytes()) != entry.crc:
                bad.append(name)
        return bad


def is_log_name(name: str) -> bool:
    # LOG0001.BIN / LOG0001.v2.BIN
    return log_seq(name.split(".")[0] + ".BIN") is not None


# --- ログの取り込み ---

def ingest_log(data: bytes) -> List[Union[SensorReading, LogRecord]]:
    """センサー id は SensorReading に、それ以外はそのままのレコードとして返す"""
    records: List[Union[SensorReading, LogRecord]] = []
    try:
        for _, record in iter_records(data):
            reading = None
            try:
                reading = reading_from_frame(record.to_frame(), record.timestamp_us / 1e6)
            except (SensorError, ValueError) as e:
                logger.debug("record kept opaque: %s", e)
            records.append(reading if reading is not None else record)
    except ValueError as e:
        raise TruncatedRecord(e.args[0], records) from None
    return records


# --- アームとサイト ---

class ArmTimeline:
    def __init__(self):
        self.times: List[float] = []
        self.angles: List[float] = []

    def __len__(self):
        return len(self.times)

    def add(self, timestamp: float, angle: float):
        index = bisect.bisect_left(self.times, timestamp)
        if index < len(self.times) and self.times[index] == timestamp:
            self.angles[index] = angle
            return
        self.times.insert(index, timestamp)
        self.angles.insert(index, angle)

    def angle_at(self, timestamp: float) -> float:
        """時間で線形補間、範囲外は最寄りのサンプル"""
        if not self.times:
            raise EmptyTimeline("no arm position recorded")
        return float(np.interp(timestamp, self.times, self.angles))


@dataclass(frozen=True)
class NormalizedMagnetometer:
    timestamp: float
    source: int
    raw: Vector
    corrected: Optional[Vector]
    arm_angle: Optional[float]


def normalize_magnetometer(reading: SensorReading, arm_timeline: ArmTimeline,
                           cal: Optional[BiasCalibration]) -> NormalizedMagnetometer:
    if cal is None:
        raise MissingCalibration("no magnetometer calibration loaded")
    angle = arm_timeline.angle_at(reading.timestamp)
    corrected = soft_iron_correct(reading.value, angle, cal)
    return NormalizedMagnetometer(reading.timestamp, reading.source, tuple(reading.value),
                                  corrected, angle)


@dataclass
class Site:
    site_id: int
    start_time: float
    end_time: Optional[float] = None
    fixes: List[Tuple[float, float, float]] = field(default_factory=list)

    def contains(self, timestamp: float) -> bool:
        return self.start_time <= timestamp and (self.end_time is None or timestamp < self.end_time)

    @property
    def position(self) -> Optional[Tuple[float, float]]:
        if not self.fixes:
            return None
        return average_position([(lat, lon) for _, lat, lon in self.fixes])

    def to_dict(self) -> Dict:
        position = self.position
        return {
            'site_id': self.site_id,
            'start_time': self.start_time,
            'end_time': self.end_time,
            'latitude': position[0] if position else None,
            'longitude': position[1] if position else None,
            'fixes': len(self.fixes),
        }


class SiteRegistry:
    """ドライブコマンドの間にいる場所がサイト（1 から連番）"""

    def __init__(self, start_time: float = 0.0):
        self.sites: List[Site] = [Site(1, start_time)]

    @property
    def current(self) -> Site:
        return self.sites[-1]

    def register_drive_command(self, time: float) -> Site:
        current = self.current
        if time < current.start_time:
            raise GatewayError(f"drive command at {time} precedes site {current.site_id} start")
        current.end_time = time
        site = Site(current.site_id + 1, time)
        self.sites.append(site)
        logger.info("site %d closed, site %d opened at %.3f", current.site_id, site.site_id, time)
        return site

    def site_at(self, timestamp: float) -> Site:
        for site in self.sites:
            if site.contains(timestamp):
                return site
        return self.sites[0]

    def add_fix(self, timestamp: float, latitude: float, longitude: float) -> Site:
        site = self.site_at(timestamp)
        site.fixes.append((timestamp, latitude, longitude))
        return site


# --- gateway 本体 ---

class Gateway:
    def __init__(self, archive_root=DEFAULT_ARCHIVE, calibration: Optional[BiasCalibration] = None,
                 db: Optional[GatewayDB] = None, site_start: float = 0.0):
        self.archive = Archive(archive_root)
        self.calibration = calibration
        self.db = db
        self.sites = SiteRegistry(site_start)
        self.timeline = ArmTimeline()
        self.magnetometer: List[NormalizedMagnetometer] = []
        self.activity = deque(maxlen=ACTIVITY_LIMIT)
        self.acked = 0
        self.nacked = 0
        self.readings = 0
        self._lock = threading.RLock()
        if self.db:
            self.db.save_site(1, site_start)

    def log_activity(self, action: str, when_ms: Optional[int] = None):
        when = datetime.fromtimestamp((when_ms if when_ms is not None else time.time() * 1000) / 1000,
                                      tz=timezone.utc)
        self.activity.append(f"{when.strftime('%Y-%m-%d %H:%M:%S')} - {action}")

    def receive_upload(self, wire: bytes, received_ms: Optional[int] = None) -> bytes:
        """CRC が末尾の値と一致したときだけアーカイブして ack"""
        if received_ms is None:
            received_ms = int(time.time() * 1000)
        with self._lock:
            try:
                name, data, sent_crc = decode_upload(wire)
            except MalformedUpload as e:
                self.nacked += 1
                logger.warning("malformed upload (%d bytes): %s", len(wire), e)
                self.log_activity(f"nack: malformed upload ({e})", received_ms)
                return encode_reply(False, 0)
            crc = crc16(data)
            if crc != sent_crc:
                self.nacked += 1
                logger.warning("%s: crc %04X != sent %04X, not archived", name, crc, sent_crc)
                self.log_activity(f"nack: {name} crc mismatch", received_ms)
                return encode_reply(False, crc)
            entry = self.archive.store(name, data, received_ms)
            self.acked += 1
            self.log_activity(f"ack: {entry.name} ({entry.size} bytes)", received_ms)
            if is_log_name(entry.name):
                self.process_log(entry.name, data)
            return encode_reply(True, crc)

    def process_log(self, name: str, data: bytes) -> int:
        try:
            records = ingest_log(data)
        except TruncatedRecord as e:
            logger.warning("%s: %s, %d records kept", name, e, len(e.records))
            records = e.records
        readings = [r for r in records if isinstance(r, SensorReading)]
        for reading in readings:
            if reading.sensor is SensorKind.ARM_ANGLE:
                self.timeline.add(reading.timestamp, reading.value)
            elif reading.sensor is SensorKind.POSITION:
                lat, lon = reading.value
                site = self.sites.add_fix(reading.timestamp, lat, lon)
                if self.db:
                    self.db.add_fix(reading.timestamp, lat, lon, site.site_id, reading.source)
        for reading in readings:
            if reading.sensor is SensorKind.MAG:
                self._store_magnetometer(reading)
        self.readings += len(readings)
        logger.debug("%s: %d readings ingested", name, len(readings))
        return len(readings)

    def _store_magnetometer(self, reading: SensorReading):
        try:
            row = normalize_magnetometer(reading, self.timeline, self.calibration)
        except (MissingCalibration, EmptyTimeline) as e:
            logger.warning("magnetometer reading stored raw: %s", e)
            row = NormalizedMagnetometer(reading.timestamp, reading.source, tuple(reading.value),
                                         None, None)
        self.magnetometer.append(row)
        if self.db:
            self.db.add_magnetometer(row.timestamp, row.source, row.raw, row.corrected,
                                     row.arm_angle)

    def register_drive_command(self, time_s: float) -> Site:
        with self._lock:
            closed = self.sites.current
            site = self.sites.register_drive_command(time_s)
            self.log_activity(f"drive: site {closed.site_id} closed, site {site.site_id} opened",
                              int(time_s * 1000))
            if self.db:
                position = closed.position
                self.db.save_site(closed.site_id, closed.start_time, closed.end_time,
                                  *(position or (None, None)))
                self.db.save_site(site.site_id, site.start_time)
            return site

    def summary(self) -> Dict:
        with self._lock:
            return {
                'archived': len(self.archive.entries),
                'acked': self.acked,
                'nacked': self.nacked,
                'readings': self.readings,
                'current_site': self.sites.current.site_id,
                'magnetometer_rows': len(self.magnetometer),
                'calibrated': self.calibration is not None,
            }


# --- TCP ---

class UploadHandler(socketserver.StreamRequestHandler):
    def handle(self):
        chunks = []
        size = 0
        while True:
            chunk = self.rfile.read1(65536) if hasattr(self.rfile, "read1") else self.rfile.read(65536)
            if not chunk:
                break
            size += len(chunk)
            if size > MAX_UPLOAD:
                logger.warning("upload from %s exceeds %d bytes", self.client_address[0], MAX_UPLOAD)
                self.wfile.write(encode_reply(False, 0))
                return
            chunks.append(chunk)
        reply = self.server.gateway.receive_upload(b"".join(chunks))
        self.wfile.write(reply)


class GatewayServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, gateway: Gateway):
        super().__init__(address, UploadHandler)
        self.gateway = gateway


def start_gateway_server(gateway: Gateway, host: str = "127.0.0.1",
                         port: int = DEFAULT_PORT) -> GatewayServer:
    """別スレッドで待ち受け開始（port=0 で空きポート）"""
    server = GatewayServer((host, port), gateway)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    logger.info("gateway listening on %s:%d", *server.server_address[:2])
    return server
