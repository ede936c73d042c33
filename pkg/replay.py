"""
trace とアーカイブの突き合わせ
trace からファイル転送を除いたものが、ログに書かれているべきレコード列
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from bus import BusEvent, read_trace
from gateway import INDEX_NAME, Archive, is_log_name
from messages import TIMESTAMP, is_file_transfer
from nodes import LogRecord, iter_records

logger = logging.getLogger(__name__)


class FormatError(Exception):
    pass


@dataclass
class Divergence:
    file: str
    offset: int
    reason: str

    def __str__(self):
        return f"{self.file} @ byte {self.offset}: {self.reason}"


@dataclass
class FileAlignment:
    name: str
    records: int
    first_time_us: int
    last_time_us: int
    clock_offset_us: int


@dataclass
class Gap:
    start_us: int
    end_us: int
    events: List[BusEvent]

    def __len__(self):
        return len(self.events)


@dataclass
class ReplayReport:
    expected: int
    matched: int = 0
    files: List[FileAlignment] = field(default_factory=list)
    gaps: List[Gap] = field(default_factory=list)
    divergence: Optional[Divergence] = None

    @property
    def clean(self) -> bool:
        return self.divergence is None

    def to_dict(self) -> Dict:
        return {
            'clean': self.clean,
            'expected_records': self.expected,
            'matched_records': self.matched,
            'files': [{'name': f.name, 'records': f.records,
                       'first_s': f.first_time_us / 1e6, 'last_s': f.last_time_us / 1e6}
                      for f in self.files],
            'gaps': [{'start_s': g.start_us / 1e6, 'end_s': g.end_us / 1e6, 'records': len(g)}
                     for g in self.gaps],
            'divergence': None if self.divergence is None else str(self.divergence),
        }


def expected_log(trace: Sequence[BusEvent]) -> List[BusEvent]:
    return [event for event in trace if not is_file_transfer(event.frame.id)]


def _key(frame) -> Tuple:
    return frame.source, frame.id, frame.payload


def _match_length(records: List[LogRecord], expected: List[BusEvent], start: int) -> int:
    """expected[start:] にどこまで一致するか。時計のずれは一定（TIMESTAMP の直後だけ再推定）"""
    offset = None
    resync = True
    for k, record in enumerate(records):
        index = start + k
        if index >= len(expected):
            return k
        event = expected[index]
        if (record.source, record.frame_id, record.payload) != _key(event.frame):
            return k
        delta = record.timestamp_us - event.time
        if resync:
            offset = delta
        elif delta != offset:
            return k
        resync = record.frame_id == TIMESTAMP
    return len(records)


def _parse(name: str, data: bytes) -> Tuple[List[Tuple[int, LogRecord]], Optional[Divergence]]:
    records = []
    try:
        for offset, record in iter_records(data):
            records.append((offset, record))
    except ValueError as e:
        return records, Divergence(name, e.args[0], "record truncated")
    return records, None


def replay_verify(trace: Sequence[BusEvent], logs: Sequence[Tuple[str, bytes]]) -> ReplayReport:
    """
    ログファイルを trace に並べていき、最初の食い違いを返す

    ファイル同士の間で抜けたレコードは gap（ロガー停止中など）として数える
    """
    expected = expected_log(trace)
    report = ReplayReport(len(expected))
    parsed = []
    for name, data in logs:
        records, problem = _parse(name, data)
        if problem is not None:
            report.divergence = problem
            return report
        if records:
            parsed.append((records[0][1].timestamp_us, name, records))
    parsed.sort(key=lambda item: (item[0], item[1]))

    cursor = 0
    for _, name, entries in parsed:
        records = [record for _, record in entries]
        best_start, best_length = None, -1
        for start in range(cursor, len(expected)):
            if _key(expected[start].frame) != (records[0].source, records[0].frame_id,
                                               records[0].payload):
                continue
            length = _match_length(records, expected, start)
            if length > best_length:
                best_start, best_length = start, length
            if length == len(records):
                break
        if best_start is None:
            report.divergence = Divergence(name, 0, "first record does not occur in the trace")
            return report
        if best_length < len(records):
            record = records[best_length]
            report.divergence = Divergence(
                name, entries[best_length][0],
                f"record from node {record.source} id {record.frame_id.hex()} "
                f"does not follow the trace")
            report.matched += best_length
            return report
        if best_start > cursor:
            missing = expected[cursor:best_start]
            report.gaps.append(Gap(missing[0].time, missing[-1].time, list(missing)))
        first, last = expected[best_start], expected[best_start + len(records) - 1]
        report.files.append(FileAlignment(name, len(records), first.time, last.time,
                                          records[0].timestamp_us - first.time))
        report.matched += len(records)
        cursor = best_start + len(records)
    if cursor < len(expected):
        missing = expected[cursor:]
        report.gaps.append(Gap(missing[0].time, missing[-1].time, list(missing)))
    if report.clean:
        logger.info("replay clean: %d/%d records in %d files, %d gaps", report.matched,
                    report.expected, len(report.files), len(report.gaps))
    else:
        logger.warning("replay divergence: %s", report.divergence)
    return report


def load_archive_logs(archive_dir) -> List[Tuple[str, bytes]]:
    root = Path(archive_dir)
    if not (root / INDEX_NAME).exists():
        raise FormatError(f"{root} has no {INDEX_NAME}")
    archive = Archive(root)
    return [(name, archive.read(name)) for name in archive.names() if is_log_name(name)]


def replay_verify_files(trace_path, archive_dir) -> ReplayReport:
    try:
        trace = read_trace(trace_path)
    except (OSError, ValueError) as e:
        raise FormatError(f"trace {trace_path}: {e}") from None
    return replay_verify(trace, load_archive_logs(archive_dir))
