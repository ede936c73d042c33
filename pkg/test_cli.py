#!/usr/bin/env python3
import json

import pytest

from cli import EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, main
from database import GatewayDB

SCENARIO = {
    "duration": 5,
    "seed": 3,
    "nodes": [
        {"id": 1, "name": "suite", "behavior": "sensor_suite",
         "sensors": [{"name": "air", "kind": "temperature", "period": 1,
                      "source": {"type": "sine", "mean": 15.0, "amplitude": 2.0,
                                 "period": 30, "noise": 0.5}}]},
        {"id": 2, "name": "logger", "behavior": "logger"},
        {"id": 4, "name": "uplink", "behavior": "uplink"},
    ],
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "scenario.json").write_text(json.dumps(SCENARIO), encoding="utf-8")
    return tmp_path


def run(workdir, *extra):
    return main(["run", str(workdir / "scenario.json"), "--trace", str(workdir / "trace.csv"),
                 "--archive", str(workdir / "archive"), *extra])


def test_run_writes_trace_and_report(workdir):
    assert run(workdir, "--report", str(workdir / "report.json")) == EXIT_OK
    report = json.loads((workdir / "report.json").read_text(encoding="utf-8"))
    assert report['violations'] == []
    assert report['replay']['clean']
    lines = (workdir / "trace.csv").read_text().splitlines()
    assert len(lines) == 1 + report['frames_delivered']


def test_run_refuses_used_archive(workdir):
    assert run(workdir) == EXIT_OK
    assert run(workdir) == EXIT_CONFIG


def test_run_config_errors(workdir):
    assert main(["run", str(workdir / "missing.json")]) == EXIT_CONFIG
    (workdir / "broken.json").write_text('{"duration": 5,', encoding="utf-8")
    assert main(["run", str(workdir / "broken.json")]) == EXIT_CONFIG
    bad = dict(SCENARIO, uplink={"gateway": "udp://nowhere:1"})
    (workdir / "bad.json").write_text(json.dumps(bad), encoding="utf-8")
    assert main(["run", str(workdir / "bad.json"), "--archive", str(workdir / "a2")]) == EXIT_CONFIG


def test_replay_verify(workdir):
    assert run(workdir) == EXIT_OK
    trace, archive = str(workdir / "trace.csv"), str(workdir / "archive")
    assert main(["replay-verify", trace, archive]) == EXIT_OK

    # 途中のレコードを書き換えると食い違いになる
    lines = (workdir / "trace.csv").read_text().splitlines()
    fields = lines[3].split(",")
    fields[4] = "00" * int(fields[3])
    lines[3] = ",".join(fields)
    (workdir / "tampered.csv").write_text("\n".join(lines) + "\n")
    assert main(["replay-verify", str(workdir / "tampered.csv"), archive]) == EXIT_VIOLATION

    assert main(["replay-verify", trace, str(workdir / "empty")]) == EXIT_CONFIG


def test_status_unreachable():
    assert main(["status", "http://127.0.0.1:9"]) == EXIT_VIOLATION


def test_backup_exports_the_gateway_database(tmp_path):
    db_path = str(tmp_path / "gw.db")
    db = GatewayDB(db_path)
    db.save_site(1, 0.0, latitude=35.1, longitude=139.2)
    db.add_fix(1.0, 35.1, 139.2, 1)
    db.add_magnetometer(2.0, 3, (50.0, 50.0, 50.0))
    out = tmp_path / "backup.json"
    assert main(["backup", "--db", db_path, "--out", str(out)]) == EXIT_OK
    data = json.loads(out.read_text(encoding="utf-8"))
    assert [s['site_id'] for s in data['sites']] == [1]
    assert [f['latitude'] for f in data['fixes']] == [35.1]
    assert data['magnetometer'][0]['raw'] == [50.0, 50.0, 50.0]
    assert data['magnetometer'][0]['calibrated'] is False

    # データベースが無ければ作らずに設定エラー
    missing = tmp_path / "missing.db"
    assert main(["backup", "--db", str(missing)]) == EXIT_CONFIG
    assert not missing.exists()
