#!/usr/bin/env python3
import copy

import pytest

from cli import verify_run
from gateway import Gateway
from messages import (BROADCAST_TARGET, COMMAND, CTS, POWER_ALARM, Opcode, is_file_transfer,
                      parse_command, parse_cts, sensor_kind_of)
from nodes import Behavior, CameraProgram, CrcMismatch, NodeMode
from scenario import parse_scenario
from sensors import SensorKind
from simulation import Simulation, SimulationError
from transport import CtsTimeout

SUITE = {"id": 1, "name": "suite", "behavior": "sensor_suite",
         "sensors": [{"name": "air", "kind": "temperature", "period": 1,
                      "source": {"type": "sine", "mean": 20.0, "amplitude": 5.0,
                                 "period": 60, "noise": 0.2}}]}
LOGGER = {"id": 2, "name": "logger", "behavior": "logger"}
CAMERA = {"id": 3, "name": "camera", "behavior": "camera"}
UPLINK = {"id": 4, "name": "uplink", "behavior": "uplink"}
SMS = {"id": 5, "name": "sms", "behavior": "sms_bridge"}
DRIVE = {"id": 6, "name": "drive", "behavior": "output", "devices": ["drive_left", "drive_right"]}


def build(tmp_path, nodes, name="archive", **extra):
    data = {"duration": 10, "seed": 11, "nodes": copy.deepcopy(nodes)}
    data.update(extra)
    return Simulation(parse_scenario(data), Gateway(tmp_path / name))


def frames_from(sim, source, frame_id=None):
    return [e for e in sim.trace if e.frame.source == source
            and (frame_id is None or e.frame.id == frame_id)]


def test_one_second_sensor_gives_ten_readings(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER])
    report = sim.run()
    assert len(frames_from(sim, 1)) == 10
    assert report['records_logged'] == 10
    assert report['records_dropped'] == 0
    assert report['duration_s'] == 10.0


def test_two_periods_share_the_bus(tmp_path):
    a = copy.deepcopy(SUITE)
    a["sensors"][0]["period"] = 2
    b = copy.deepcopy(SUITE)
    b.update(id=7, name="suite2")
    b["sensors"][0]["period"] = 3
    sim = build(tmp_path, [a, b, LOGGER], duration=12)
    sim.run()
    assert len(frames_from(sim, 1)) == 6
    assert len(frames_from(sim, 7)) == 4
    times = [e.time for e in sim.trace]
    assert times == sorted(times)


def test_runs_are_deterministic(tmp_path):
    nodes = [SUITE, LOGGER, CAMERA, UPLINK]
    first = build(tmp_path, nodes, "a")
    second = build(tmp_path, nodes, "b")
    report_a, report_b = first.run(), second.run()
    assert [e.trace_line() for e in first.trace] == [e.trace_line() for e in second.trace]
    assert report_a == report_b


def test_schedule_rejects_the_past(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER])
    sim.advance(2_000_000)
    with pytest.raises(SimulationError):
        sim.schedule(1_000_000, lambda now: None)
    with pytest.raises(SimulationError):
        sim.advance(1_000_000)


def test_logs_are_uploaded_and_replay_clean(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK], uplink={"upload_interval": 4})
    report = sim.run()
    assert report['uploads']['acked'] == 3
    assert sorted(sim.gateway.archive.names("LOG")) == ["LOG0001.BIN", "LOG0002.BIN",
                                                        "LOG0003.BIN"]
    assert sim.nodes[2].sd.names("LOG") == []
    assert verify_run(sim, report) == []
    assert report['replay']['matched_records'] == report['records_logged']


def test_corrupted_upload_is_retried(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK],
                faults=[{"time": 4, "kind": "CorruptUploadByte", "offset": 3}],
                actions=[{"time": 5, "action": "upload"}])
    report = sim.run()
    assert report['uploads'] == {"acked": 2, "checksum_mismatch": 1, "modem_failed": 0}
    assert sim.gateway.nacked == 1
    assert sorted(sim.gateway.archive.names("LOG")) == ["LOG0001.BIN", "LOG0002.BIN"]
    assert verify_run(sim, report) == []


def test_failover_turns_camera_into_logger(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, CAMERA, UPLINK],
                faults=[{"time": 3, "kind": "KillNode", "target": "logger"}],
                actions=[{"time": 4, "action": "failover", "dead": "logger", "camera": "camera"}])
    report = sim.run()
    [failover] = report['failovers']
    assert failover['state'] == "done"
    # イメージが SD に届くまで 2.548 s、バスでの書き換えに約 1.1 s
    assert 6.5 < failover['finished_s'] < 8.5
    camera = sim.nodes[3]
    assert camera.behavior is Behavior.LOGGER and camera.version == 2
    assert sim.nodes[2].mode is NodeMode.DEAD
    assert frames_from(sim, 2) == []
    # 停止中のレコードだけが欠け、ロガーのいない時間で説明できる
    assert verify_run(sim, report) == []
    replay = report['replay']
    assert replay['clean']
    assert len(replay['files']) == 2
    assert replay['gaps']


def test_failover_requires_a_dead_logger(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, CAMERA, UPLINK],
                actions=[{"time": 2, "action": "failover", "dead": "logger", "camera": "camera"}])
    report = sim.run()
    assert report['failovers'] == []
    assert len(report['action_errors']) == 1
    assert "still alive" in report['action_errors'][0]


def test_brown_out_sends_one_final_frame_per_node(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, CAMERA, UPLINK],
                power={"capacity_ah": 1, "battery_logic": 11.05, "tick": 1},
                faults=[{"time": 0.5, "kind": "BatteryDrain", "watts": 2000, "duration": 9}])
    report = sim.run()
    assert report['power']['brown_outs'] == 1
    alarms = [e for e in sim.trace if e.frame.id == POWER_ALARM]
    assert sorted(e.frame.source for e in alarms) == [1, 2, 3, 4]
    assert all(node.mode is NodeMode.HIBERNATE for node in sim.nodes.values())
    # 最後の信号は全部ロガーに残る
    assert report['records_logged'] == len(sim.trace)
    assert max(e.time for e in sim.trace) < 2_000_000


def test_sms_backup_round_trip(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK, SMS],
                uplink={"sms_latency": 0.5},
                faults=[{"time": 1, "kind": "FailMainModem"}],
                actions=[{"time": 2, "action": "activate_backup"},
                         {"time": 4, "action": "command", "opcode": "request_sensor",
                          "target": "suite", "args": [SensorKind.TEMPERATURE.code]}])
    report = sim.run()
    assert report['action_errors'] == []
    assert sim.backup_active
    commands = [parse_command(e.frame).opcode for e in sim.trace if e.frame.id == COMMAND]
    assert commands[:2] == [Opcode.DISABLE_PERIODIC, Opcode.ENABLE_FORWARDING]
    # 周期送信は止まっているが、要求には答える
    suite_times = [e.time for e in frames_from(sim, 1)]
    assert [t for t in suite_times if 3_000_000 <= t < 4_500_000] == []
    assert any(t > 4_500_000 for t in suite_times)
    readings = [f for _, f in sim.operator_frames if f.source == 1]
    assert readings and sensor_kind_of(readings[0].id) is SensorKind.TEMPERATURE
    assert all(t > 4_500_000 for t, f in sim.operator_frames if f.source == 1)


def test_command_without_any_uplink_is_dropped(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK],
                faults=[{"time": 1, "kind": "FailMainModem"}],
                actions=[{"time": 2, "action": "command", "opcode": "request_status",
                          "target": "suite"}])
    report = sim.run()
    assert report['commands_dropped'] == 1
    assert [e for e in sim.trace if e.frame.id == COMMAND] == []


def test_drive_over_main_modem_opens_a_site(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK, DRIVE],
                actions=[{"time": 2, "action": "drive", "target": "drive",
                          "device": "drive_left", "command": "forward"}])
    sim.run()
    assert sim.nodes[6].devices["drive_left"].motion == "forward"
    [event] = [e for e in sim.trace if e.frame.id == COMMAND]
    assert event.frame.source == 4
    assert 2_500_000 <= event.time < 2_600_000
    assert sim.gateway.sites.current.site_id == 2


def test_sd_full_drops_records_and_raises_alarm(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER], faults=[{"time": 5, "kind": "SdFull",
                                                   "target": "logger", "remaining": 0}])
    report = sim.run()
    assert report['records_dropped'] > 0
    assert report['records_logged'] + report['records_dropped'] == len(sim.trace)


def test_command_to_all_is_broadcast(tmp_path):
    sim = build(tmp_path, [SUITE, LOGGER, UPLINK],
                actions=[{"time": 2, "action": "command", "opcode": "request_status",
                          "target": "all"}])
    report = sim.run()
    assert report['action_errors'] == []
    [event] = [e for e in sim.trace if e.frame.id == COMMAND]
    command = parse_command(event.frame)
    assert command.opcode is Opcode.REQUEST_STATUS and command.target == BROADCAST_TARGET


def test_vanished_onewire_sensor_does_not_stop_the_run(tmp_path):
    suite = copy.deepcopy(SUITE)
    suite["sensors"][0]["source"] = {"type": "onewire", "devices": ["28FF000012345601"]}
    sim = build(tmp_path, [suite, LOGGER])
    # 配線後にセンサーが外れた
    sim.nodes[1].sensors["air"].source.channel = 3
    report = sim.run()
    assert frames_from(sim, 1) == []
    assert report['records_logged'] == 0
    assert report['duration_s'] == 10.0


def test_reflash_is_staged_on_sd_before_the_bus(tmp_path):
    sim = build(tmp_path, [SUITE, CAMERA, UPLINK],
                actions=[{"time": 1, "action": "reflash", "target": "camera",
                          "behavior": "logger", "version": 2, "size": 1024}])
    report = sim.run()
    [reflash] = report['reflashes']
    assert reflash == {'target': 3, 'state': "done", 'error': None}
    enter = [e for e in sim.trace if e.frame.id == COMMAND
             and parse_command(e.frame).opcode is Opcode.ENTER_REFLASH]
    # 1 s + 0.5 s の遅延 + 1024 バイト / 2000 B/s
    assert enter and enter[0].time >= 2_012_000
    assert sim.nodes[3].behavior is Behavior.LOGGER and sim.nodes[3].version == 2
    assert sim.nodes[4].sd.names("FW") == []


def test_corrupted_image_is_rejected_before_flashing(tmp_path):
    sim = build(tmp_path, [SUITE, CAMERA, UPLINK],
                actions=[{"time": 1, "action": "reflash", "target": "camera",
                          "behavior": "logger", "size": 1024, "corrupt": True}])
    sim.run()
    [session] = sim.reflash_sessions
    assert session.state == "failed"
    assert isinstance(session.error.reason, CrcMismatch)
    assert session.started_at is None
    # 書き換えのフレームは一つもバスに出ない
    assert [e for e in sim.trace if e.frame.id == COMMAND] == []
    assert not any(is_file_transfer(e.frame.id) for e in sim.trace)
    camera = sim.nodes[3]
    assert camera.behavior is Behavior.CAMERA and camera.version == 1
    assert sim.nodes[4].sd.names("FW") == []


def test_withheld_cts_aborts_and_keeps_old_firmware(tmp_path, monkeypatch):
    sim = build(tmp_path, [SUITE, CAMERA, UPLINK],
                actions=[{"time": 1, "action": "reflash", "target": "camera",
                          "behavior": "logger", "version": 2, "size": 1024}])
    camera = sim.nodes[3]
    send = camera.send

    def withhold_cts(frame):
        # チャンク 5 以降は CTS を返さない
        index = parse_cts(frame)
        if index is not None and index >= 5:
            return
        send(frame)

    monkeypatch.setattr(camera, "send", withhold_cts)
    sim.run()
    [session] = sim.reflash_sessions
    assert session.state == "failed"
    assert isinstance(session.error.reason, CtsTimeout)
    assert session.error.reason.index == 5

    [last_cts] = [e for e in frames_from(sim, 3, CTS) if parse_cts(e.frame) == 4]
    aborts = [e for e in frames_from(sim, 4, COMMAND)
              if parse_command(e.frame).opcode is Opcode.ABORT_REFLASH]
    assert len(aborts) == 1
    assert last_cts.time + 1_000_000 <= aborts[0].time <= last_cts.time + 1_050_000
    assert parse_command(aborts[0].frame).target == 3
    assert not [e for e in frames_from(sim, 4, COMMAND)
                if parse_command(e.frame).opcode is Opcode.FINALIZE_REFLASH]

    assert camera.mode is NodeMode.NORMAL
    assert camera.behavior is Behavior.CAMERA and camera.version == 1
    assert isinstance(camera.program, CameraProgram) and camera.program.active
