#!/usr/bin/env python3
import copy
import json

import pytest

from messages import BROADCAST_TARGET, Opcode
from nodes import Behavior, HBridgeCommand
from scenario import ConfigError, FaultKind, load_scenario, parse_scenario
from sensors import SensorKind

BASE = {
    "duration": 10,
    "seed": 7,
    "nodes": [
        {"id": 1, "name": "suite", "behavior": "sensor_suite",
         "sensors": [{"name": "air", "kind": "temperature", "period": 1,
                      "source": {"type": "constant", "value": 21.0},
                      "filter": {"type": "rolling", "window": 4}}]},
        {"id": 2, "name": "logger", "behavior": "logger"},
        {"id": 3, "name": "camera", "behavior": "camera"},
        {"id": 4, "name": "uplink", "behavior": "uplink"},
    ],
}


def scenario_with(**changes):
    data = copy.deepcopy(BASE)
    data.update(changes)
    return data


def config_error(data) -> ConfigError:
    with pytest.raises(ConfigError) as excinfo:
        parse_scenario(data)
    return excinfo.value


def test_minimal_scenario():
    scenario = parse_scenario(BASE)
    assert scenario.duration_us == 10_000_000
    assert scenario.seed == 7
    suite = scenario.node(1)
    assert suite.behavior is Behavior.SENSOR_SUITE
    assert suite.sd_capacity is None
    [sensor] = suite.sensors
    assert sensor.kind is SensorKind.TEMPERATURE and sensor.period_us == 1_000_000
    # ロガー・カメラ・アップリンクは SD 付き
    assert scenario.node(2).sd_capacity == 4 * 1024 * 1024
    assert scenario.uplink.gateway == "embedded"
    assert scenario.power is None


def test_faults_and_actions_resolve_node_names():
    scenario = parse_scenario(scenario_with(
        faults=[{"time": 3, "kind": "KillNode", "target": "logger"},
                {"time": 4, "kind": "FailMainModem", "recover_after": 2},
                {"time": 5, "kind": "BatteryDrain", "watts": 40, "duration": 3}],
        actions=[{"time": 4, "action": "failover", "dead": "logger", "camera": 3},
                 {"time": 6, "action": "command", "opcode": "request_status", "target": "suite",
                  "args": [2, 0]},
                 {"time": 7, "action": "drive", "target": "suite", "device": "drive_left",
                  "command": "forward"}]))
    kill, modem, drain = scenario.faults
    assert kill.kind is FaultKind.KILL_NODE and kill.target == 2 and kill.time_us == 3_000_000
    assert modem.params["recover_after_us"] == 2_000_000
    assert drain.params == {"watts": 40.0, "duration_us": 3_000_000, "rail": "logic"}
    failover, command, drive = scenario.actions
    assert failover.params == {"dead": 2, "camera": 3}
    assert command.params["opcode"] is Opcode.REQUEST_STATUS
    assert command.params["args"] == b"\x02\x00"
    assert drive.params["command"] is HBridgeCommand.FORWARD


def test_error_paths_name_the_field():
    bad_node = copy.deepcopy(BASE)
    bad_node["nodes"][0]["sensors"][0]["kind"] = "plasma"
    assert config_error(bad_node).field == "nodes[0].sensors[0].kind"

    bad_source = copy.deepcopy(BASE)
    bad_source["nodes"][0]["sensors"][0]["source"]["type"] = "telepathy"
    assert config_error(bad_source).field == "nodes[0].sensors[0].source.type"

    bad_filter = copy.deepcopy(BASE)
    bad_filter["nodes"][0]["sensors"][0]["filter"] = {"type": "rolling", "window": 0}
    assert config_error(bad_filter).field == "nodes[0].sensors[0].filter"

    assert config_error(scenario_with(duration=-1)).field == "duration"
    assert config_error(scenario_with(
        faults=[{"time": 1, "kind": "KillNode", "target": "nobody"}])).field == "faults[0].target"
    assert config_error(scenario_with(
        faults=[{"time": 11, "kind": "KillNode", "target": 2}])).field == "faults[0].time"
    assert config_error(scenario_with(
        faults=[{"time": 1, "kind": "Meteor"}])).field == "faults[0].kind"
    assert config_error(scenario_with(
        actions=[{"time": 1, "action": "command", "opcode": "self_destruct"}])).field == \
        "actions[0].opcode"
    assert config_error(scenario_with(
        actions=[{"time": 1, "action": "reflash", "target": 2, "behavior": "logger",
                  "size": 100000}])).field == "actions[0].size"


def test_structural_errors():
    duplicate = copy.deepcopy(BASE)
    duplicate["nodes"][1]["id"] = 1
    assert config_error(duplicate).field == "nodes[1].id"
    assert config_error(scenario_with(nodes=[])).field == "nodes"
    out_of_range = copy.deepcopy(BASE)
    out_of_range["nodes"][0]["id"] = 255
    assert config_error(out_of_range).field == "nodes[0].id"
    assert config_error(scenario_with(world={"gravity": 3})).field == "world.gravity"
    no_sd = scenario_with(faults=[{"time": 1, "kind": "SdFull", "target": "suite"}])
    assert config_error(no_sd).field == "faults[0].target"


def test_power_section():
    scenario = parse_scenario(scenario_with(power={"capacity_ah": 20, "battery_logic": 11.8,
                                                   "solar_schedule": [[0, 0], [10, 20]]}))
    assert scenario.power.config.capacity_ah == 20.0
    assert scenario.power.battery_logic == 11.8
    assert scenario.power.solar_schedule == [(0.0, 0.0), (10.0, 20.0)]
    assert config_error(scenario_with(power={"capacity_ah": 0})).field == "power"


def test_load_scenario_reports_json_position(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text('{\n  "duration": 10,\n  "nodes": [,]\n}', encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        load_scenario(path)
    assert excinfo.value.line == 3

    path.write_text(json.dumps(BASE), encoding="utf-8")
    assert load_scenario(str(path)).seed == 7
    assert load_scenario(json.dumps(BASE)).node(4).behavior is Behavior.UPLINK


def test_target_all_means_broadcast():
    scenario = parse_scenario(scenario_with(actions=[
        {"time": 1, "action": "command", "opcode": "request_status", "target": "all"},
        {"time": 2, "action": "capture_image", "target": "all"}]))
    assert [a.params["target"] for a in scenario.actions] == [BROADCAST_TARGET, BROADCAST_TARGET]
    # 一斉送信できない操作では設定エラー
    assert config_error(scenario_with(actions=[
        {"time": 1, "action": "drive", "target": "all", "device": "drive_left",
         "command": "forward"}])).field == "actions[0].target"
    assert config_error(scenario_with(actions=[
        {"time": 1, "action": "reflash", "target": "all", "behavior": "logger"}])).field == \
        "actions[0].target"
    assert config_error(scenario_with(actions=[
        {"time": 1, "action": "failover", "dead": "all", "camera": "camera"}])).field == \
        "actions[0].dead"


def test_onewire_channel_must_exist_on_the_network():
    data = copy.deepcopy(BASE)
    data["nodes"][0]["sensors"][0]["source"] = {"type": "onewire", "devices": ["28FF000012345601"],
                                                "channel": 3}
    assert config_error(data).field == "nodes[0].sensors[0].source.channel"
    # 同じ ID は 1 台として数える
    data["nodes"][0]["sensors"][0]["source"]["devices"] = ["28FF000012345601", "28ff000012345601"]
    data["nodes"][0]["sensors"][0]["source"]["channel"] = 1
    assert config_error(data).field == "nodes[0].sensors[0].source.channel"
    data["nodes"][0]["sensors"][0]["source"]["devices"] = ["28FF000012345601", "zz"]
    assert config_error(data).field == "nodes[0].sensors[0].source.devices[1]"
    data["nodes"][0]["sensors"][0]["source"]["devices"] = ["28FF000012345601", 0x28FF000012345602]
    assert parse_scenario(data).node(1).sensors[0].source["channel"] == 1
