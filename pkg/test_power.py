#!/usr/bin/env python3
import pytest

from power import (BROWN_OUT_V, RECOVER_V, PowerConfig, PowerError, PowerEvent, PowerState, bridge,
                   power_step, solar_at, unbridge)


def test_idle_battery_holds_voltage():
    state, events = power_step(PowerState(12.2, 12.4), {}, 0.0, 60.0)
    assert state.battery_logic == pytest.approx(12.2)
    assert state.battery_power == pytest.approx(12.4)
    assert events == []


def test_brown_out_is_reported_once():
    state = PowerState(11.05, 12.5)
    # 100 W を 10 分で 11.0 V を割る
    state, events = power_step(state, {"logic": 100.0}, 0.0, 600.0)
    assert state.battery_logic < BROWN_OUT_V
    assert events == [PowerEvent.BROWN_OUT]
    assert state.browned_out
    state, events = power_step(state, {"logic": 100.0}, 0.0, 600.0)
    assert events == []


def test_recovery_needs_hysteresis():
    # 11.0 V と 11.5 V の間では状態が変わらない
    state, events = power_step(PowerState(11.2, 12.5, browned_out=True), {}, 0.0, 1.0)
    assert events == [] and state.browned_out
    state, events = power_step(PowerState(10.99, 12.5, browned_out=True), {}, 1000.0, 3600.0)
    assert state.battery_logic > RECOVER_V
    assert events == [PowerEvent.RECOVERED]
    assert not state.browned_out


def test_solar_is_split_between_batteries():
    cfg = PowerConfig(solar_share_logic=1.0)
    state, _ = power_step(PowerState(11.5, 11.5), {}, 100.0, 3600.0, cfg)
    assert state.battery_logic > 11.5
    assert state.battery_power == pytest.approx(11.5)


def test_bridge_feeds_logic_from_power_battery():
    state = bridge(PowerState(10.8, 12.5))
    assert state.bridged
    assert state.battery_logic == pytest.approx(12.5)
    assert state.logic_cell == 10.8
    assert bridge(state) is state

    loaded = bridge(PowerState(10.8, 12.5), PowerConfig(bridge_resistance=1.0), logic_load=25.0)
    assert loaded.battery_logic == pytest.approx(12.5 - 2.0)

    stepped, events = power_step(state, {"logic": 10.0}, 0.0, 60.0)
    assert stepped.bridged and events == []
    # 非接続の電池は放電しない
    assert stepped.logic_cell == 10.8
    assert unbridge(stepped).battery_logic == 10.8
    assert not unbridge(stepped).bridged


def test_invalid_inputs():
    with pytest.raises(PowerError):
        power_step(PowerState(12.0, 12.0), {}, 0.0, 0.0)
    with pytest.raises(PowerError):
        PowerState(-1.0, 12.0)
    with pytest.raises(PowerError):
        PowerConfig(capacity_ah=0.0)
    with pytest.raises(PowerError):
        PowerConfig(solar_share_logic=1.5)


def test_solar_schedule():
    schedule = [(0.0, 0.0), (100.0, 10.0)]
    assert solar_at(schedule, 50.0, 99.0) == 5.0
    assert solar_at(schedule, 500.0, 99.0) == 10.0
    assert solar_at([], 50.0, 7.0) == 7.0
