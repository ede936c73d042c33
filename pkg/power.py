"""
バッテリー管理: 充放電の積分、ブラウンアウト検出、ブリッジ（非常用リレー）
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BROWN_OUT_V = 11.0
RECOVER_V = 11.5
FULL_V = 12.7
EMPTY_V = 10.5


class PowerError(Exception):
    pass


class PowerEvent(Enum):
    BROWN_OUT = "brown_out"
    RECOVERED = "recovered"


@dataclass(frozen=True)
class PowerConfig:
    capacity_ah: float = 54.0
    solar_w: float = 10.0
    bridge_resistance: float = 0.1
    solar_share_logic: float = 0.5

    def __post_init__(self):
        if self.capacity_ah <= 0:
            raise PowerError("capacity_ah must be positive")
        if not 0.0 <= self.solar_share_logic <= 1.0:
            raise PowerError("solar_share_logic must be within [0, 1]")


@dataclass(frozen=True)
class PowerState:
    battery_logic: float
    battery_power: float
    bridged: bool = False
    logic_cell: Optional[float] = None  # ブリッジ中に切り離されたロジック側電池
    browned_out: bool = False

    def __post_init__(self):
        if self.battery_logic < 0 or self.battery_power < 0:
            raise PowerError("battery voltage must be >= 0")
        if self.logic_cell is None:
            object.__setattr__(self, "logic_cell", self.battery_logic)


def _soc(volts: float) -> float:
    return (volts - EMPTY_V) / (FULL_V - EMPTY_V)


def _volts(soc: float) -> float:
    return EMPTY_V + min(max(soc, 0.0), 1.0) * (FULL_V - EMPTY_V)


def _integrate(volts: float, watts_in: float, watts_out: float, dt: float,
               capacity_ah: float) -> float:
    """充電状態を線形モデルで積分して電圧に戻す"""
    current = (watts_in - watts_out) / max(volts, 1.0)
    soc = _soc(volts) + current * dt / 3600.0 / capacity_ah
    return _volts(soc)


def power_step(p: PowerState, load_profile: Dict[str, float], solar_w: float, dt: float,
               cfg: PowerConfig = PowerConfig()) -> Tuple[PowerState, List[PowerEvent]]:
    """
    dt 秒ぶん積分

    Args:
        load_profile: {'logic': W, 'power': W}
        solar_w: 太陽電池の出力 (W)
    """
    if dt <= 0:
        raise PowerError("dt must be positive")
    logic_load = load_profile.get("logic", 0.0)
    power_load = load_profile.get("power", 0.0)
    solar_logic = solar_w * cfg.solar_share_logic
    solar_power = solar_w - solar_logic

    if p.bridged:
        # ロジック側の負荷も動力側電池から、抵抗で電圧降下
        power_v = _integrate(p.battery_power, solar_w, logic_load + power_load, dt,
                             cfg.capacity_ah)
        drop = logic_load / max(power_v, 1.0) * cfg.bridge_resistance
        logic_v = max(0.0, power_v - drop)
        cell = p.logic_cell
    else:
        cell = _integrate(p.logic_cell, solar_logic, logic_load, dt, cfg.capacity_ah)
        logic_v = cell
        power_v = _integrate(p.battery_power, solar_power, power_load, dt, cfg.capacity_ah)

    events: List[PowerEvent] = []
    browned_out = p.browned_out
    if not browned_out and logic_v < BROWN_OUT_V:
        browned_out = True
        events.append(PowerEvent.BROWN_OUT)
        logger.warning("brown-out: logic rail %.2f V", logic_v)
    elif browned_out and logic_v > RECOVER_V:
        browned_out = False
        events.append(PowerEvent.RECOVERED)
        logger.info("power recovered: logic rail %.2f V", logic_v)
    return PowerState(logic_v, power_v, p.bridged, cell, browned_out), events


def bridge(p: PowerState, cfg: PowerConfig = PowerConfig(), logic_load: float = 0.0) -> PowerState:
    """非常用リレーでロジック系統を動力側電池につなぐ"""
    if p.bridged:
        return p
    drop = logic_load / max(p.battery_power, 1.0) * cfg.bridge_resistance
    logger.info("batteries bridged through %.2f ohm", cfg.bridge_resistance)
    return replace(p, battery_logic=max(0.0, p.battery_power - drop), bridged=True,
                   logic_cell=p.battery_logic)


def unbridge(p: PowerState) -> PowerState:
    if not p.bridged:
        return p
    return replace(p, battery_logic=p.logic_cell, bridged=False)


def solar_at(schedule: Sequence[Tuple[float, float]], t: float, default: float) -> float:
    """[(秒, W), ...] を線形補間、空なら一定値"""
    if not schedule:
        return default
    times = np.array([s[0] for s in schedule], dtype=float)
    watts = np.array([s[1] for s in schedule], dtype=float)
    return float(np.interp(t, times, watts))
