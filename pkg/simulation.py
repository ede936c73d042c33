"""
シミュレーション本体
バス・ノード・タイマー・電源・アップリンクを 1 本のイベントループで回す
"""
import heapq
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from bus import Bus, BusEvent, Frame
from filters import make_filter
from gateway import Gateway
from messages import (BROADCAST_TARGET, COMMAND, Opcode, command_frame, is_file_transfer,
                      parse_command, power_alarm_frame)
from nodes import (Actuator, Behavior, FailoverRejected, FirmwareImage, HBridgeCommand,
                   HBridgeState, LoggerProgram, Node, NodeError, NodeMode, ReflashSession,
                   SdCard, SensorChannel, SmsBridgeProgram, ThermalLoop, UplinkProgram,
                   drive_args)
from power import PowerConfig, PowerEvent, PowerState, bridge, power_step, solar_at
from scenario import Fault, FaultKind, PowerSpec, Scenario, ScriptedAction
from sensors import SensorKind
from sources import GpsSource, World, build_source
from uplink import (FrameStreamDecoder, MainModem, ModemFailed, SmsBridge, UplinkError,
                    UploadResult, UploadSession, activate_backup, gateway_link,
                    serialize_frame_for_sms, upload_log)

logger = logging.getLogger(__name__)

DRIVE_DEVICES = ("drive_left", "drive_right")


class SimulationError(Exception):
    pass


@dataclass
class TimerHandle:
    time: int
    callback: Callable[[int], None]
    cancelled: bool = False

    def cancel(self):
        self.cancelled = True


@dataclass
class FailoverRecord:
    dead: int
    camera: int
    started_us: int
    finished_us: Optional[int] = None
    state: str = "running"
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            'dead': self.dead,
            'camera': self.camera,
            'started_s': self.started_us / 1e6,
            'finished_s': None if self.finished_us is None else self.finished_us / 1e6,
            'state': self.state,
            'error': self.error,
        }


class Simulation:
    """ノードから見た NodeHost の実装"""

    def __init__(self, scenario: Scenario, gateway: Optional[Gateway] = None,
                 gateway_url: Optional[str] = None):
        self.scenario = scenario
        self.now = 0
        self.bus = Bus(scenario.bus)
        self.world = World(**scenario.world)
        self.trace: List[BusEvent] = []
        self.unlogged_times: Set[int] = set()
        self.bus.add_monitor(self._monitor)
        self._timers: List[Tuple[int, int, TimerHandle]] = []
        self._timer_seq = 0

        self.gateway = gateway
        self.modem = MainModem(scenario.uplink.bandwidth, scenario.uplink.latency_us)
        self.modem.connect()
        self.link = gateway_link(gateway_url or scenario.uplink.gateway, gateway,
                                 lambda: (self.world.epoch_us + self.now) // 1000)
        self.sms = SmsBridge(scenario.uplink.sms_segment_size, scenario.uplink.sms_latency_us)
        self.backup_requested = False
        self.operator_frames: List[Tuple[int, Frame]] = []
        self._operator_decoder = FrameStreamDecoder()
        self._bridge_decoder: Optional[FrameStreamDecoder] = None
        self.commands_dropped = 0

        self.uploads: List[UploadSession] = []
        self.reflash_sessions: List[ReflashSession] = []
        self.failovers: List[FailoverRecord] = []
        self.faults_applied: List[Fault] = []
        self.action_errors: List[str] = []
        self.down_intervals: Dict[int, List[List[Optional[int]]]] = {}
        self._corrupt_next: Optional[int] = None
        self.upload_rounds = 0

        self.power_spec: Optional[PowerSpec] = scenario.power
        if self.power_spec is None and any(f.kind is FaultKind.BATTERY_DRAIN for f in scenario.faults):
            self.power_spec = PowerSpec(PowerConfig())
        self.power: Optional[PowerState] = None
        self.power_events: List[Tuple[int, PowerEvent]] = []
        self._drains: List[Tuple[str, float, int, int]] = []

        self.nodes: Dict[int, Node] = {}
        for spec in scenario.nodes:
            self.nodes[spec.node_id] = self._build_node(spec)
        self.sms_node = self._first(Behavior.SMS_BRIDGE)
        self.uplink_node = self._first(Behavior.UPLINK)
        if self.sms_node is not None:
            self._bridge_decoder = FrameStreamDecoder(self.sms_node.id)
        self._started = False

    # --- 構築 ---

    def _first(self, behavior: Behavior) -> Optional[Node]:
        for node in self.nodes.values():
            if node.behavior is behavior:
                return node
        return None

    def _build_node(self, spec) -> Node:
        seed = self.scenario.seed
        firmware = FirmwareImage.build(spec.behavior, spec.version, seed=seed)
        sd = SdCard(spec.sd_capacity) if spec.sd_capacity else None
        node = Node(spec.node_id, spec.name, firmware, sd, spec.clock_error_us, spec.load_w, seed)
        for index, sensor in enumerate(spec.sensors):
            rng = np.random.default_rng([seed, spec.node_id, index + 1])
            period = (sensor.period_us or 1_000_000) / 1e6
            source = build_source(sensor.source, sensor.kind, rng, self.scenario.calibration,
                                  self.scenario.wind_table, period)
            node.add_sensor(SensorChannel(sensor.name, sensor.kind, source,
                                          make_filter(sensor.filter, sensor.kind.vector),
                                          sensor.channel, sensor.period_us))
        for device in spec.devices:
            node.devices[device] = HBridgeState()
        if spec.actuator is not None:
            node.actuator = Actuator(spec.actuator["rate"], spec.actuator["angle"])
            if self.world.arm is None:
                self.world.arm = node.actuator
        for index, loop in enumerate(spec.thermal):
            rng = np.random.default_rng([seed, spec.node_id, 100 + index])
            node.thermal_loops.append(ThermalLoop(
                loop.device, loop.band,
                build_source(loop.source, SensorKind.TEMPERATURE, rng), loop.period_us))
        if spec.gps is not None:
            node.gps_source = GpsSource(float(spec.gps.get("noise_deg", 0.0)),
                                        np.random.default_rng([seed, spec.node_id, 200]))
        self.bus.register(node.id, node.on_event, loopback=True)
        return node

    def start(self):
        """ノードの起動とスケジュール登録（run の初回に自動で呼ばれる）"""
        if self._started:
            return
        self._started = True
        duration = self.scenario.duration_us
        for node in self.nodes.values():
            node.attach(self)
        for spec in self.scenario.nodes:
            for sensor in spec.sensors:
                if sensor.period_us:
                    self.nodes[spec.node_id].schedule_periodic(sensor.name, sensor.period_us)
        for fault in self.scenario.faults:
            self.schedule(fault.time_us, lambda now, fault=fault: self.apply_fault(fault))
        for action in self.scenario.actions:
            self.schedule(action.time_us, lambda now, action=action: self.perform(action))
        interval = self.scenario.uplink.upload_interval_us
        if interval:
            for at in range(interval, duration, interval):
                self.schedule(at, lambda now: self.upload_round())
        if self.power_spec is not None:
            spec = self.power_spec
            self.power = PowerState(spec.battery_logic, spec.battery_power)
            self.world.logic_v, self.world.power_v = spec.battery_logic, spec.battery_power
            self.schedule(spec.tick_us, self._power_tick)
        logger.info("simulation started: %d nodes, %.1f s", len(self.nodes), duration / 1e6)

    # --- NodeHost ---

    def schedule(self, time: int, callback: Callable[[int], None]) -> TimerHandle:
        if time < self.now:
            raise SimulationError(f"timer at {time} is before now ({self.now})")
        handle = TimerHandle(time, callback)
        heapq.heappush(self._timers, (time, self._timer_seq, handle))
        self._timer_seq += 1
        return handle

    def offer(self, node: Node, frame: Frame):
        self.bus.offer(frame, node.id, self.now)

    def flush(self, node: Node):
        self.bus.flush(node.id)

    def on_reflash_finalized(self, node: Node):
        for record in self.failovers:
            if record.camera == node.id and record.finished_us is None:
                record.finished_us = self.now
                record.state = "done"
                logger.info("failover complete: %s now logs in place of node %d",
                            node.name, record.dead)

    def bridge_batteries(self):
        if self.power is None:
            logger.warning("bridge command ignored: no power model in this scenario")
            return
        logic_load = sum(n.power_load()["logic"] for n in self.nodes.values())
        self.power = bridge(self.power, self.power_spec.config, logic_load)
        self.world.logic_v = self.power.battery_logic

    # --- イベントループ ---

    def _monitor(self, event: BusEvent):
        self.trace.append(event)
        if not is_file_transfer(event.frame.id) and not self.logging_active():
            self.unlogged_times.add(event.time)

    def logging_active(self) -> bool:
        return any(n.mode is NodeMode.NORMAL and isinstance(n.program, LoggerProgram)
                   and n.program.active and n.sd is not None for n in self.nodes.values())

    def _next_timer(self) -> Optional[int]:
        while self._timers and self._timers[0][2].cancelled:
            heapq.heappop(self._timers)
        return self._timers[0][0] if self._timers else None

    def run(self, until: Optional[int] = None) -> Dict:
        """until (µs) まで進めて、最後にアップロードを 1 回行う"""
        self.start()
        until = self.scenario.duration_us if until is None else until
        self.advance(until)
        self.upload_round()
        return self.report()

    def advance(self, until: int):
        if until < self.now:
            raise SimulationError(f"cannot run back to {until} from {self.now}")
        self.start()
        while True:
            t_timer = self._next_timer()
            t_bus = self.bus.next_completion()
            if t_timer is not None and t_timer < until and (t_bus is None or t_timer < t_bus):
                self.now = t_timer
                self.bus.step(t_timer)
                _, _, handle = heapq.heappop(self._timers)
                handle.callback(t_timer)
            elif t_bus is not None and t_bus <= until:
                self.now = t_bus
                self.bus.step(t_bus)
            else:
                break
        self.now = until
        self.bus.step(until)

    # --- 障害注入 ---

    def apply_fault(self, fault: Fault):
        self.faults_applied.append(fault)
        params = fault.params
        logger.warning("fault at %.3f s: %s %s", self.now / 1e6, fault.kind.value,
                       "" if fault.target is None else f"node {fault.target}")
        if fault.kind is FaultKind.KILL_NODE:
            node = self.nodes[fault.target]
            if node.alive:
                node.kill()
                self.down_intervals.setdefault(node.id, []).append([self.now, None])
        elif fault.kind is FaultKind.RESTORE_NODE:
            node = self.nodes[fault.target]
            if not node.alive:
                node.restore()
                self.down_intervals[node.id][-1][1] = self.now
        elif fault.kind is FaultKind.CORRUPT_UPLOAD_BYTE:
            self._corrupt_next = params.get("offset", 0)
        elif fault.kind is FaultKind.FAIL_MAIN_MODEM:
            if "mid_transfer_fraction" in params:
                self.modem.arm_failure(float(params["mid_transfer_fraction"]))
            else:
                self.modem.fail()
            if "recover_after_us" in params:
                self.schedule(self.now + params["recover_after_us"], lambda now: self.modem.recover())
        elif fault.kind is FaultKind.SD_FULL:
            self.nodes[fault.target].sd.fill(params.get("remaining", 0))
        elif fault.kind is FaultKind.BATTERY_DRAIN:
            self._drains.append((params.get("rail", "logic"), params["watts"], self.now,
                                 self.now + params["duration_us"]))

    # --- 電源 ---

    def _power_tick(self, now: int):
        spec = self.power_spec
        load = {"logic": 0.0, "power": 0.0}
        for node in self.nodes.values():
            for rail, watts in node.power_load().items():
                load[rail] += watts
        for rail, watts, start, end in self._drains:
            if start <= now < end:
                load[rail] += watts
        solar = solar_at(spec.solar_schedule, now / 1e6, spec.config.solar_w)
        self.power, events = power_step(self.power, load, solar, spec.tick_us / 1e6, spec.config)
        self.world.logic_v, self.world.power_v = self.power.battery_logic, self.power.battery_power
        for event in events:
            self.power_events.append((now, event))
            if event is PowerEvent.BROWN_OUT:
                self._brown_out()
            else:
                self._recover()
        if now + spec.tick_us < self.scenario.duration_us:
            self.schedule(now + spec.tick_us, self._power_tick)

    def _brown_out(self):
        """全ノードが最後の信号を送って休止。ロガーは全部記録してから"""
        awake = [n for n in self.nodes.values() if n.mode is NodeMode.NORMAL]
        for node in awake:
            node.send(power_alarm_frame(self.power.battery_logic, self.power.battery_power, node.id))
        for node in awake:
            if isinstance(node.program, LoggerProgram):
                node.program.expect_final_frames(len(awake))
            else:
                node.hibernate("brown_out")

    def _recover(self):
        for node in self.nodes.values():
            if node.mode is NodeMode.HIBERNATE:
                node.wake()

    # --- 運用者（アクティブモード） ---

    @property
    def backup_active(self) -> bool:
        node = self.sms_node
        return (node is not None and node.mode is NodeMode.NORMAL
                and isinstance(node.program, SmsBridgeProgram) and node.program.forwarding)

    def _inject(self, node: Node, frame: Frame):
        """外部から来たフレームを node 経由でバスに流す"""
        if node.mode is not NodeMode.NORMAL:
            logger.warning("%s cannot inject frame 0x%X (%s)", node.name, frame.id.value,
                           node.mode.name)
            return
        frame = Frame(frame.id, frame.payload, node.id)
        command = parse_command(frame) if frame.id == COMMAND else None
        node.send(frame)
        if command is not None and command.addressed_to(node.id):
            node.handle_command(command)

    def operator_command(self, opcode: Opcode, target: int = BROADCAST_TARGET,
                         args: bytes = b"") -> str:
        """メインモデム → SMS → 破棄 の順に経路を選ぶ"""
        uplink = self.uplink_node
        if self.modem.connected and uplink is not None and uplink.mode is NodeMode.NORMAL:
            frame = command_frame(opcode, target, args, uplink.id)
            self.schedule(self.now + self.modem.latency_us,
                          lambda now: self._inject(uplink, frame))
            return "modem"
        if self.backup_active:
            self.send_sms([command_frame(opcode, target, args, self.sms_node.id)])
            return "sms"
        self.commands_dropped += 1
        logger.warning("operator command %s dropped: no uplink available", opcode.name)
        return "dropped"

    def send_sms(self, frames: List[Frame]):
        """運用者 → SMS ノード（1 回の呼び出しが 1 通ぶん）"""
        data = b"".join(serialize_frame_for_sms(f) for f in frames)
        for arrival, seg in self.sms.send_inbound(data, self.now):
            self.schedule(arrival, lambda now, seg=seg: self._sms_inbound(seg))

    def _sms_inbound(self, seg: bytes):
        node = self.sms_node
        if node is None or self._bridge_decoder is None:
            return
        for frame in self._bridge_decoder.feed(seg):
            self._inject(node, frame)

    def sms_forward(self, node: Node, event: BusEvent):
        flush_at = self.sms.push(serialize_frame_for_sms(event.frame), self.now)
        if flush_at is not None:
            self.schedule(flush_at, self._sms_flush)

    def _sms_flush(self, now: int):
        for arrival, seg in self.sms.flush(now):
            self.schedule(arrival, lambda t, seg=seg: self._operator_receive(t, seg))

    def _operator_receive(self, now: int, seg: bytes):
        for frame in self._operator_decoder.feed(seg):
            self.operator_frames.append((now, frame))

    # --- 書き換えとフェイルオーバー ---

    def reflash(self, target: int, image: FirmwareImage,
                on_done: Optional[Callable[[ReflashSession], None]] = None,
                corrupt_offset: Optional[int] = None) -> ReflashSession:
        """
        イメージをモデムでアップリンクノードの SD へ送り、届いてから書き換えを始める
        corrupt_offset のバイトは転送中に化ける
        """
        host = self.uplink_node
        if host is None or host.mode is not NodeMode.NORMAL:
            raise SimulationError("no uplink node available to host the reflash")
        if host.sd is None:
            raise SimulationError(f"{host.name} has no SD card to stage the image")
        if not self.modem.connected:
            raise SimulationError(f"main modem {self.modem.state.value}, image not sent")
        if target not in self.nodes:
            raise SimulationError(f"unknown node {target}")
        data = bytearray(image.data)
        if corrupt_offset is not None and data:
            data[corrupt_offset % len(data)] ^= 0xFF
        session = ReflashSession(host, target, image, on_done=on_done)
        self.reflash_sessions.append(session)
        arrival = self.now + self.modem.transfer_time(len(data))
        self.schedule(arrival, lambda now: self._image_arrived(session, bytes(data)))
        logger.info("firmware for node %d sent to %s, arrives at %.3f s", target, host.name,
                    arrival / 1e6)
        return session

    def _image_arrived(self, session: ReflashSession, data: bytes):
        if not self.modem.connected:
            session.fail(ModemFailed(f"main modem {self.modem.state.value} during image transfer"))
            return
        try:
            if session.stage(data):
                session.start()
        except NodeError as e:
            session.fail(e)

    def failover(self, dead: int, camera: int) -> ReflashSession:
        """死んだロガーの代わりにカメラノードをロガーへ書き換える"""
        if self.nodes[dead].alive:
            raise FailoverRejected(f"node {dead} is still alive")
        if not isinstance(self.nodes[dead].program, LoggerProgram):
            raise FailoverRejected(f"node {dead} is not a logger")
        camera_node = self.nodes[camera]
        if camera_node.sd is None:
            raise FailoverRejected(f"{camera_node.name} has no SD card to log to")
        record = FailoverRecord(dead, camera, self.now)
        self.failovers.append(record)

        def done(session: ReflashSession):
            if session.state == "failed":
                record.state = "failed"
                record.finished_us = self.now
                record.error = str(session.error)
                logger.error("failover to %s failed: %s", camera_node.name, session.error)

        image = FirmwareImage.build(Behavior.LOGGER, camera_node.version + 1,
                                    seed=self.scenario.seed)
        logger.info("failover: reflashing %s as logger", camera_node.name)
        return self.reflash(camera, image, on_done=done)

    # --- アップロード ---

    def upload_round(self) -> List[UploadSession]:
        """ロガーのファイルを切り替えて、閉じたログと画像を全部送る"""
        self.upload_rounds += 1
        for node in self.nodes.values():
            if isinstance(node.program, LoggerProgram) and node.program.active:
                node.program.rotate()
        uplink = self.uplink_node
        if uplink is None or uplink.mode is not NodeMode.NORMAL:
            logger.warning("upload round skipped: uplink node unavailable")
            return []
        files: List[Tuple[Node, str]] = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            if node.sd is not None:
                files.extend((node, name) for name in node.sd.names("LOG"))
        staged = uplink.program.staged if isinstance(uplink.program, UplinkProgram) else []
        files.extend((uplink, name) for name in list(staged))

        sessions = []
        for node, name in files:
            if not self.modem.connected:
                logger.warning("upload round stopped: main modem %s", self.modem.state.value)
                break
            session = UploadSession(name)
            try:
                upload_log(session, node.sd, self.modem, self.link, self._corrupt_next)
            except ModemFailed as e:
                logger.warning("%s", e)
                sessions.append(session)
                break
            finally:
                if session.bytes_sent:
                    self._corrupt_next = None
            sessions.append(session)
            if session.result is UploadResult.ACKED and name in staged:
                staged.remove(name)
        self.uploads.extend(sessions)
        return sessions

    # --- 台本 ---

    def perform(self, action: ScriptedAction):
        params = action.params
        logger.info("action at %.3f s: %s", self.now / 1e6, action.action)
        try:
            if action.action == "command":
                self.operator_command(params["opcode"], params.get("target", BROADCAST_TARGET),
                                      params.get("args", b""))
            elif action.action == "drive":
                self.drive(params["target"], params["device"], params["command"])
            elif action.action == "failover":
                self.failover(params["dead"], params["camera"])
            elif action.action == "reflash":
                image = FirmwareImage.build(params["behavior"], params["version"], params["size"],
                                            seed=self.scenario.seed)
                self.reflash(params["target"], image,
                             corrupt_offset=0 if params.get("corrupt") else None)
            elif action.action == "activate_backup":
                activate_backup(self)
            elif action.action == "capture_image":
                self.operator_command(Opcode.CAPTURE_IMAGE, params["target"])
            elif action.action == "upload":
                self.upload_round()
        except (NodeError, UplinkError, SimulationError) as e:
            self.action_errors.append(f"{action.action} at {self.now / 1e6:.3f} s: {e}")
            logger.error("action %s failed: %s", action.action, e)

    def drive(self, target: int, device: str, command: HBridgeCommand) -> str:
        route = self.operator_command(Opcode.DRIVE, target, drive_args(device, command))
        if (route != "dropped" and self.gateway is not None and device in DRIVE_DEVICES
                and command is not HBridgeCommand.STOP):
            self.gateway.register_drive_command((self.world.epoch_us + self.now) / 1e6)
        return route

    # --- 結果 ---

    def check_invariants(self) -> List[str]:
        """停止中のノードがバスに何も出していないこと"""
        violations = []
        for node_id, intervals in self.down_intervals.items():
            for start, end in intervals:
                end = self.now if end is None else end
                leaked = [e for e in self.trace
                          if e.frame.source == node_id and start < e.time <= end]
                if leaked:
                    violations.append(f"node {node_id} sent {len(leaked)} frames while dead")
        if self.world.arm is not None and not 0.0 <= self.world.arm.angle_at(self.now) <= 90.0:
            violations.append("arm angle left [0, 90]")
        return violations

    def report(self) -> Dict:
        results = {r.value: 0 for r in UploadResult}
        for session in self.uploads:
            if session.result is not None:
                results[session.result.value] += 1
        loggers = [n.program for n in self.nodes.values() if isinstance(n.program, LoggerProgram)]
        by_node: Dict[int, int] = {}
        for event in self.trace:
            by_node[event.frame.source] = by_node.get(event.frame.source, 0) + 1
        report = {
            'duration_s': self.now / 1e6,
            'seed': self.scenario.seed,
            'frames_offered': self.bus.offered,
            'frames_delivered': self.bus.delivered,
            'frames_flushed': self.bus.flushed,
            'frames_by_node': by_node,
            'records_logged': sum(p.records for p in loggers),
            'records_dropped': sum(p.dropped for p in loggers),
            'upload_rounds': self.upload_rounds,
            'uploads': results,
            'faults': [{'time_s': f.time_us / 1e6, 'kind': f.kind.value, 'target': f.target}
                       for f in self.faults_applied],
            'failovers': [r.to_dict() for r in self.failovers],
            'reflashes': [{'target': s.target, 'state': s.state,
                           'error': None if s.error is None else str(s.error)}
                          for s in self.reflash_sessions],
            'sms': {'segments_out': self.sms.segments_out, 'segments_in': self.sms.segments_in,
                    'frames_to_operator': len(self.operator_frames)},
            'commands_dropped': self.commands_dropped,
            'action_errors': list(self.action_errors),
            'nodes': {n.id: {'name': n.name, 'behavior': n.behavior.name, 'version': n.version,
                             'mode': n.mode.name} for n in self.nodes.values()},
        }
        if self.power is not None:
            report['power'] = {
                'logic_v': round(self.power.battery_logic, 3),
                'power_v': round(self.power.battery_power, 3),
                'bridged': self.power.bridged,
                'brown_outs': sum(1 for _, e in self.power_events if e is PowerEvent.BROWN_OUT),
                'recoveries': sum(1 for _, e in self.power_events if e is PowerEvent.RECOVERED),
            }
        if self.gateway is not None:
            report['gateway'] = self.gateway.summary()
        return report
