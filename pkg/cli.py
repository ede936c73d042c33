"""
dori コマンド
  run <scenario.json>          シナリオを実行して trace / archive / レポートを出力
  replay-verify <trace> <dir>  trace とアーカイブの突き合わせ
  gateway                      TCP のアップロード受付と HTTP API を起動
  status <http-url>            gateway の状態を表示
  backup                       gateway のデータベースを JSON に書き出す
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import requests

from bus import write_trace
from gateway import DEFAULT_ARCHIVE, DEFAULT_PORT, INDEX_NAME, Gateway, start_gateway_server
from replay import FormatError, load_archive_logs, replay_verify, replay_verify_files
from scenario import ConfigError, load_scenario
from simulation import Simulation
from sources import SourceError
from uplink import UplinkError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def setup_logging():
    if os.environ.get('DORI_ENV') == 'production':
        logging.basicConfig(level=logging.INFO)
    else:
        logging.basicConfig(level=logging.DEBUG)


def verify_run(sim: Simulation, report: dict) -> List[str]:
    """実行後の検査: 停止中の送信なし、ログの抜けはロガー不在の時間だけ"""
    violations = sim.check_invariants()
    if sim.gateway is None:
        return violations
    logs = load_archive_logs(sim.gateway.archive.root)
    # 送れずに SD に残ったログも失われてはいない
    for node in sim.nodes.values():
        if node.sd is not None:
            logs.extend((f"{node.name}:{name}", node.sd.read(name)) for name in node.sd.names("LOG"))
    replay = replay_verify(sim.trace, logs)
    report['replay'] = replay.to_dict()
    if not replay.clean:
        violations.append(f"log diverges from trace: {replay.divergence}")
    unexplained = [event for gap in replay.gaps for event in gap.events
                   if event.time not in sim.unlogged_times]
    if len(unexplained) > report['records_dropped']:
        violations.append(f"{len(unexplained)} records missing while a logger was running")
    return violations


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        scenario.seed = args.seed
    url = args.gateway or scenario.uplink.gateway
    gateway = None
    if url == "embedded":
        if (Path(args.archive) / INDEX_NAME).exists():
            print(f"config error: {args.archive} already holds an archive, pick an empty directory",
                  file=sys.stderr)
            return EXIT_CONFIG
        gateway = Gateway(args.archive, calibration=scenario.calibration)
    try:
        sim = Simulation(scenario, gateway, url)
    except (UplinkError, SourceError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    until = int(args.until * 1_000_000) if args.until is not None else None
    report = sim.run(until)
    count = write_trace(sim.trace, args.trace)
    violations = verify_run(sim, report)
    report['violations'] = violations
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, default=str), encoding='utf-8')

    print(f"frames: {report['frames_delivered']} delivered ({count} in {args.trace})")
    print(f"records logged: {report['records_logged']} (dropped {report['records_dropped']})")
    print(f"uploads: {report['uploads']}")
    for record in report['failovers']:
        print(f"failover {record['dead']} -> {record['camera']}: {record['state']}")
    for violation in violations:
        print(f"VIOLATION: {violation}", file=sys.stderr)
    return EXIT_VIOLATION if violations else EXIT_OK


def cmd_replay_verify(args) -> int:
    try:
        report = replay_verify_files(args.trace, args.archive)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.clean else EXIT_VIOLATION


def cmd_gateway(args) -> int:
    from app import create_app
    from database import GatewayDB

    gateway = Gateway(args.archive, db=GatewayDB(args.db))
    server = start_gateway_server(gateway, args.host, args.port)
    try:
        create_app(gateway).run(host=args.host, port=args.http_port)
    finally:
        server.shutdown()
        server.server_close()
    return EXIT_OK


def cmd_backup(args) -> int:
    from database import GatewayDB

    if not Path(args.db).exists():
        print(f"config error: no gateway database at {args.db}", file=sys.stderr)
        return EXIT_CONFIG
    path = GatewayDB(args.db).backup_to_json(args.out)
    print(f"backup written to {path}")
    return EXIT_OK


def cmd_status(args) -> int:
    try:
        response = requests.get(args.url.rstrip('/') + '/api/status', timeout=10)
        response.raise_for_status()
    except requests.RequestException as e:
        print(f"gateway unreachable: {e}", file=sys.stderr)
        return EXIT_VIOLATION
    for key, value in response.json().items():
        print(f"{key}: {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dori", description="DORI instrument simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("scenario")
    run.add_argument("--trace", default="trace.csv")
    run.add_argument("--gateway", help="tcp://host:port or embedded")
    run.add_argument("--seed", type=int)
    run.add_argument("--until", type=float, help="stop after SECONDS")
    run.add_argument("--archive", default=DEFAULT_ARCHIVE)
    run.add_argument("--report", help="write the JSON summary here")
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay-verify", help="diff an archive against a trace")
    replay.add_argument("trace")
    replay.add_argument("archive")
    replay.set_defaults(func=cmd_replay_verify)

    gw = sub.add_parser("gateway", help="run the gateway service")
    gw.add_argument("--host", default="127.0.0.1")
    gw.add_argument("--port", type=int, default=DEFAULT_PORT)
    gw.add_argument("--http-port", type=int,
                    default=int(os.environ.get('DORI_GATEWAY_HTTP_PORT', '5002')))
    gw.add_argument("--archive", default=DEFAULT_ARCHIVE)
    gw.add_argument("--db", default="dori_gateway.db")
    gw.set_defaults(func=cmd_gateway)

    status = sub.add_parser("status", help="show a running gateway's summary")
    status.add_argument("url")
    status.set_defaults(func=cmd_status)

    backup = sub.add_parser("backup", help="export the gateway database as JSON")
    backup.add_argument("--db", default="dori_gateway.db")
    backup.add_argument("--out", help="JSON file (default: timestamped name)")
    backup.set_defaults(func=cmd_backup)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
