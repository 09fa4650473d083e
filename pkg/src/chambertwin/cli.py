"""Command line front end.

Subcommands:

    run           execute a scenario to its configured duration
    tune          identify PID gains for one chamber loop
    report        render a data report from a run's sample store
    verify-audit  walk an audit chain and fail on the first bad record
    serve         boot the full stack and keep it running for clients

Exit codes are a stable contract: 0 success, 1 verification failure,
2 configuration error, 3 runtime fault. ``CHAMBER_TWIN_HOME`` sets the
base directory for relative output paths (default: current directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, default_scenario, load_config
from .facility import Facility
from .historian import SampleStore, StoreCorrupt, render_report
from .plant import ActuatorBank, ChamberPlant, SimulationFault
from .supervisory.audit import verify_file
from .telemetry import TelemetryError, parse_iso_utc
from .tuning import ChamberLoopRig, TuningFailed, finetune, pretune

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _home() -> Path:
    return Path(os.environ.get("CHAMBER_TWIN_HOME", "."))


def _resolve_out(config: ScenarioConfig, out_flag: str | None) -> str:
    if out_flag:
        return out_flag
    configured = Path(config.output_dir)
    if configured.is_absolute():
        return str(configured)
    return str(_home() / configured)


def _load_scenario(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config) if args.config else default_scenario()
    config = config.with_overrides(
        seed=args.seed,
        time_scale=args.time_scale,
        output_dir=_resolve_out(config, args.out),
    )
    return config


def _print_config_error(err: ConfigError) -> None:
    print("configuration error:", file=sys.stderr)
    for problem in err.problems:
        print(f"  {problem}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load_scenario(args)
    except ConfigError as err:
        _print_config_error(err)
        return EXIT_CONFIG
    try:
        with Facility(config) as facility:
            summary = facility.run()
    except SimulationFault as err:
        print(f"simulation fault: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as err:
        print(f"runtime fault: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for chamber, stats in sorted(summary["chambers"].items()):
        settle = stats["settling_s"]
        print(
            f"chamber {chamber}: settling "
            + (f"{settle} s" if settle is not None else "never")
            + f", {stats['pct_in_band_post_settle']:.2f}% in band, "
            + f"alarms {sum(stats['alarm_counts'].values())}"
        )
    print(f"artifacts in {config.output_dir} (summary.json, samples/, alarms.jsonl, audit.log)")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace) -> int:
    try:
        config = _load_scenario(args)
    except ConfigError as err:
        _print_config_error(err)
        return EXIT_CONFIG
    if args.chamber not in config.chambers:
        print(f"configuration error: chamber {args.chamber} not in scenario", file=sys.stderr)
        return EXIT_CONFIG
    setup = config.chambers[args.chamber]
    index = sorted(config.chambers).index(args.chamber)
    plant = ChamberPlant(setup.geometry, ActuatorBank(), rng_seed=config.seed * 8 + index)
    loop_kind = "temperature" if args.loop == "t" else "humidity"
    setpoint = setup.t_sp if args.loop == "t" else setup.rh_sp
    hold = setup.t_sp if args.loop == "rh" else None
    try:
        rig = ChamberLoopRig(plant, loop_kind, hold_t_c=hold)
        rough = pretune(rig, loop_kind, step=0.3, max_excursion=10.0)
        gains = finetune(
            ChamberLoopRig(plant, loop_kind, hold_t_c=hold),
            rough, loop_kind=loop_kind, setpoint=setpoint,
        )
    except TuningFailed as err:
        print(f"tuning failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    doc = {
        "chamber": args.chamber,
        "loop": args.loop,
        "kp": round(gains.kp, 6),
        "ti_s": round(gains.ti_s, 3),
        "td_s": round(gains.td_s, 3),
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.gains_out:
        Path(args.gains_out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _parse_ts(raw: str, name: str) -> int:
    if raw.isdigit():
        return int(raw)
    try:
        return parse_iso_utc(raw)
    except (TelemetryError, ValueError) as exc:
        raise ConfigError([f"{name}: expected epoch ms or ISO 8601 UTC, got {raw!r}"]) from exc


def cmd_report(args: argparse.Namespace) -> int:
    store_dir = Path(args.store)
    if not store_dir.is_dir():
        print(f"configuration error: no sample store at {store_dir}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        from_ms = _parse_ts(args.from_ts, "--from")
        to_ms = _parse_ts(args.to_ts, "--to")
        if args.interval <= 0:
            raise ConfigError(["--interval: must be > 0 seconds"])
    except ConfigError as err:
        _print_config_error(err)
        return EXIT_CONFIG
    try:
        store = SampleStore(store_dir)
        payload = render_report(
            store, args.chamber, from_ms, to_ms,
            interval_s=args.interval, fmt=args.format,
        )
    except StoreCorrupt as err:
        print(f"sample store corrupt: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.out_file:
        Path(args.out_file).write_bytes(payload)
    else:
        sys.stdout.buffer.write(payload)
    return EXIT_OK


def cmd_verify_audit(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if not path.is_file():
        print(f"configuration error: no audit log at {path}", file=sys.stderr)
        return EXIT_CONFIG
    ok, bad_seq = verify_file(path)
    if ok:
        print(f"ok: chain intact ({path})")
        return EXIT_OK
    print(f"chain broken at seq {bad_seq}")
    return EXIT_VERIFY


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        config = _load_scenario(args)
    except ConfigError as err:
        _print_config_error(err)
        return EXIT_CONFIG
    stop = False

    def _request_stop(_signum, _frame) -> None:
        nonlocal stop
        stop = True

    try:
        facility = Facility(config, http_port=args.http_port)
    except OSError as err:
        print(f"runtime fault: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    signal.signal(signal.SIGINT, _request_stop)
    signal.signal(signal.SIGTERM, _request_stop)
    with facility:
        print(
            json.dumps(
                {
                    "http": facility.api.url,
                    "registers": "tcp://%s:%d" % facility.registers.address,
                    "mqtt": "tcp://%s:%d" % facility.broker.address,
                    "output_dir": config.output_dir,
                }
            ),
            flush=True,
        )
        try:
            facility.run_until(lambda: stop)
        except SimulationFault as err:
            print(f"simulation fault: {err}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def _add_scenario_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="scenario JSON file (default: built-in four-chamber day)")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--time-scale", type=float, dest="time_scale",
                        help="override the simulation speed factor")
    parser.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chambertwin",
        description="Stability chamber facility twin: simulate, tune, report, verify.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario to completion")
    _add_scenario_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("tune", help="identify PID gains for one chamber loop")
    _add_scenario_flags(p)
    p.add_argument("--chamber", required=True, choices=["A", "B", "C", "D"])
    p.add_argument("--loop", required=True, choices=["t", "rh"])
    p.add_argument("--gains-out", help="also write the gains JSON to this file")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("report", help="render a data report from a sample store")
    p.add_argument("--store", required=True, help="sample store directory (a run's samples/)")
    p.add_argument("--chamber", required=True, choices=["A", "B", "C", "D"])
    p.add_argument("--from", required=True, dest="from_ts",
                   help="window start (epoch ms or ISO 8601 UTC)")
    p.add_argument("--to", required=True, dest="to_ts", help="window end")
    p.add_argument("--interval", type=int, default=3600, help="row interval in seconds")
    p.add_argument("--format", default="csv", choices=["csv", "html"])
    p.add_argument("--out", dest="out_file", help="write to file instead of stdout")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("verify-audit", help="check an audit chain end to end")
    p.add_argument("path", help="audit log file")
    p.set_defaults(fn=cmd_verify_audit)

    p = sub.add_parser("serve", help="boot the stack and run until interrupted")
    _add_scenario_flags(p)
    p.add_argument("--http-port", type=int, default=0,
                   help="bind the HTTP API to this port (default: ephemeral)")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
