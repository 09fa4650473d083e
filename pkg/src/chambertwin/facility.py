"""The whole plant floor in one process.

Four simulated chambers run under closed-loop control on a 1 s master
clock. Every tick lands in the register map; a telemetry gateway polls
the registers over the real TCP wire protocol, publishes MQTT to an
in-process broker, and pushes samples to the historian over HTTP with a
service-account token. External clients (the HMI, an MQTT consumer, the
CLI) attach to the same sockets a field deployment would expose.

Time discipline: the master loop owns simulated time. Alarm evaluation,
audit timestamps, and outbox notifications all read the simulation clock,
so a run with a fixed seed writes byte-identical logs no matter how fast
the host machine is. Only session expiry uses wall time, because operator
sessions are about real people at real keyboards.
"""
from __future__ import annotations

import json
import logging
import secrets
import threading
import time
from array import array
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import psychro
from .config import ChamberSetup, ScenarioConfig
from .control import ChamberController, PidGains
from .gateway import Gateway, GatewayConfig
from .historian import SampleStore
from .httpapi import ApiContext, ApiServer, HubControls
from .mqtt import MiniBroker
from .plant import ActuatorBank, ChamberPlant
from .regmap import (
    CHAMBER_DBS,
    STATUS_BLOWER_ON,
    STATUS_COOL_UNIT2,
    STATUS_HEATER_UNIT2,
    STATUS_STEAM_UNIT2,
    STATUS_TUNING,
    RegisterHub,
)
from .supervisory import (
    ACTIVE,
    ADMINISTRATOR,
    CLEARED,
    OPERATOR,
    SUPERVISOR,
    AlarmEngine,
    AlarmRecord,
    AuditLog,
    ChamberSignals,
    OutboxNotifier,
    SessionStore,
    UserStore,
)
from .wire import RegisterServer

log = logging.getLogger(__name__)

EPOCH_MS = 1714663800000  # simulation t=0: 2024-05-02 15:30:00 UTC
SETTLE_WINDOW_S = 600  # in-band this long counts as settled
IN_BAND_T_C = 2.0
IN_BAND_RH_PCT = 5.0
PACE_LEAD_S = 0.5  # run loop banks this much lead on its pace schedule

# demo accounts seeded into a fresh facility; documented in the README so
# a `serve` stack is usable out of the box. Change them for anything real.
DEMO_USERS = (
    ("admin", "admin-change-me", ADMINISTRATOR),
    ("supervisor", "supervisor-change-me", SUPERVISOR),
    ("operator", "operator-change-me", OPERATOR),
)

_ACTUATORS = ("heater", "cool", "steam")
_UNIT2_BITS = {
    "heater": STATUS_HEATER_UNIT2,
    "cool": STATUS_COOL_UNIT2,
    "steam": STATUS_STEAM_UNIT2,
}


@dataclass
class _Rig:
    """One chamber's moving parts plus its run accounting."""

    chamber: str
    db: int
    setup: ChamberSetup
    plant: ChamberPlant
    controller: ChamberController
    applied_gains: tuple[tuple[float, float, float], tuple[float, float, float]]
    w0: float
    err_t: array = field(default_factory=lambda: array("f"))
    err_rh: array = field(default_factory=lambda: array("f"))
    failovers: list[dict] = field(default_factory=list)


def _build_rig(chamber: str, setup: ChamberSetup, seed: int) -> _Rig:
    plant = ChamberPlant(setup.geometry, ActuatorBank(), rng_seed=seed)
    if setup.initial_t_c is not None or setup.initial_rh_pct is not None:
        t_c = setup.initial_t_c if setup.initial_t_c is not None else plant.state.t_c
        if setup.initial_rh_pct is not None:
            w = psychro.humidity_ratio(t_c, setup.initial_rh_pct)
        else:
            w = plant.state.w
        plant.state = replace(plant.state, t_c=t_c, w=w)
    controller = ChamberController()
    # the chambers average their sensor rack for control; a single failed
    # probe then degrades the estimate instead of hijacking the loop
    controller.temp_cfg = replace(controller.temp_cfg, feedback="mean")
    controller.rh_cfg = replace(controller.rh_cfg, feedback="mean")
    return _Rig(
        chamber=chamber,
        db=CHAMBER_DBS[chamber],
        setup=setup,
        plant=plant,
        controller=controller,
        applied_gains=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        w0=plant.state.w,
    )


class Facility:
    """Boots the full stack, steps it, and tears it down.

    Use as a context manager. ``run()`` executes the scenario to its
    configured duration and writes the artifacts; ``step()`` advances a
    single simulated second, which is what the integration tests drive.
    """

    def __init__(self, config: ScenarioConfig, *, http_port: int = 0) -> None:
        self.config = config
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)

        self._tick = 0
        self.now_ms = EPOCH_MS
        self.last_wall_s = 0.0
        sim_clock = lambda: self.now_ms / 1000.0  # noqa: E731

        self._alarm_log_lock = threading.Lock()
        self._alarm_log = (self.out / "alarms.jsonl").open("a", encoding="utf-8")
        self._alarm_counts: dict[str, dict[str, int]] = {}

        self.alarms = AlarmEngine(
            [
                OutboxNotifier(self.out / "outbox.jsonl", clock=sim_clock),
                self._log_alarm_transition,
            ]
        )
        self.audit = AuditLog(self.out / "audit.log", clock=sim_clock)
        self.store = SampleStore(self.out / "samples")
        self.users = UserStore(self.out / "users.json")
        self._bootstrap_users()
        self.sessions = SessionStore(self.users)

        self.hub = RegisterHub()
        self.rigs = [
            _build_rig(ch, setup, config.seed * 8 + i)
            for i, (ch, setup) in enumerate(sorted(config.chambers.items()))
        ]
        for rig in self.rigs:
            self.hub.set_setpoints(rig.db, rig.setup.t_sp, rig.setup.rh_sp)
            tg, rg = rig.controller.temp_gains, rig.controller.rh_gains
            self.hub.set_gains(rig.db, (tg.kp, tg.ti_s, tg.td_s), (rg.kp, rg.ti_s, rg.td_s))
            rig.applied_gains = self.hub.gains(rig.db)

        self.registers = RegisterServer(self.hub).start()
        self.broker = MiniBroker().start()
        self.api = ApiServer(
            ApiContext(
                store=self.store,
                users=self.users,
                sessions=self.sessions,
                audit=self.audit,
                alarms=self.alarms,
                controls=HubControls(self.hub),
                clock=sim_clock,
            ),
            port=http_port,
        ).start()

        token = self.sessions.login("svc-gateway", self._gateway_password).token
        self.gateway = Gateway(
            GatewayConfig(
                broker_host="127.0.0.1",
                broker_port=self.broker.address[1],
                site="facility",
                poll_interval_s=config.poll_interval_s,
                register_host="127.0.0.1",
                register_port=self.registers.address[1],
                historian_url=self.api.url,
                auth_token=token,
                chambers=tuple(rig.chamber for rig in self.rigs),
                dead_letter_path=str(self.out / "dead_letter.jsonl"),
            ),
            sleep_fn=lambda _s: None,  # never stall the master loop on retries
        )
        self._next_poll_s = 0.0

        self._schedule = sorted(
            [(fs.at_time_s, fs.chamber, fs.unit, "inject") for fs in config.faults]
            + [
                (fs.clear_at_s, fs.chamber, fs.unit, "clear")
                for fs in config.faults
                if fs.clear_at_s is not None
            ]
        )
        self._schedule_pos = 0

    # lifecycle

    def __enter__(self) -> "Facility":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self.gateway.collect_publish_acks()  # while the broker is still up
        self.gateway.registers.close()
        if self.gateway.mqtt.connected:
            self.gateway.mqtt.disconnect()
        self.api.stop()
        self.registers.stop()
        self.broker.stop()
        self.store.close()
        self.audit.close()
        with self._alarm_log_lock:
            self._alarm_log.close()

    def _bootstrap_users(self) -> None:
        existing = {u.username for u in self.users.list_users()}
        for name, password, role in DEMO_USERS:
            if name not in existing:
                self.users.add_user(name, password, role)
        self._gateway_password = secrets.token_urlsafe(16)
        if "svc-gateway" in existing:
            self.users.set_password("svc-gateway", self._gateway_password)
        else:
            self.users.add_user("svc-gateway", self._gateway_password, SUPERVISOR)

    # alarm plumbing

    def _log_alarm_transition(self, record: AlarmRecord, old_state: str | None) -> None:
        if record.state == ACTIVE and old_state != ACTIVE:
            per = self._alarm_counts.setdefault(record.chamber, {})
            per[record.kind] = per.get(record.kind, 0) + 1
        with self._alarm_log_lock:
            if self._alarm_log.closed:
                return
            self._alarm_log.write(
                json.dumps(
                    {"state": record.state, "alarm": record.to_dict()},
                    separators=(",", ":"), sort_keys=True,
                )
                + "\n"
            )
            self._alarm_log.flush()

    # per-tick pieces

    def _apply_scheduled_faults(self, sim_t: float) -> None:
        rigs = {rig.chamber: rig for rig in self.rigs}
        while self._schedule_pos < len(self._schedule):
            at, chamber, unit, kind = self._schedule[self._schedule_pos]
            if at > sim_t:
                break
            rig = rigs[chamber]
            if kind == "inject":
                rig.plant.inject_fault(unit)
                log.info("fault injected: %s.%s at t=%.0f s", chamber, unit, sim_t)
            else:
                rig.plant.clear_fault(unit)
                log.info("fault cleared: %s.%s at t=%.0f s", chamber, unit, sim_t)
            self._schedule_pos += 1

    def _check_failover(self, rig: _Rig) -> None:
        for actuator in _ACTUATORS:
            if not rig.plant.active_unit_faulted(actuator):
                continue
            active = rig.plant.bank.unit_active[actuator]
            standby = 2 if active == 1 else 1
            if f"{actuator}{standby}" in rig.plant.state.faults:
                continue  # nothing left to switch to
            rig.plant.set_active_unit(actuator, standby)
            detail = f"{actuator} unit {active} faulted, switched to unit {standby}"
            self.alarms.raise_event(rig.chamber, "unit_failover", self.now_ms, detail)
            self.audit.append(
                "system", ADMINISTRATOR, "unit.failover",
                f"chamber.{rig.chamber}.{actuator}", str(active), str(standby),
            )
            rig.failovers.append(
                {"t_s": self._tick, "actuator": actuator, "from": active, "to": standby}
            )

    def _adopt_gains(self, rig: _Rig) -> None:
        current = self.hub.gains(rig.db)
        if current == rig.applied_gains:
            return
        (t_kp, t_ti, t_td), (r_kp, r_ti, r_td) = current
        ctl = rig.controller
        ctl.temp_gains = replace(ctl.temp_gains, kp=t_kp, ti_s=t_ti, td_s=t_td)
        ctl.rh_gains = replace(ctl.rh_gains, kp=r_kp, ti_s=r_ti, td_s=r_td)
        rig.applied_gains = current

    def _status_word(self, rig: _Rig) -> int:
        word = STATUS_BLOWER_ON
        for actuator, bit in _UNIT2_BITS.items():
            if rig.plant.bank.unit_active[actuator] == 2:
                word |= bit
        if rig.controller.suspended:
            word |= STATUS_TUNING
        return word

    def step(self) -> None:
        """Advance the whole facility one simulated second."""
        k = self._tick
        self.now_ms = EPOCH_MS + k * 1000
        self._apply_scheduled_faults(float(k))

        for rig in self.rigs:
            self._check_failover(rig)
            self._adopt_gains(rig)
            sp_t, sp_rh = self.hub.setpoints(rig.db)
            readings = rig.plant.readings()
            out = rig.controller.tick(
                rig.plant, sp_t, sp_rh, float(k), readings=readings
            )

            healthy = [r for r in readings if r.ok]
            if healthy:
                pv_t = sum(r.t_c for r in healthy) / len(healthy)
                pv_rh = sum(r.rh_pct for r in healthy) / len(healthy)
            else:
                pv_t = pv_rh = float("nan")
            pressure = rig.plant.pressure_read()

            self.alarms.evaluate(
                self.now_ms,
                ChamberSignals(
                    chamber=rig.chamber,
                    t_meas=pv_t,
                    rh_meas=pv_rh,
                    sp_t=sp_t,
                    sp_rh=sp_rh,
                    pressure_inwc=pressure,
                    blower_on=True,
                    sensor_t=tuple(r.t_c for r in readings),
                    sensor_rh=tuple(r.rh_pct for r in readings),
                    bad_sensors=frozenset(r.sensor_id for r in readings if not r.ok),
                ),
            )
            self.hub.publish(
                rig.db,
                sensors=[(r.t_c, r.rh_pct) for r in readings],
                pressure_inwc=pressure,
                heater_duty=out.heater_cmd,
                cool_duty=out.cool_cmd,
                steam_current_a=out.steam_cmd_a,
                alarm_word=self.alarms.alarm_word(rig.chamber),
                status_word=self._status_word(rig),
                epoch_ms=self.now_ms,
            )
            rig.err_t.append(pv_t - sp_t)
            rig.err_rh.append(pv_rh - sp_rh)
            rig.plant.step(out.inputs, 1.0)

        self._tick += 1
        if k >= self._next_poll_s:
            self.gateway.cycle()
            self._next_poll_s += self.config.poll_interval_s

    def run(self) -> dict:
        """Run the scenario to its duration; returns the summary dict."""
        ticks = int(round(self.config.duration_s))
        scale = self.config.time_scale
        wall0 = time.perf_counter()
        for k in range(ticks):
            self.step()
            if scale > 0 and (k & 31) == 0:
                ahead = (k + 1) / scale - (time.perf_counter() - wall0)
                if ahead > PACE_LEAD_S + 0.005:
                    # hold a standing lead on the schedule: stalls outside
                    # the loop's control (collector pauses, fsync bursts)
                    # then eat into the lead instead of landing as overshoot
                    # the pace cap can never repay
                    time.sleep(ahead - PACE_LEAD_S)
        self.gateway.collect_publish_acks()  # settle the last telemetry batch
        wall = time.perf_counter() - wall0
        summary = self._summarize()
        (self.out / "summary.json").write_bytes(
            json.dumps(summary, indent=2, sort_keys=True).encode() + b"\n"
        )
        log.info(
            "scenario done: %d s simulated in %.1f s wall (%.0fx)",
            ticks, wall, ticks / wall if wall else float("inf"),
        )
        self.last_wall_s = wall
        return summary

    def run_until(self, should_stop) -> None:
        """Free-running mode for ``serve``: paced steps until told to stop."""
        scale = self.config.time_scale
        wall0 = time.perf_counter()
        k = 0
        while not should_stop():
            self.step()
            k += 1
            ahead = k / scale - (time.perf_counter() - wall0)
            if ahead > 0.005:
                time.sleep(min(ahead, 0.25))

    # summary

    def _summarize(self) -> dict:
        chambers = {}
        for rig in self.rigs:
            n = len(rig.err_t)
            band = bytearray(n)
            for i in range(n):
                band[i] = (
                    abs(rig.err_t[i]) <= IN_BAND_T_C and abs(rig.err_rh[i]) <= IN_BAND_RH_PCT
                )
            settle = _settle_index(band, SETTLE_WINDOW_S)
            post = band[settle:] if settle is not None else b""
            pct = 100.0 * sum(post) / len(post) if post else 0.0
            max_t = max((abs(e) for e in rig.err_t[settle:]), default=0.0) if settle is not None else None
            max_rh = max((abs(e) for e in rig.err_rh[settle:]), default=0.0) if settle is not None else None
            state = rig.plant.state
            residual = rig.plant.geom.air_mass_kg * (state.w - rig.w0) - (
                state.steam_total_kg - state.condensate_total_kg - state.door_moisture_total_kg
            )
            chambers[rig.chamber] = {
                "setpoints": {"t_c": rig.setup.t_sp, "rh_pct": rig.setup.rh_sp},
                "settling_s": settle,
                "pct_in_band_post_settle": round(pct, 3),
                "max_err_t_c_post_settle": None if max_t is None else round(max_t, 4),
                "max_err_rh_pct_post_settle": None if max_rh is None else round(max_rh, 4),
                "moisture_residual_kg": residual,
                "failovers": rig.failovers,
                "alarm_counts": self._alarm_counts.get(rig.chamber, {}),
            }
        active = [a for a in self.alarms.alarms() if a.state != CLEARED]
        return {
            "scenario": {
                "seed": self.config.seed,
                "duration_s": self.config.duration_s,
                "poll_interval_s": self.config.poll_interval_s,
                "chambers": sorted(self.config.chambers),
            },
            "chambers": chambers,
            "alarms_open_at_end": len(active),
            "gateway": {
                "cycles": self.gateway.health.cycles,
                "poll_failures": self.gateway.health.poll_failures,
                "publish_failures": self.gateway.health.publish_failures,
                "push_failures": self.gateway.health.push_failures,
                "dead_lettered": self.gateway.health.dead_lettered,
            },
            "samples_stored": self.store.count(),
        }


def _settle_index(band: bytes | bytearray, window: int) -> int | None:
    """First index from which the loop stays in band for ``window`` samples."""
    run_start: int | None = None
    for i, ok in enumerate(band):
        if ok:
            if run_start is None:
                run_start = i
            if i - run_start + 1 >= window:
                return run_start
        else:
            run_start = None
    return None
