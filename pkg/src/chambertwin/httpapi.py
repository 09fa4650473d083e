"""HTTP face of the stack: samples, reports, alarms, setpoints, users, audit.

Every mutating endpoint runs the same sequence: authenticate the bearer
token, authorize the action against the permission matrix, apply the
change, then append exactly one audit record and only then return 2xx.
Authentication failures map to 401, authorization failures to 403,
validation problems to 400, missing things to 404.

GET /api/v1/live is a server-sent-events stream of telemetry samples fed
by historian ingest; the token may ride in the query string because
EventSource cannot set headers.
"""
from __future__ import annotations

import json
import logging
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from .historian import SampleStore, render_report
from .regmap import CHAMBER_DBS, RegisterHub
from .supervisory import (
    ACKED,
    ACTIVE,
    CLEARED,
    AlarmEngine,
    AuditLog,
    AuthError,
    Forbidden,
    InvariantError,
    SessionStore,
    TransitionError,
    UserStore,
)
from .supervisory.alarms import DEVIATION_TOL_RH_PCT, DEVIATION_TOL_T_C
from .telemetry import TelemetryError, parse_iso_utc, parse_sample

log = logging.getLogger(__name__)

SETPOINT_T_RANGE = (5.0, 60.0)
SETPOINT_RH_RANGE = (10.0, 95.0)
MAX_BODY_BYTES = 10 * 1024 * 1024
SSE_KEEPALIVE_S = 5.0


class LiveHub:
    """Fan-out of ingested samples to any number of SSE subscribers."""

    def __init__(self, depth: int = 500) -> None:
        self._depth = depth
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=self._depth)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def publish(self, sample) -> None:
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait(sample)
            except queue.Full:
                try:
                    q.get_nowait()  # slow consumer: drop its oldest
                except queue.Empty:
                    pass
                q.put_nowait(sample)

    def close(self) -> None:
        with self._lock:
            subscribers = list(self._subscribers)
            self._subscribers.clear()
        for q in subscribers:
            q.put(None)


class HubControls:
    """Adapter giving the API setpoint and gain access to the register map."""

    def __init__(self, hub: RegisterHub) -> None:
        self._hub = hub

    def get_setpoints(self, chamber: str) -> tuple[float, float]:
        return self._hub.setpoints(CHAMBER_DBS[chamber])

    def set_setpoints(self, chamber: str, t_c: float, rh_pct: float) -> None:
        self._hub.set_setpoints(CHAMBER_DBS[chamber], t_c, rh_pct)

    def get_gains(self, chamber: str):
        return self._hub.gains(CHAMBER_DBS[chamber])

    def set_gains(self, chamber: str, t_gains, rh_gains) -> None:
        self._hub.set_gains(CHAMBER_DBS[chamber], tuple(t_gains), tuple(rh_gains))


@dataclass
class ApiContext:
    store: SampleStore
    users: UserStore
    sessions: SessionStore
    audit: AuditLog
    alarms: AlarmEngine
    controls: HubControls
    live: LiveHub = field(default_factory=LiveHub)
    clock: Callable[[], float] = time.time


ROUTES: list[tuple[str, re.Pattern, str, str | None]] = [
    ("GET", re.compile(r"^/healthz$"), "h_health", None),
    ("POST", re.compile(r"^/api/v1/login$"), "h_login", None),
    ("POST", re.compile(r"^/api/v1/samples$"), "h_ingest", "samples.ingest"),
    ("GET", re.compile(r"^/api/v1/samples$"), "h_samples", "samples.read"),
    ("GET", re.compile(r"^/api/v1/report$"), "h_report", "report.read"),
    ("GET", re.compile(r"^/api/v1/alarms$"), "h_alarms", "alarms.read"),
    ("POST", re.compile(r"^/api/v1/alarms/(?P<alarm_id>\d+)/ack$"), "h_ack", "alarm.ack"),
    ("GET", re.compile(r"^/api/v1/setpoints/(?P<chamber>[A-D])$"), "h_setpoints_get", "setpoints.read"),
    ("POST", re.compile(r"^/api/v1/setpoints/(?P<chamber>[A-D])$"), "h_setpoints_set", "setpoint.write"),
    ("POST", re.compile(r"^/api/v1/gains/(?P<chamber>[A-D])$"), "h_gains_set", "gains.write"),
    ("GET", re.compile(r"^/api/v1/users$"), "h_users_list", "users.read"),
    ("POST", re.compile(r"^/api/v1/users$"), "h_users_add", "user.manage"),
    ("DELETE", re.compile(r"^/api/v1/users/(?P<username>[^/]+)$"), "h_users_del", "user.manage"),
    ("GET", re.compile(r"^/api/v1/audit$"), "h_audit", "audit.read"),
    ("GET", re.compile(r"^/api/v1/audit/verify$"), "h_audit_verify", "audit.read"),
    ("GET", re.compile(r"^/api/v1/live$"), "h_live", "live.read"),
]


class _BadRequest(ValueError):
    pass


def _ts_param(value: str) -> int:
    """Timestamps arrive as epoch milliseconds or ISO-8601 Z strings."""
    if re.fullmatch(r"\d{1,15}", value):
        return int(value)
    try:
        return parse_iso_utc(value)
    except ValueError as exc:
        raise _BadRequest(f"bad timestamp {value!r}") from exc


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "chambertwin"
    # headers and body go out as separate small segments; without this the
    # Nagle + delayed-ACK interaction stalls every response ~40 ms
    disable_nagle_algorithm = True

    # quiet the default stderr-per-request noise
    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    @property
    def ctx(self) -> ApiContext:
        return self.server.ctx  # type: ignore[attr-defined]

    # -- plumbing ------------------------------------------------------

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"), "application/json")

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    def _drain_body(self) -> None:
        """Read the body up front so an early 401/403 cannot leave unread
        bytes on the keep-alive connection and corrupt the next request."""
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            self.close_connection = True
            raise _BadRequest("body too large")
        self._raw_body = self.rfile.read(length) if length else b""

    def _body(self) -> dict | list:
        if not self._raw_body:
            return {}
        try:
            return json.loads(self._raw_body)
        except json.JSONDecodeError as exc:
            raise _BadRequest(f"body is not JSON: {exc}") from exc

    def _token(self, query: dict) -> str:
        header = self.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            return header[len("Bearer "):]
        if "token" in query:
            return query["token"][0]
        raise AuthError("missing bearer token")

    def _dispatch(self, method: str) -> None:
        split = urlsplit(self.path)
        query = parse_qs(split.query)
        for route_method, pattern, name, action in ROUTES:
            if route_method != method:
                continue
            match = pattern.match(split.path)
            if not match:
                continue
            try:
                self._drain_body()
                session = None
                if action is not None:
                    session = self.ctx.sessions.require(self._token(query), action)
                getattr(self, name)(session, query, match.groupdict())
            except AuthError as exc:
                self._error(401, str(exc))
            except Forbidden as exc:
                self._error(403, str(exc))
            except _BadRequest as exc:
                self._error(400, str(exc))
            except TelemetryError as exc:
                self._error(400, str(exc))
            except BrokenPipeError:
                pass
            except Exception as exc:  # pragma: no cover - last resort
                log.exception("unhandled API error")
                self._error(500, f"internal error: {exc}")
            return
        try:
            self._drain_body()
        except _BadRequest as exc:
            self._error(400, str(exc))
            return
        self._error(404, f"no route for {method} {split.path}")

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_DELETE(self) -> None:
        self._dispatch("DELETE")

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _audit(self, session, action: str, target: str, old: str, new: str):
        return self.ctx.audit.append(session.username, session.role, action, target, old, new)

    # -- open endpoints --------------------------------------------------

    def h_health(self, session, query, params) -> None:
        self._json(200, {"ok": True})

    def h_login(self, session, query, params) -> None:
        body = self._body()
        if not isinstance(body, dict):
            raise _BadRequest("expected a JSON object")
        username = str(body.get("username", ""))
        password = str(body.get("password", ""))
        issued = self.ctx.sessions.login(username, password)
        self._json(200, {
            "token": issued.token,
            "username": issued.username,
            "role": issued.role,
            "expires_at_ms": int(issued.expires_at * 1000),
        })

    # -- samples ----------------------------------------------------------

    def h_ingest(self, session, query, params) -> None:
        body = self._body()
        items = body.get("samples") if isinstance(body, dict) else body
        if not isinstance(items, list):
            raise _BadRequest('expected {"samples": [...]} or a JSON array')
        samples = [parse_sample(item) for item in items]
        accepted = self.ctx.store.ingest(samples)
        self._audit(session, "samples.ingest", "samples", "", str(accepted))
        self._json(200, {"accepted": accepted})

    def _range(self, query: dict) -> tuple[int, int]:
        try:
            return _ts_param(query["from"][0]), _ts_param(query["to"][0])
        except KeyError as exc:
            raise _BadRequest(f"missing query parameter {exc.args[0]!r}") from exc

    def h_samples(self, session, query, params) -> None:
        chamber = query.get("chamber", [""])[0]
        if chamber not in CHAMBER_DBS:
            raise _BadRequest(f"unknown chamber {chamber!r}")
        from_ms, to_ms = self._range(query)
        if "interval" in query:
            try:
                interval = int(query["interval"][0])
                rows = self.ctx.store.query(chamber, from_ms, to_ms, interval)
            except ValueError as exc:
                raise _BadRequest(str(exc)) from exc
        else:
            rows = self.ctx.store.query_raw(chamber, from_ms, to_ms)
        self._json(200, {
            "rows": [
                dict(sample.to_dict(), serial=i) for i, sample in enumerate(rows, start=1)
            ],
        })

    def h_report(self, session, query, params) -> None:
        chamber = query.get("chamber", [""])[0]
        if chamber not in CHAMBER_DBS:
            raise _BadRequest(f"unknown chamber {chamber!r}")
        from_ms, to_ms = self._range(query)
        fmt = query.get("format", ["csv"])[0]
        try:
            interval = int(query.get("interval", ["3600"])[0])
            doc = render_report(self.ctx.store, chamber, from_ms, to_ms, interval, fmt)
        except ValueError as exc:
            raise _BadRequest(str(exc)) from exc
        kind = "text/csv" if fmt == "csv" else "text/html"
        self._send(200, doc, f"{kind}; charset=utf-8")

    # -- alarms -----------------------------------------------------------

    def h_alarms(self, session, query, params) -> None:
        state = query.get("state", [None])[0]
        if state is not None and state not in (ACTIVE, ACKED, CLEARED):
            raise _BadRequest(f"unknown alarm state {state!r}")
        records = self.ctx.alarms.alarms(state=state)
        self._json(200, {"alarms": [a.to_dict() for a in records]})

    def h_ack(self, session, query, params) -> None:
        alarm_id = int(params["alarm_id"])
        record = self.ctx.alarms.get(alarm_id)
        if record is None:
            self._error(404, f"no alarm {alarm_id}")
            return
        old_state = record.state
        try:
            self.ctx.alarms.ack(alarm_id, by=session.username,
                                now_ms=int(self.ctx.clock() * 1000))
        except TransitionError as exc:
            raise _BadRequest(str(exc)) from exc
        rec = self._audit(session, "alarm.ack", f"alarm.{alarm_id}", old_state, ACKED)
        self._json(200, {"alarm": record.to_dict(), "audit_seq": rec.seq})

    # -- setpoints and gains ------------------------------------------------

    def h_setpoints_get(self, session, query, params) -> None:
        t_c, rh_pct = self.ctx.controls.get_setpoints(params["chamber"])
        # tolerances ride along so clients can draw alarm bands without
        # baking the loop config into the UI
        self._json(200, {"chamber": params["chamber"],
                         "t_c": round(t_c, 2), "rh_pct": round(rh_pct, 2),
                         "tol_t_c": DEVIATION_TOL_T_C, "tol_rh_pct": DEVIATION_TOL_RH_PCT})

    def h_setpoints_set(self, session, query, params) -> None:
        chamber = params["chamber"]
        body = self._body()
        try:
            t_c = float(body["t_c"])
            rh_pct = float(body["rh_pct"])
        except (KeyError, TypeError, ValueError) as exc:
            raise _BadRequest("setpoint body needs numeric t_c and rh_pct") from exc
        if not SETPOINT_T_RANGE[0] <= t_c <= SETPOINT_T_RANGE[1]:
            raise _BadRequest(f"t_c {t_c} outside {SETPOINT_T_RANGE}")
        if not SETPOINT_RH_RANGE[0] <= rh_pct <= SETPOINT_RH_RANGE[1]:
            raise _BadRequest(f"rh_pct {rh_pct} outside {SETPOINT_RH_RANGE}")
        old_t, old_rh = self.ctx.controls.get_setpoints(chamber)
        self.ctx.controls.set_setpoints(chamber, t_c, rh_pct)
        rec = self._audit(
            session, "setpoint.write", f"chamber.{chamber}.setpoint",
            f"{old_t:.2f}/{old_rh:.2f}", f"{t_c:.2f}/{rh_pct:.2f}",
        )
        self._json(200, {"chamber": chamber, "t_c": t_c, "rh_pct": rh_pct,
                         "audit_seq": rec.seq})

    def h_gains_set(self, session, query, params) -> None:
        chamber = params["chamber"]
        body = self._body()
        loop = body.get("loop")
        if loop not in ("t", "rh"):
            raise _BadRequest('gains body needs loop: "t" or "rh"')
        try:
            gains = (float(body["kp"]), float(body["ti"]), float(body["td"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise _BadRequest("gains body needs numeric kp, ti, td") from exc
        old_t, old_rh = self.ctx.controls.get_gains(chamber)
        if loop == "t":
            self.ctx.controls.set_gains(chamber, gains, old_rh)
            old = old_t
        else:
            self.ctx.controls.set_gains(chamber, old_t, gains)
            old = old_rh
        rec = self._audit(
            session, "gains.write", f"chamber.{chamber}.gains.{loop}",
            "/".join(f"{g:.4f}" for g in old),
            "/".join(f"{g:.4f}" for g in gains),
        )
        self._json(200, {"chamber": chamber, "loop": loop,
                         "kp": gains[0], "ti": gains[1], "td": gains[2],
                         "audit_seq": rec.seq})

    # -- users --------------------------------------------------------------

    def h_users_list(self, session, query, params) -> None:
        users = [
            {"username": u.username, "role": u.role, "active": u.active}
            for u in self.ctx.users.list_users()
        ]
        self._json(200, {"users": users})

    def h_users_add(self, session, query, params) -> None:
        body = self._body()
        try:
            username = str(body["username"])
            password = str(body["password"])
            role = str(body["role"])
        except (KeyError, TypeError) as exc:
            raise _BadRequest("user body needs username, password, role") from exc
        try:
            account = self.ctx.users.add_user(username, password, role)
        except ValueError as exc:
            raise _BadRequest(str(exc)) from exc
        rec = self._audit(session, "user.manage", f"user.{username}", "", f"created:{role}")
        self._json(200, {"username": account.username, "role": account.role,
                         "active": account.active, "audit_seq": rec.seq})

    def h_users_del(self, session, query, params) -> None:
        username = params["username"]
        account = self.ctx.users.get(username)
        if account is None:
            self._error(404, f"no user {username!r}")
            return
        try:
            self.ctx.users.delete_user(username)
        except (InvariantError, ValueError) as exc:
            raise _BadRequest(str(exc)) from exc
        rec = self._audit(session, "user.manage", f"user.{username}",
                          account.role, "deleted")
        self._json(200, {"deleted": username, "audit_seq": rec.seq})

    # -- audit ---------------------------------------------------------------

    def h_audit(self, session, query, params) -> None:
        from_ms = _ts_param(query["from"][0]) if "from" in query else None
        to_ms = _ts_param(query["to"][0]) if "to" in query else None
        records = []
        for record in self.ctx.audit.records():
            if from_ms is not None and record.ts_ms < from_ms:
                continue
            if to_ms is not None and record.ts_ms >= to_ms:
                continue
            records.append(record.to_dict())
        self._json(200, {"records": records})

    def h_audit_verify(self, session, query, params) -> None:
        ok, bad_seq = self.ctx.audit.verify()
        self._json(200, {"ok": ok, "bad_seq": bad_seq})

    # -- live stream ----------------------------------------------------------

    def h_live(self, session, query, params) -> None:
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        hub = self.ctx.live
        q = hub.subscribe()
        try:
            self.wfile.write(b": connected\n\n")
            self.wfile.flush()
            idle = 0.0
            while not self.server.stopping:  # type: ignore[attr-defined]
                try:
                    sample = q.get(timeout=0.25)
                except queue.Empty:
                    idle += 0.25
                    if idle >= SSE_KEEPALIVE_S:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        idle = 0.0
                    continue
                if sample is None:
                    break
                idle = 0.0
                self.wfile.write(b"data: " + sample.canonical_json() + b"\n\n")
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            hub.unsubscribe(q)
            self.close_connection = True


class _Httpd(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, ctx: ApiContext):
        self.ctx = ctx
        self.stopping = False
        super().__init__(address, _Handler)


class ApiServer:
    """Owns the listening socket; hook `ctx.live` up to a sample source."""

    def __init__(self, ctx: ApiContext, host: str = "127.0.0.1", port: int = 0) -> None:
        self.ctx = ctx
        self._httpd = _Httpd((host, port), ctx)
        self._thread: threading.Thread | None = None
        ctx.store.add_listener(ctx.live.publish)

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="api-server", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.stopping = True
        self.ctx.live.close()
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "ApiServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
