"""Telemetry gateway: register server in, MQTT and historian out.

Each poll cycle reads one consistent snapshot per chamber over the wire
protocol, publishes it as canonical JSON at QoS 1, and queues it for the
historian. The MQTT side prefers freshness (bounded drop-oldest queue);
the historian side is loss-averse and keeps samples pending until the API
accepts them. Rejected batches (4xx) go to a dead-letter file instead of
blocking the pipeline forever.
"""
from __future__ import annotations

import http.client
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from urllib.parse import urlsplit

import requests

from .mqtt import MqttClient, PendingPublishes
from .regmap import CHAMBER_DBS, OFF_GAINS, parse_block
from .telemetry import TelemetrySample, from_block, telemetry_topic
from .wire import FrameError, RegisterClient, WireClientError

log = logging.getLogger(__name__)

HISTORIAN_BATCH_LIMIT = 100


_dumps = json.dumps  # the post() kwarg below shadows the module name


class _PostResult:
    __slots__ = ("status_code",)

    def __init__(self, status_code: int) -> None:
        self.status_code = status_code


class _PostClient:
    """Keep-alive JSON POST on stdlib http.client.

    The gateway fires thousands of small pushes per accelerated run and
    the per-request overhead of a full-featured HTTP library is the
    dominant cost, so the default client is this thin one. Anything with
    a requests-like ``post`` can be injected instead. Network errors are
    raised as ``requests.ConnectionError`` so callers need one except
    clause regardless of which client is in play.
    """

    def __init__(self) -> None:
        self._conns: dict[str, "http.client.HTTPConnection"] = {}

    def post(self, url: str, json: object = None, headers: dict | None = None,
             timeout: float = 10.0, data: bytes | None = None) -> _PostResult:
        parts = urlsplit(url)
        body = data if data is not None else _dumps(json).encode()
        hdrs = {"Content-Type": "application/json", **(headers or {})}
        for attempt in (0, 1):
            conn = self._conns.get(parts.netloc)
            if conn is None:
                conn = http.client.HTTPConnection(parts.netloc, timeout=timeout)
                self._conns[parts.netloc] = conn
            try:
                conn.request("POST", parts.path or "/", body, hdrs)
                resp = conn.getresponse()
                resp.read()  # drain so the connection can be reused
                return _PostResult(resp.status)
            except (http.client.HTTPException, OSError) as exc:
                conn.close()
                del self._conns[parts.netloc]
                if attempt:  # a fresh connection failed too: genuine trouble
                    raise requests.ConnectionError(str(exc)) from exc
        raise AssertionError("unreachable")


@dataclass
class GatewayConfig:
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    site: str = "default"
    poll_interval_s: float = 5.0
    register_host: str = "127.0.0.1"
    register_port: int = 10102
    historian_url: str = ""
    auth_token: str = ""
    chambers: tuple[str, ...] = ("A", "B", "C", "D")
    dead_letter_path: str = ""

    @classmethod
    def from_json(cls, source: str | Path | dict) -> "GatewayConfig":
        if isinstance(source, dict):
            doc = source
        else:
            doc = json.loads(Path(source).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown gateway config keys: {sorted(unknown)}")
        if "chambers" in doc:
            doc = dict(doc, chambers=tuple(doc["chambers"]))
        return cls(**doc)


@dataclass
class GatewayHealth:
    poll_failures: int = 0
    publish_failures: int = 0
    push_failures: int = 0
    dead_lettered: int = 0
    cycles: int = 0
    last_error: str = ""


class Gateway:
    def __init__(
        self,
        config: GatewayConfig,
        *,
        register_client: RegisterClient | None = None,
        mqtt_client: MqttClient | None = None,
        http: "requests.Session | None" = None,
        sleep_fn: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.registers = register_client or RegisterClient(
            config.register_host, config.register_port
        )
        self.mqtt = mqtt_client or MqttClient(
            config.broker_host, config.broker_port, f"gateway-{config.site}"
        )
        self.http = http or _PostClient()
        self.sleep = sleep_fn
        self.health = GatewayHealth()
        self.pending: list[TelemetrySample] = []
        self._register_backoff_s = 1.0
        self._ack_pending: "PendingPublishes | None" = None
        self.last_samples: dict[str, TelemetrySample] = {}

    # polling

    def poll_chamber(self, chamber: str) -> TelemetrySample:
        """One wire read covering everything a sample needs: tear-free."""
        db = CHAMBER_DBS[chamber]
        raw = self.registers.read(db, 0, OFF_GAINS + 24)
        return from_block(chamber, parse_block(raw))

    def poll_cycle(self) -> list[TelemetrySample]:
        """Poll every chamber once; skipped chambers do not abort the cycle."""
        raws: dict[str, bytes] = {}
        try:
            blocks = self.registers.read_many(
                [(CHAMBER_DBS[ch], 0, OFF_GAINS + 24) for ch in self.config.chambers]
            )
            raws = dict(zip(self.config.chambers, blocks))
        except (OSError, FrameError, WireClientError):
            # fall back to one read per chamber so a single bad block or a
            # mid-batch disconnect degrades per chamber, not per cycle
            self.registers.close()
        samples: list[TelemetrySample] = []
        for chamber in self.config.chambers:
            try:
                raw = raws.get(chamber)
                if raw is None:
                    db = CHAMBER_DBS[chamber]
                    raw = self.registers.read(db, 0, OFF_GAINS + 24)
                sample = from_block(chamber, parse_block(raw))
            except (OSError, FrameError, WireClientError, ValueError) as exc:
                self.health.poll_failures += 1
                self.health.last_error = f"poll {chamber}: {exc}"
                log.warning("register poll failed for %s: %s", chamber, exc)
                self.sleep(self._register_backoff_s)
                self._register_backoff_s = min(self._register_backoff_s * 2.0, 60.0)
                self.registers.close()  # force a fresh connection next try
                continue
            self._register_backoff_s = 1.0
            previous = self.last_samples.get(chamber)
            if previous is not None and sample.ts <= previous.ts:
                continue  # same simulation instant: nothing new to report
            self.last_samples[chamber] = sample
            samples.append(sample)
        return samples

    # publishing

    def publish(self, sample: TelemetrySample) -> bool:
        topic = telemetry_topic(self.config.site, sample.chamber)
        ok = self.mqtt.publish(topic, sample.canonical_json(), qos=1)
        if not ok:
            self.health.publish_failures += 1
        return ok

    def publish_batch(self, samples: list[TelemetrySample]) -> bool:
        if not samples:
            return True
        ok = self.mqtt.publish_many(
            [
                (telemetry_topic(self.config.site, s.chamber), s.canonical_json())
                for s in samples
            ],
            qos=1,
        )
        if not ok:
            self.health.publish_failures += 1
        return ok

    def publish_batch_nowait(self, samples: list[TelemetrySample]) -> None:
        """Send telemetry and defer the ack wait to the next cycle.

        The broker acks while the simulation runs the next poll interval,
        so on a healthy link the wait in :meth:`collect_publish_acks` is
        already satisfied when it runs.
        """
        self.collect_publish_acks()
        if not samples:
            return
        self._ack_pending = self.mqtt.publish_many_nowait(
            [
                (telemetry_topic(self.config.site, s.chamber), s.canonical_json())
                for s in samples
            ],
            qos=1,
        )

    def collect_publish_acks(self) -> None:
        """Settle the previous cycle's publish batch, if one is outstanding."""
        if self._ack_pending is None:
            return
        pending, self._ack_pending = self._ack_pending, None
        if not self.mqtt.collect_publishes(pending):
            self.health.publish_failures += 1

    # historian push

    def push_historian(self) -> int:
        """Send pending samples in batches; returns how many were accepted."""
        if not self.config.historian_url or not self.pending:
            return 0
        accepted = 0
        while self.pending:
            batch = self.pending[:HISTORIAN_BATCH_LIMIT]
            # splice the already-serialized samples instead of re-dumping
            body = b"[" + b",".join(s.canonical_json() for s in batch) + b"]"
            try:
                resp = self.http.post(
                    f"{self.config.historian_url}/api/v1/samples",
                    data=body,
                    headers=self._auth_headers(),
                    timeout=10.0,
                )
            except requests.RequestException as exc:
                self.health.push_failures += 1
                self.health.last_error = f"push: {exc}"
                return accepted  # keep pending; retried next cycle
            if resp.status_code >= 500:
                self.health.push_failures += 1
                self.health.last_error = f"push: HTTP {resp.status_code}"
                return accepted
            if resp.status_code >= 400:
                self._dead_letter(batch, resp.status_code)
                del self.pending[: len(batch)]
                continue
            del self.pending[: len(batch)]
            accepted += len(batch)
        return accepted

    def _auth_headers(self) -> dict[str, str]:
        if not self.config.auth_token:
            return {}
        return {"Authorization": f"Bearer {self.config.auth_token}"}

    def _dead_letter(self, batch: list[TelemetrySample], status: int) -> None:
        self.health.dead_lettered += len(batch)
        log.error("historian rejected %d samples with HTTP %d", len(batch), status)
        if not self.config.dead_letter_path:
            return
        path = Path(self.config.dead_letter_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as sink:
            for sample in batch:
                record = {"status": status, "sample": sample.to_dict()}
                sink.write(json.dumps(record, sort_keys=True) + "\n")

    # one full cycle

    def cycle(self) -> list[TelemetrySample]:
        samples = self.poll_cycle()
        self.publish_batch_nowait(samples)
        self.pending.extend(samples)
        self.push_historian()
        self.health.cycles += 1
        return samples

    def run(self, should_stop: Callable[[], bool], max_cycles: int | None = None) -> None:
        done = 0
        while not should_stop():
            self.cycle()
            done += 1
            if max_cycles is not None and done >= max_cycles:
                return
            self.sleep(self.config.poll_interval_s)
