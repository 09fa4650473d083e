"""Gateway behavior: polling, MQTT publishing, historian pushes, failure paths."""
from __future__ import annotations

import json
import time

import pytest

from chambertwin.gateway import Gateway, GatewayConfig
from chambertwin.mqtt import MiniBroker, MqttClient
from chambertwin.regmap import RegisterHub
from chambertwin.telemetry import parse_sample
from chambertwin.wire import RegisterClient, RegisterServer
from http_stub import HistorianStub

EPOCH_MS = 1714663800000


def _publish_all(hub: RegisterHub, epoch_ms: int = EPOCH_MS, t1: float = 39.74) -> None:
    for db in (1, 2, 3, 4):
        hub.publish(
            db,
            sensors=[(t1, 76.14)] + [(40.0, 75.0)] * 6,
            pressure_inwc=0.5,
            heater_duty=0.25,
            cool_duty=0.0,
            steam_current_a=6.5,
            alarm_word=0,
            status_word=1,
            epoch_ms=epoch_ms,
        )
        hub.set_setpoints(db, 40.0, 75.0)


@pytest.fixture()
def rig():
    hub = RegisterHub()
    _publish_all(hub)
    with RegisterServer(hub, port=0) as reg_server, MiniBroker() as broker:
        host, port = reg_server.address
        config = GatewayConfig(
            broker_host=broker.address[0],
            broker_port=broker.address[1],
            register_host=host,
            register_port=port,
            site="default",
        )
        yield hub, broker, config


def _await(predicate, timeout_s=5.0):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


class TestConfig:
    def test_from_json_dict(self):
        config = GatewayConfig.from_json({"site": "plant7", "poll_interval_s": 2.0})
        assert config.site == "plant7"
        assert config.poll_interval_s == 2.0

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "gw.json"
        path.write_text(json.dumps({"broker_port": 2883, "chambers": ["A", "B"]}))
        config = GatewayConfig.from_json(path)
        assert config.broker_port == 2883
        assert config.chambers == ("A", "B")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            GatewayConfig.from_json({"borker_host": "x"})


class TestPolling:
    def test_poll_chamber_value_fidelity(self, rig):
        _, _, config = rig
        gateway = Gateway(config)
        sample = gateway.poll_chamber("A")
        assert sample.sensors[0].t_c == 39.74
        assert sample.sensors[0].rh_pct == 76.14
        assert sample.ts == "2024-05-02T15:30:00Z"
        payload = sample.canonical_json().decode()
        assert '"t_c":39.74' in payload
        gateway.registers.close()

    def test_same_epoch_not_reported_twice(self, rig):
        _, _, config = rig
        gateway = Gateway(config)
        assert len(gateway.poll_cycle()) == 4
        assert gateway.poll_cycle() == []
        gateway.registers.close()

    def test_ts_strictly_increasing(self, rig):
        hub, _, config = rig
        gateway = Gateway(config)
        first = {s.chamber: s.ts for s in gateway.poll_cycle()}
        _publish_all(hub, epoch_ms=EPOCH_MS + 5000)
        second = {s.chamber: s.ts for s in gateway.poll_cycle()}
        for chamber in "ABCD":
            assert second[chamber] > first[chamber]
        gateway.registers.close()

    def test_register_down_backoff_sequence(self):
        sleeps: list[float] = []
        config = GatewayConfig(register_port=1, chambers=("A",))
        gateway = Gateway(config, sleep_fn=sleeps.append)
        for _ in range(3):
            assert gateway.poll_cycle() == []
        assert sleeps == [1.0, 2.0, 4.0]
        assert gateway.health.poll_failures == 3
        assert "poll A" in gateway.health.last_error


class TestPublish:
    def test_end_to_end_value_fidelity(self, rig):
        _, broker, config = rig
        received = []
        sub = MqttClient(*broker.address, "sub")
        sub.subscribe("stability/+/+/telemetry", received.append)
        sub.connect()

        gateway = Gateway(config)
        samples = gateway.cycle()
        assert len(samples) == 4
        assert _await(lambda: len(received) == 4)
        by_topic = {p.topic: p for p in received}
        assert set(by_topic) == {
            f"stability/default/{c}/telemetry" for c in "ABCD"
        }
        sample = parse_sample(by_topic["stability/default/A/telemetry"].payload)
        assert sample.sensors[0].t_c == 39.74
        sub.disconnect()
        gateway.mqtt.disconnect()
        gateway.registers.close()


class TestHistorianPush:
    def _gateway(self, config, url):
        config.historian_url = url
        config.auth_token = "token-1"
        return Gateway(config)

    def test_batching_150_samples_two_posts(self, rig):
        hub, _, config = rig
        with HistorianStub() as stub:
            gateway = self._gateway(config, stub.url)
            for i in range(150 // 4 + 1):
                _publish_all(hub, epoch_ms=EPOCH_MS + 5000 * i)
                gateway.pending.extend(gateway.poll_cycle())
            gateway.pending = gateway.pending[:150]
            accepted = gateway.push_historian()
            assert accepted == 150
            sizes = [len(b) for b in stub.bodies()]
            assert sizes == [100, 50]
            assert stub.requests[0]["auth"] == "Bearer token-1"
            assert stub.requests[0]["path"] == "/api/v1/samples"
            gateway.registers.close()

    def test_5xx_keeps_pending_for_retry(self, rig):
        _, _, config = rig
        with HistorianStub() as stub:
            stub.statuses.extend([500, 500])
            gateway = self._gateway(config, stub.url)
            gateway.pending.extend(gateway.poll_cycle())
            assert gateway.push_historian() == 0
            assert len(gateway.pending) == 4
            assert gateway.push_historian() == 0
            assert gateway.push_historian() == 4
            assert gateway.pending == []
            assert gateway.health.push_failures == 2
            # the successful POST carries the same batch the 500s rejected
            assert stub.bodies()[0] == stub.bodies()[2]
            gateway.registers.close()

    def test_4xx_dead_letters_and_moves_on(self, rig, tmp_path):
        _, _, config = rig
        dead = tmp_path / "dead.jsonl"
        config.dead_letter_path = str(dead)
        with HistorianStub() as stub:
            stub.statuses.append(400)
            gateway = self._gateway(config, stub.url)
            gateway.pending.extend(gateway.poll_cycle())
            assert gateway.push_historian() == 0
            assert gateway.pending == []
            assert gateway.health.dead_lettered == 4
            lines = dead.read_text().strip().splitlines()
            assert len(lines) == 4
            first = json.loads(lines[0])
            assert first["status"] == 400
            assert first["sample"]["chamber"] == "A"
            gateway.registers.close()

    def test_historian_unreachable_keeps_pending(self, rig):
        _, _, config = rig
        gateway = self._gateway(config, "http://127.0.0.1:1")
        gateway.pending.extend(gateway.poll_cycle())
        assert gateway.push_historian() == 0
        assert len(gateway.pending) == 4
        assert gateway.health.push_failures == 1
        gateway.registers.close()
