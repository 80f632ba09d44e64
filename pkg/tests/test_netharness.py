import socket
import threading

import numpy as np
import pytest

from ega.analysis.comm import uplink_bytes_per_client
from ega.codec import CodecModel, IdentityCodec
from ega.errors import ConfigError, ProtocolError
from ega.fedsim.loop import EncodedUpdate, FlConfig, run_federated
from ega.fedsim.tasks import make_quadratic_clients
from ega.netharness import protocol as wire
from ega.netharness.server import AggregationServer, parse_address, run_client

M = 4


@pytest.fixture
def setup():
    task, clients = make_quadratic_clients(M, 12, 20, np.random.default_rng(0))
    x = np.concatenate([c.x for c in clients])
    y = np.concatenate([c.y for c in clients])
    cfg = FlConfig(rounds=3, clients_per_round=M, learning_rate=0.05, s=32, n0=1.0, wire_float32=True)
    return task, clients, (x, y), cfg


def start_clients(server, clients, cfg, task, codec, token="tok"):
    errors = []

    def one(c):
        try:
            run_client(server.address, c, cfg, task, codec, token, connect_timeout=10)
        except Exception as exc:  # collected for the assertion below
            errors.append(exc)

    threads = [threading.Thread(target=one, args=(c,), daemon=True) for c in clients]
    for t in threads:
        t.start()
    return threads, errors


def rogue(address, client_id, token, on_round_start):
    """Minimal hand-driven client for fault injection."""
    sock = socket.create_connection(address, timeout=10)
    wire.send_frame(sock, wire.hello(client_id, token))
    try:
        while True:
            msg = wire.read_frame(sock)
            if msg.kind == wire.Kind.ROUND_START:
                if on_round_start(sock, msg) == "stop":
                    return
            elif msg.kind in (wire.Kind.BYE, wire.Kind.ERROR):
                return
    except (ConnectionError, OSError):
        pass
    finally:
        sock.close()


class TestServer:
    def test_matches_simulator(self, setup):
        task, clients, test, cfg = setup
        codec = CodecModel.build(8, 6, 32, M, rng=np.random.default_rng(1))
        sim, sim_metrics = run_federated(cfg, task, clients, test, codec)
        server = AggregationServer(cfg, codec, task, test, M, token="tok", round_timeout=20)
        threads, errors = start_clients(server, clients, cfg, task, codec)
        net = server.run()
        for t in threads:
            t.join(10)
        assert not errors and server.aborted is None
        np.testing.assert_allclose(net.w, sim.w, atol=1e-6)
        assert [r.loss for r in server.metrics] == pytest.approx([r.loss for r in sim_metrics], abs=1e-9)

    def test_upload_sizes_are_encoded_blocks(self, setup):
        task, clients, test, cfg = setup
        codec = IdentityCodec(8, 32, M, h=10)
        server = AggregationServer(cfg, codec, task, test, M, token="tok")
        start_clients(server, clients, cfg, task, codec)
        server.run()
        d = task.dim
        k = -(-d // codec.b)
        assert set(server.upload_payloads) == {wire.UPLOAD_HEADER.size + k * codec.h * 4}
        assert set(server.upload_frame_bytes) == {uplink_bytes_per_client(d, codec.b, codec.h) + wire.FRAME_OVERHEAD}
        assert all(p != wire.UPLOAD_HEADER.size + 4 * d for p in server.upload_payloads)

    def test_disconnect_aborts_round(self, setup):
        task, clients, test, cfg = setup
        codec = IdentityCodec(8, 32, M)
        server = AggregationServer(cfg, codec, task, test, M, token="tok", round_timeout=10)
        start_clients(server, clients[:-1], cfg, task, codec)
        threading.Thread(
            target=rogue, args=(server.address, M - 1, "tok", lambda s, m: "stop"), daemon=True
        ).start()
        server.run()
        assert server.aborted is not None and server.aborted[0] == 0
        assert server.metrics[-1].algo == "fedavg:aborted"
        assert "disconnected" in server.aborted[1]

    def test_duplicate_upload_is_protocol_error(self, setup):
        task, clients, test, cfg = setup
        codec = IdentityCodec(8, 32, M)
        server = AggregationServer(cfg, codec, task, test, M, token="tok", round_timeout=10)
        start_clients(server, clients[:-1], cfg, task, codec)

        def twice(sock, msg):
            n = wire.parse_round_start(msg)[1]
            upd = wire.encoded_upload(EncodedUpdate(msg.round, M - 1, 1.0, np.zeros((2, 8)), n, 12))
            wire.send_frame(sock, upd)
            wire.send_frame(sock, upd)

        threading.Thread(target=rogue, args=(server.address, M - 1, "tok", twice), daemon=True).start()
        server.run()
        assert server.aborted is not None
        assert "duplicate" in server.aborted[1] or "round" in server.aborted[1]

    def test_timeout_aborts(self, setup):
        task, clients, test, cfg = setup
        codec = IdentityCodec(8, 32, M)
        server = AggregationServer(cfg, codec, task, test, M, token="tok", round_timeout=0.5)
        start_clients(server, clients[:-1], cfg, task, codec)
        threading.Thread(
            target=rogue, args=(server.address, M - 1, "tok", lambda s, m: None), daemon=True
        ).start()
        server.run()
        assert server.aborted is not None and "timed out" in server.aborted[1]

    def test_bad_token_rejected(self, setup):
        task, clients, test, cfg = setup
        codec = IdentityCodec(8, 32, M)
        server = AggregationServer(cfg, codec, task, test, M, token="tok", join_timeout=1.0)
        sock = socket.create_connection(server.address)
        wire.send_frame(sock, wire.hello(0, "wrong"))
        outcome = []

        def serve():
            try:
                server.run()
            except ProtocolError as exc:
                outcome.append(exc)

        runner = threading.Thread(target=serve, daemon=True)
        runner.start()
        reply = wire.read_frame(sock)
        assert reply.kind == wire.Kind.ERROR and wire.parse_error(reply)[0] == 3
        sock.close()
        runner.join(5)
        assert len(outcome) == 1

    def test_join_deadline(self, setup):
        task, clients, test, cfg = setup
        server = AggregationServer(cfg, IdentityCodec(8, 32, M), task, test, M, join_timeout=0.2)
        with pytest.raises(ProtocolError, match="joined"):
            server.run()

    def test_rejects_unsupported_configs(self, setup):
        task, _, test, cfg = setup
        from dataclasses import replace

        with pytest.raises(ConfigError):
            AggregationServer(replace(cfg, algorithm="qfedavg"), IdentityCodec(8, 32, M), task, test, M)
        with pytest.raises(ConfigError):
            AggregationServer(cfg, IdentityCodec(8, 32, M + 1), task, test, M)

    def test_parse_address(self):
        assert parse_address("0.0.0.0:9000") == ("0.0.0.0", 9000)
        assert parse_address(":81") == ("127.0.0.1", 81)
