"""TCP aggregation server and client processes speaking the framed protocol."""

import logging
import queue
import socket
import threading
import time

import numpy as np

from ..errors import ConfigError, EgaError, FrameError, ProtocolError
from ..fedsim.loop import (
    GlobalModel,
    MetricsRecord,
    compute_round_n,
    encode_update,
    evaluate,
    local_train,
    client_rngs,
    select_clients,
    server_round,
)
from . import protocol as wire

log = logging.getLogger(__name__)

ERR_PROTOCOL = 1
ERR_ROUND_ABORTED = 2
ERR_AUTH = 3


class _Conn:
    def __init__(self, sock, client_id):
        self.sock = sock
        self.client_id = client_id
        self.send_lock = threading.Lock()

    def send(self, msg):
        with self.send_lock:
            return wire.send_frame(self.sock, msg)


def _reader(conn, inbox):
    """Pump frames from one connection into the shared inbox."""
    try:
        while True:
            msg = wire.read_frame(conn.sock)
            inbox.put((conn.client_id, msg, len(msg.payload) + wire.FRAME_OVERHEAD))
    except (ConnectionError, OSError, FrameError) as exc:
        inbox.put((conn.client_id, None, repr(exc)))


def parse_address(text, default_host="127.0.0.1"):
    host, _, port = text.rpartition(":")
    return (host or default_host), int(port)


class AggregationServer:
    """Runs the EGA server procedure against ``num_clients`` remote clients.

    Every round the server picks ``m = codec.m_train`` of the registered
    clients with the same seeded rule as the simulator, sends ``RoundStart``
    (model as float32 plus ``n``), waits for exactly ``m`` uploads, decodes the
    averaged encodings and replies with ``RoundResult``.
    """

    def __init__(self, cfg, codec, task, test_data, num_clients, token="",
                 host="127.0.0.1", port=0, join_timeout=30.0, round_timeout=30.0):
        if cfg.algorithm == "qfedavg":
            # client weights depend on losses the server never sees over the wire
            raise ConfigError("qfedavg is only supported by the in-process simulator")
        if not cfg.ega_enabled:
            raise ConfigError("the network harness carries encoded updates only")
        if codec.m_train != cfg.clients_per_round:
            raise ConfigError(
                f"clients_per_round={cfg.clients_per_round} but the codec was trained "
                f"for m={codec.m_train}"
            )
        self.cfg = cfg
        self.codec = codec
        self.task = task
        self.test_data = test_data
        self.num_clients = num_clients
        self.token = token
        self.join_timeout = join_timeout
        self.round_timeout = round_timeout
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()
        self.conns = {}
        self.inbox = queue.Queue()
        self.metrics = []
        self.upload_frame_bytes = []
        self.upload_payloads = []
        self.aborted = None

    def _accept_all(self):
        deadline = time.monotonic() + self.join_timeout
        while len(self.conns) < self.num_clients:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ProtocolError(
                    f"only {len(self.conns)} of {self.num_clients} clients joined in time"
                )
            self.listener.settimeout(remaining)
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            sock.settimeout(self.join_timeout)
            try:
                msg = wire.read_frame(sock)
                if msg.kind != wire.Kind.HELLO:
                    raise ProtocolError(f"expected Hello, got {msg.kind.name}")
                cid, token = wire.parse_hello(msg)
                if token != self.token:
                    wire.send_frame(sock, wire.error(0, ERR_AUTH, "bad run token"))
                    raise ProtocolError(f"client {cid} presented a bad token")
                if cid in self.conns or not 0 <= cid < self.num_clients:
                    raise ProtocolError(f"client id {cid} invalid or already joined")
            except (EgaError, OSError) as exc:
                log.warning("rejecting connection: %s", exc)
                sock.close()
                continue
            sock.settimeout(None)
            conn = _Conn(sock, cid)
            self.conns[cid] = conn
            threading.Thread(target=_reader, args=(conn, self.inbox), daemon=True).start()

    def _collect(self, round_idx, chosen):
        """Block until every chosen client uploaded for this round."""
        pending = set(chosen)
        uploads = {}
        deadline = time.monotonic() + self.round_timeout
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ProtocolError(f"round {round_idx}: timed out waiting for {sorted(pending)}")
            try:
                cid, msg, extra = self.inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if msg is None:
                raise ProtocolError(f"round {round_idx}: client {cid} disconnected ({extra})")
            if msg.kind != wire.Kind.ENCODED_UPLOAD:
                raise ProtocolError(f"round {round_idx}: unexpected {msg.kind.name} from {cid}")
            if msg.round != round_idx:
                raise ProtocolError(f"client {cid} uploaded for round {msg.round}, now {round_idx}")
            if cid in uploads:
                raise ProtocolError(f"duplicate upload from client {cid} in round {round_idx}")
            if cid not in pending:
                raise ProtocolError(f"client {cid} was not selected for round {round_idx}")
            update = wire.parse_encoded_upload(msg)
            if update.client_id != cid:
                raise ProtocolError(f"connection {cid} uploaded as client {update.client_id}")
            uploads[cid] = update
            self.upload_frame_bytes.append(extra)
            self.upload_payloads.append(len(msg.payload))
            pending.discard(cid)
        return [uploads[c] for c in chosen]

    def _broadcast(self, msg, ids=None):
        for cid in self.conns if ids is None else ids:
            try:
                self.conns[cid].send(msg)
            except OSError:
                pass

    def run(self, w0=None):
        """Serve ``cfg.rounds`` rounds; returns the final ``GlobalModel``."""
        cfg = self.cfg
        m = self.codec.m_train
        model = GlobalModel(np.array(
            self.task.init_params() if w0 is None else w0, dtype=np.float64
        ))
        try:
            self._accept_all()
            for t in range(cfg.rounds):
                chosen = [int(c) for c in select_clients(cfg.seed, t, self.num_clients, m)]
                n = compute_round_n(cfg, model)
                start = wire.round_start(t, model.w, n)
                down = 0
                for cid in chosen:
                    down += self.conns[cid].send(start)
                try:
                    updates = self._collect(t, chosen)
                    model = server_round(model, updates, self.codec, cfg)
                except EgaError as exc:
                    self.aborted = (t, str(exc))
                    log.error("round %d aborted: %s", t, exc)
                    self.metrics.append(MetricsRecord(
                        t, cfg.algorithm + ":aborted", True, float("nan"), float("nan"),
                        sum(self.upload_frame_bytes[-m:]), down, n,
                    ))
                    self._broadcast(wire.error(t, ERR_ROUND_ABORTED, str(exc)))
                    return model
                result = wire.round_result(t, model.w)
                for cid in chosen:
                    down += self.conns[cid].send(result)
                loss, acc = evaluate(self.task, model.w, *self.test_data)
                self.metrics.append(MetricsRecord(
                    t, cfg.algorithm, True, loss, acc,
                    sum(self.upload_frame_bytes[-m:]), down, n,
                ))
            self._broadcast(wire.bye(cfg.rounds, "done"))
            return model
        finally:
            time.sleep(0.05)
            for conn in self.conns.values():
                try:
                    conn.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.sock.close()
            self.listener.close()


def serve(cfg, codec, task, test_data, num_clients, **kwargs):
    server = AggregationServer(cfg, codec, task, test_data, num_clients, **kwargs)
    model = server.run()
    return model, server


def run_client(address, client, cfg, task, codec, token="", connect_timeout=30.0):
    """Client loop: train on ``RoundStart``, upload encodings, stop on ``Bye``.

    Returns the number of rounds this client took part in.
    """
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection(address, timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    rounds = 0
    with sock:
        wire.send_frame(sock, wire.hello(client.client_id, token))
        while True:
            try:
                msg = wire.read_frame(sock)
            except ConnectionError:
                raise ProtocolError("server closed the connection") from None
            if msg.kind == wire.Kind.ROUND_START:
                w, n, weight = wire.parse_round_start(msg)
                train_rng, quant_rng = client_rngs(cfg.seed, msg.round, client.client_id)
                delta, _ = local_train(w, client, cfg, task, train_rng)
                update = encode_update(
                    delta, weight, codec, cfg, n, quant_rng, msg.round, client.client_id
                )
                wire.send_frame(sock, wire.encoded_upload(update))
                rounds += 1
            elif msg.kind == wire.Kind.ROUND_RESULT:
                wire.parse_round_result(msg)
            elif msg.kind == wire.Kind.BYE:
                return rounds
            elif msg.kind == wire.Kind.ERROR:
                code, text = wire.parse_error(msg)
                raise ProtocolError(f"server error {code}: {text}")
            else:
                raise ProtocolError(f"unexpected {msg.kind.name} from server")
