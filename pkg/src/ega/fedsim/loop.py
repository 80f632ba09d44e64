"""Federated optimization with encoded-domain aggregation.

One round: the server picks ``m`` clients and broadcasts ``(w, n)``; each
client trains locally, scales its update ``dw`` by its weight, quantizes with
``(s, n)``, encodes block by block and uploads; the server averages the
encodings, decodes, rescales by ``n/s`` and applies the result.
"""

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..codec import join_blocks, split_blocks
from ..errors import ConfigError, NumericError, ProtocolError
from ..quantize import QuantConfig, identity_quantize, quantize
from ..seeding import make_rng

ALGORITHMS = ("fedavg", "fedprox", "qfedavg")
N_POLICIES = ("fixed", "adaptive", "decay")
METRIC_FIELDS = [
    "round", "algo", "ega", "loss", "accuracy", "uplink_bytes", "downlink_bytes", "n_used",
]


@dataclass
class FlConfig:
    rounds: int = 100
    clients_per_round: int = 10
    local_epochs: int = 1
    learning_rate: float = 0.1
    local_batch_size: int | None = None  # None: full-batch local steps
    server_lr: float = 1.0
    algorithm: str = "fedavg"
    mu_prox: float = 0.0
    q: float = 0.0
    s: int = 64
    n_policy: str = "adaptive"
    n0: float = 1.0
    n_min: float = 1e-8
    safety_factor: float = 2.0
    n_decay: float = 0.97
    seed: int = 0
    ega_enabled: bool = True
    quantize_enabled: bool = True
    wire_float32: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.n_policy not in N_POLICIES:
            raise ConfigError(f"n_policy must be one of {N_POLICIES}, got {self.n_policy!r}")
        if self.learning_rate <= 0 or self.server_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.rounds < 0 or self.clients_per_round < 1:
            raise ConfigError("rounds must be >= 0 and clients_per_round >= 1")
        if self.n0 <= 0 or self.s < 1:
            raise ConfigError("n0 must be positive and s >= 1")
        if self.local_batch_size is not None and self.local_batch_size < 1:
            raise ConfigError("local_batch_size must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown FlConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class GlobalModel:
    w: np.ndarray
    round: int = 0
    aggregate: np.ndarray | None = None  # last decoded update, feeds the n policy


@dataclass
class EncodedUpdate:
    round: int
    client_id: int
    weight: float
    blocks: np.ndarray  # (ceil(d/b), h)
    n_used: float
    original_dim: int

    def __post_init__(self):
        if self.weight <= 0:
            raise ConfigError(f"client weight must be positive, got {self.weight}")


@dataclass
class PlainUpdate:
    round: int
    client_id: int
    weight: float
    delta: np.ndarray


@dataclass
class MetricsRecord:
    round: int
    algo: str
    ega: bool
    loss: float
    accuracy: float
    uplink_bytes: int
    downlink_bytes: int
    n_used: float

    def row(self):
        return {k: (int(v) if isinstance(v, bool) else v) for k, v in asdict(self).items()}


def _as_wire(x, cfg):
    return x.astype(np.float32).astype(np.float64) if cfg.wire_float32 else x


def client_rngs(seed, round_idx, client_id):
    """Independent streams for local training and for quantization."""
    return (
        make_rng(seed, "local", round_idx, client_id),
        make_rng(seed, "quant", round_idx, client_id),
    )


def local_train(w_global, client, cfg, task, rng):
    """Run ``k`` local epochs of SGD; returns ``(w_local - w_global, start_loss)``."""
    w = np.array(w_global, dtype=np.float64)
    start_loss = task.loss(w, client.x, client.y)
    if not np.isfinite(start_loss):
        raise NumericError(f"client {client.client_id}: non-finite local loss")
    prox = cfg.mu_prox if cfg.algorithm == "fedprox" else 0.0
    batch = cfg.local_batch_size or client.sample_count
    for _ in range(cfg.local_epochs):
        order = rng.permutation(client.sample_count) if batch < client.sample_count else None
        for start in range(0, client.sample_count, batch):
            if order is None:
                xb, yb = client.x, client.y
            else:
                idx = order[start:start + batch]
                xb, yb = client.x[idx], client.y[idx]
            g = task.grad(w, xb, yb)
            if prox:
                g = g + prox * (w - w_global)
            w -= cfg.learning_rate * g
    delta = w - w_global
    if not np.all(np.isfinite(delta)):
        raise NumericError(f"client {client.client_id}: local training diverged")
    return delta, start_loss


def encode_update(delta, weight, codec, cfg, n, rng, round_idx=0, client_id=0):
    """Quantize ``delta * weight`` with ``(s, n)`` and encode every block."""
    qcfg = QuantConfig(codec.s, n)
    scaled = np.asarray(delta, dtype=np.float64) * weight
    quant = quantize if cfg.quantize_enabled else identity_quantize
    levels = quant(scaled, qcfg, rng).values
    blocks = codec.encode_blocks(split_blocks(levels, codec.b))
    return EncodedUpdate(
        round_idx, client_id, float(weight), _as_wire(blocks, cfg), float(n), len(scaled)
    )


def client_update(w_global, client, cfg, task, codec, n, round_idx=0, weight=1.0):
    """Local training followed by quantize-and-encode; ``codec=None`` gives a
    plaintext update."""
    train_rng, quant_rng = client_rngs(cfg.seed, round_idx, client.client_id)
    delta, _ = local_train(w_global, client, cfg, task, train_rng)
    if codec is None:
        return PlainUpdate(round_idx, client.client_id, float(weight), delta * weight)
    return encode_update(delta, weight, codec, cfg, n, quant_rng, round_idx, client.client_id)


def decode_aggregate(updates, codec):
    """``(n/s) * decode(mean of encodings)`` per block, joined back to length d."""
    first = updates[0]
    stacked = np.stack([u.blocks for u in updates]).astype(np.float64)
    decoded = codec.decode_mean(stacked.mean(axis=0))
    return join_blocks(decoded, first.original_dim) * (first.n_used / codec.s)


def check_round(updates, expected_round, m):
    if len(updates) != m:
        raise ProtocolError(f"codec aggregates exactly {m} updates, got {len(updates)}")
    rounds = {u.round for u in updates}
    if rounds != {expected_round}:
        raise ProtocolError(f"updates carry round ids {sorted(rounds)}, expected {expected_round}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client in round")


def server_round(model, updates, codec, cfg):
    """Aggregate ``m_train`` encoded updates and apply the decoded mean."""
    check_round(updates, model.round, codec.m_train)
    if len({u.n_used for u in updates}) != 1:
        raise ProtocolError("clients quantized with different n")
    if len({u.original_dim for u in updates}) != 1 or updates[0].original_dim != len(model.w):
        raise ProtocolError("update dimension does not match the model")
    g = decode_aggregate(updates, codec)
    if not np.all(np.isfinite(g)):
        raise NumericError("decoded aggregate is not finite")
    return GlobalModel(model.w + cfg.server_lr * g, model.round + 1, g)


def server_round_plain(model, updates, cfg):
    """Plaintext weighted mean ``(1/m) sum_i lambda_i dw_i`` (updates arrive pre-weighted)."""
    check_round(updates, model.round, len(updates))
    g = np.mean([u.delta for u in updates], axis=0)
    return GlobalModel(model.w + cfg.server_lr * g, model.round + 1, g)


def compute_round_n(cfg, model):
    """Normalization broadcast with round ``model.round``.

    fixed:    ``n0`` every round.
    adaptive: ``safety_factor * max|previous decoded aggregate|``, floored at ``n_min``.
    decay:    ``n0 * n_decay**round``, floored at ``n_min``.
    """
    if cfg.n_policy == "fixed" or (cfg.n_policy == "adaptive" and model.aggregate is None):
        return cfg.n0
    if cfg.n_policy == "adaptive":
        return max(cfg.n_min, cfg.safety_factor * float(np.max(np.abs(model.aggregate))))
    return max(cfg.n_min, cfg.n0 * cfg.n_decay**model.round)


def qfedavg_weights(local_losses, q, m=None):
    """Loss-power client weights ``F_i^q`` rescaled to sum to ``m``."""
    losses = np.asarray(local_losses, dtype=np.float64)
    if np.any(losses < 0):
        raise ConfigError("losses must be non-negative")
    m = len(losses) if m is None else m
    raw = losses**q
    total = raw.sum()
    if q == 0 or total <= 0 or not np.isfinite(total):
        return np.ones(len(losses))
    return raw * (m / total)


def select_clients(seed, round_idx, num_clients, m):
    if m > num_clients:
        raise ConfigError(f"cannot select {m} of {num_clients} clients")
    rng = make_rng(seed, "select", round_idx)
    return np.sort(rng.choice(num_clients, size=m, replace=False))


def round_weights(cfg, task, w, chosen):
    if cfg.algorithm != "qfedavg":
        return np.ones(len(chosen))
    losses = [task.loss(w, c.x, c.y) for c in chosen]
    return qfedavg_weights(losses, cfg.q)


def upload_bytes(d, codec, ega):
    # imported lazily: the wire layout lives with the network harness
    from ..analysis.comm import uplink_bytes_per_client

    if not ega:
        return uplink_bytes_per_client(d, None, None)
    return uplink_bytes_per_client(d, codec.b, codec.h)


def evaluate(task, w, test_x, test_y):
    return task.loss(w, test_x, test_y), task.accuracy(w, test_x, test_y)


def run_federated(cfg, task, clients, test_data, codec=None, w0=None, on_round=None):
    """Run ``cfg.rounds`` rounds and return ``(final GlobalModel, metrics)``.

    ``test_data`` is ``(x, y)`` for held-out evaluation after every round.
    """
    m = cfg.clients_per_round
    if cfg.ega_enabled:
        if codec is None:
            raise ConfigError("ega_enabled requires a codec")
        if codec.m_train != m:
            raise ConfigError(
                f"clients_per_round={m} but the codec was trained for m={codec.m_train}"
            )
    model = GlobalModel(np.array(task.init_params() if w0 is None else w0, dtype=np.float64))
    test_x, test_y = test_data
    d = len(model.w)
    up_client = upload_bytes(d, codec, cfg.ega_enabled)
    down_client = 4 * d
    algo = cfg.algorithm
    metrics = []
    for t in range(cfg.rounds):
        chosen = [clients[i] for i in select_clients(cfg.seed, t, len(clients), m)]
        n = compute_round_n(cfg, model)
        w_sent = _as_wire(model.w, cfg)
        weights = round_weights(cfg, task, w_sent, chosen)
        updates = [
            client_update(
                w_sent, c, cfg, task, codec if cfg.ega_enabled else None, n, t, lam
            )
            for c, lam in zip(chosen, weights)
        ]
        if cfg.ega_enabled:
            model = server_round(model, updates, codec, cfg)
        else:
            model = server_round_plain(model, updates, cfg)
        loss, acc = evaluate(task, model.w, test_x, test_y)
        rec = MetricsRecord(
            t, algo, cfg.ega_enabled, loss, acc, m * up_client, m * down_client,
            n if cfg.ega_enabled else float("nan"),
        )
        metrics.append(rec)
        if on_round is not None:
            on_round(model, rec)
    return model, metrics


def write_metrics_csv(records, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def blocks_for(d, b):
    return math.ceil(d / b)
