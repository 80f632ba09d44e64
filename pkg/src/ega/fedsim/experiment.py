"""Dataset and task construction shared by the simulator and the network harness.

Both sides of a networked run build the same federation from the same
``DataConfig``, so a client process only needs its id to find its shard.
"""

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ConfigError
from .data import load_mnist, partition_shards_for_clients, train_test_split
from .tasks import LinearClassifier, make_quadratic_clients

TASKS = ("mnist", "quadratic")


@dataclass
class DataConfig:
    task: str = "mnist"
    seed: int = 0
    test_fraction: float = 0.2
    num_clients: int = 100
    num_shards: int = 200
    shards_per_client: int = 2
    images_path: str | None = None
    labels_path: str | None = None
    # synthetic quadratic only
    dim: int = 10
    rows_per_client: int = 50
    drift: float = 0.3

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown data fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass
class Federation:
    task: object
    clients: list
    test_data: tuple
    digest: str


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def build_federation(cfg):
    """Task, client datasets and held-out ``(x, y)`` for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.task == "quadratic":
        task, clients = make_quadratic_clients(
            cfg.num_clients, cfg.dim, cfg.rows_per_client, rng, drift=cfg.drift
        )
        x = np.concatenate([c.x for c in clients])
        y = np.concatenate([c.y for c in clients])
        return Federation(task, clients, (x, y), _digest(x, y))
    x, y = load_mnist(cfg.images_path, cfg.labels_path)
    (x_tr, y_tr), test = train_test_split(x, y, cfg.test_fraction, rng)
    clients = partition_shards_for_clients(
        x_tr, y_tr, cfg.num_shards, cfg.shards_per_client, cfg.num_clients, rng
    )
    return Federation(LinearClassifier(x.shape[1], 10), clients, test, _digest(x, y))
