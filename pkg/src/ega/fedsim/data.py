"""Dataset ingestion (IDX files) and non-IID shard partitioning."""

import gzip
import struct
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errors import ConfigError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

BUNDLED_IMAGES = "mnist5k-images-idx3-ubyte.gz"
BUNDLED_LABELS = "mnist5k-labels-idx1-ubyte.gz"


@dataclass
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) < 1 or len(self.x) != len(self.y):
            raise ConfigError(f"client {self.client_id}: need >= 1 sample and matching labels")

    @property
    def sample_count(self):
        return len(self.x)


def parse_idx(data):
    """Decode an IDX byte string (unsigned-byte payloads only)."""
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 8:
        raise FormatError("IDX file shorter than its header", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("IDX header truncated", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise FormatError(f"IDX payload has {len(data) - header} bytes, dims need {count}", header)
    return np.frombuffer(data, np.uint8, count, header).reshape(dims)


def load_idx(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def load_mnist(images_path=None, labels_path=None):
    """Images as float rows in [0, 1] and integer labels.

    Without paths, loads the bundled 5,000-sample MNIST subset (500 per digit).
    """
    if images_path is None:
        pkg = resources.files(__package__) / "data"
        images = parse_idx((pkg / BUNDLED_IMAGES).read_bytes())
        labels = parse_idx((pkg / BUNDLED_LABELS).read_bytes())
    else:
        images, labels = load_idx(images_path), load_idx(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def train_test_split(x, y, test_fraction, rng):
    order = rng.permutation(len(x))
    n_test = int(round(len(x) * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return (x[train], y[train]), (x[test], y[test])


def partition_shards(x, y, num_shards, shards_per_client, rng):
    """Label-sorted shard split: sort by label, cut into ``num_shards``
    contiguous shards (the remainder joins the last shard), then hand each
    client ``shards_per_client`` shards drawn without replacement."""
    if num_shards < 1 or shards_per_client < 1:
        raise ConfigError("shard counts must be positive")
    if num_shards % shards_per_client:
        raise ConfigError(
            f"{num_shards} shards do not divide into groups of {shards_per_client}"
        )
    if num_shards > len(x):
        raise ConfigError(f"{num_shards} shards requested for {len(x)} samples")
    order = np.argsort(y, kind="stable")
    size = len(x) // num_shards
    bounds = [i * size for i in range(num_shards)] + [len(x)]
    shards = [order[bounds[i]:bounds[i + 1]] for i in range(num_shards)]
    picks = rng.permutation(num_shards)
    clients = []
    for cid in range(num_shards // shards_per_client):
        chosen = picks[cid * shards_per_client:(cid + 1) * shards_per_client]
        idx = np.concatenate([shards[k] for k in chosen])
        clients.append(ClientDataset(cid, x[idx], y[idx]))
    return clients


def partition_shards_for_clients(x, y, num_shards, shards_per_client, num_clients, rng):
    """Variant with an explicit client count; rejects impossible requests."""
    if shards_per_client * num_clients > num_shards:
        raise ConfigError(
            f"{num_clients} clients x {shards_per_client} shards exceeds {num_shards} shards"
        )
    return partition_shards(x, y, num_shards, shards_per_client, rng)[:num_clients]
