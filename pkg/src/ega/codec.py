"""Encoder/decoder pair for aggregating quantized gradient blocks in an
encoded domain, block splitting, and the binary checkpoint format.

Aggregation contract (mean-to-mean): for quantized blocks ``l_1..l_m``,
``decode_mean(mean_i encode_block(l_i)) ~= mean_i l_i``.  Networks see
``l / s`` and the decoder output is scaled back by ``s``, so outputs are in
quantized-domain units.
"""

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .numkernel import ResidualMlp

MAGIC = b"EGA1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIdH")
_LAYER = struct.Struct("<II")


def split_blocks(x, b):
    """Cut a flat vector into ``ceil(d/b)`` rows of length ``b``, zero-padding the tail."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d < 1:
        raise ConfigError("cannot split an empty vector")
    k = math.ceil(d / b)
    out = np.zeros(x.shape[:-1] + (k * b,), dtype=x.dtype)
    out[..., :d] = x
    return out.reshape(x.shape[:-1] + (k, b))


def join_blocks(blocks, d):
    blocks = np.asarray(blocks)
    flat = blocks.reshape(blocks.shape[:-2] + (-1,))
    return flat[..., :d]


def default_hidden(b, h):
    return 2 * max(b, h)


def _residual_skips(widths):
    # every square interior layer becomes an identity-skip residual block
    return {j: j for j in range(1, len(widths) - 2) if widths[j] == widths[j + 1]}


def build_mlp(widths, rng=None, out_scale=0.1):
    """He-uniform MLP whose residual branches start at zero (each block is the
    identity at init) and whose linear output layer is shrunk by ``out_scale``."""
    skips = _residual_skips(widths)
    net = ResidualMlp.build(widths, skips, rng)
    for j in skips:
        net.weights[j][...] = 0.0
    net.weights[-1] *= out_scale
    return net


def _check_values(values, b, s):
    values = np.asarray(values)
    if values.shape[-1] != b:
        raise ConfigError(f"block length {values.shape[-1]} != codec block length {b}")
    if np.any(np.abs(values) > s):
        raise ConfigError(f"quantized values outside [-{s}, {s}]")
    return values


@dataclass
class CodecModel:
    encoder: ResidualMlp
    decoder: ResidualMlp
    b: int
    h: int
    s: int
    m_train: int
    sigma_hat: float = 0.0

    def __post_init__(self):
        if (self.encoder.in_dim, self.encoder.out_dim) != (self.b, self.h):
            raise ConfigError("encoder must map b -> h")
        if (self.decoder.in_dim, self.decoder.out_dim) != (self.h, self.b):
            raise ConfigError("decoder must map h -> b")
        if self.sigma_hat < 0:
            raise ConfigError("sigma_hat must be non-negative")

    @classmethod
    def build(cls, b, h, s, m_train, hidden=None, rng=None):
        rng = np.random.default_rng(rng)
        h1 = hidden or default_hidden(b, h)
        return cls(
            build_mlp([b, h1, h1, h], rng), build_mlp([h, h1, h1, b], rng), b, h, s, m_train
        )

    @property
    def n_params(self):
        return self.encoder.n_params + self.decoder.n_params

    def encode_blocks(self, blocks):
        """Encode one block or a stack of blocks; returns ``(..., h)``."""
        blocks = _check_values(blocks, self.b, self.s)
        return self.encoder.forward(blocks / self.s)

    def encode_block(self, l):
        values = getattr(l, "values", l)
        if np.ndim(values) != 1:
            raise ConfigError("encode_block takes a single block")
        return self.encode_blocks(values)

    def decode_mean(self, mean_encoding):
        mean_encoding = np.asarray(mean_encoding, dtype=np.float64)
        if mean_encoding.shape[-1] != self.h:
            raise ConfigError(f"encoding length {mean_encoding.shape[-1]} != h={self.h}")
        return self.decoder.forward(mean_encoding) * self.s

    def aggregate(self, blocks):
        """Decode the mean of the encodings of ``blocks`` (shape ``(m, ..., b)``)."""
        return self.decode_mean(self.encode_blocks(blocks).mean(axis=0))

    def to_float32(self):
        """Copy with every weight rounded to 32-bit, as stored in checkpoints."""
        def rounded(net):
            return ResidualMlp(
                [w.astype(np.float32).astype(np.float64) for w in net.weights],
                [b.astype(np.float32).astype(np.float64) for b in net.biases],
                net.skips,
            )

        return CodecModel(
            rounded(self.encoder), rounded(self.decoder),
            self.b, self.h, self.s, self.m_train, self.sigma_hat,
        )


class IdentityCodec:
    """Exact stand-in codec: the encoding is ``l/s`` zero-padded to ``h >= b``
    and decoding crops and rescales by ``s``.  Averaging is exact, so it
    reproduces plaintext aggregation of the quantized values."""

    sigma_hat = 0.0

    def __init__(self, b, s, m_train, h=None):
        self.b, self.s, self.m_train = b, s, m_train
        self.h = b if h is None else h
        if self.h < b:
            raise ConfigError("identity codec needs h >= b")

    def encode_blocks(self, blocks):
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.shape[-1] != self.b:
            raise ConfigError(f"block length {blocks.shape[-1]} != codec block length {self.b}")
        out = np.zeros(blocks.shape[:-1] + (self.h,))
        out[..., : self.b] = blocks / self.s
        return out

    def encode_block(self, l):
        return self.encode_blocks(getattr(l, "values", l))

    def decode_mean(self, mean_encoding):
        return np.asarray(mean_encoding, dtype=np.float64)[..., : self.b] * self.s

    def aggregate(self, blocks):
        return self.decode_mean(self.encode_blocks(blocks).mean(axis=0))


def checkpoint_size(model):
    layers = len(model.encoder.weights) + len(model.decoder.weights)
    return _HEADER.size + layers * _LAYER.size + 4 * model.n_params + 4


def checkpoint_bytes(model):
    nets = (model.encoder, model.decoder)
    n_layers = sum(len(net.weights) for net in nets)
    parts = [
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, model.b, model.h, model.s, model.m_train,
            float(model.sigma_hat), n_layers,
        )
    ]
    for net in nets:
        for w, b in zip(net.weights, net.biases):
            parts.append(_LAYER.pack(*w.shape))
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def parse_checkpoint(data):
    if len(data) < _HEADER.size + 4:
        raise FormatError("checkpoint truncated inside header", len(data))
    magic, version, b, h, s, m_train, sigma_hat, n_layers = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if n_layers == 0 or n_layers % 2:
        raise FormatError(f"layer count {n_layers} is not a symmetric encoder/decoder pair", 30)
    pos = _HEADER.size
    weights, biases = [], []
    for _ in range(n_layers):
        if pos + _LAYER.size > len(data) - 4:
            raise FormatError("checkpoint truncated inside layer header", pos)
        rows, cols = _LAYER.unpack_from(data, pos)
        pos += _LAYER.size
        need = 4 * (rows * cols + cols)
        if pos + need > len(data) - 4:
            raise FormatError("checkpoint truncated inside layer data", pos)
        w = np.frombuffer(data, "<f4", rows * cols, pos).reshape(rows, cols)
        pos += 4 * rows * cols
        bias = np.frombuffer(data, "<f4", cols, pos)
        pos += 4 * cols
        weights.append(w.astype(np.float64))
        biases.append(bias.astype(np.float64))
    if pos != len(data) - 4:
        raise FormatError(f"{len(data) - 4 - pos} unexpected trailing bytes", pos)
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]):
        raise FormatError("CRC mismatch", pos)
    half = n_layers // 2

    def net(ws, bs):
        widths = [ws[0].shape[0]] + [w.shape[1] for w in ws]
        return ResidualMlp(ws, bs, _residual_skips(widths))

    try:
        return CodecModel(
            net(weights[:half], biases[:half]), net(weights[half:], biases[half:]),
            b, h, s, m_train, sigma_hat,
        )
    except ConfigError as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}", _HEADER.size) from exc


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def checkpoint_crc(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return struct.unpack_from("<I", data, len(data) - 4)[0]


class GaussianNoiseCodec(IdentityCodec):
    """Identity codec whose decoder adds i.i.d. ``N(0, sigma^2)`` error in
    quantized-domain units: the error model assumed by the variance bound.
    Deterministic for a given ``rng`` state."""

    def __init__(self, b, s, m_train, sigma, rng, h=None):
        super().__init__(b, s, m_train, h)
        self.sigma_hat = float(sigma)
        self._rng = rng

    def decode_mean(self, mean_encoding):
        out = super().decode_mean(mean_encoding)
        return out + self._rng.normal(0.0, self.sigma_hat, size=out.shape)
