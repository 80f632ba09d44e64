"""Stochastic quantization of real vectors onto the integer grid [-s, s]."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class QuantConfig:
    s: int
    n: float

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 1:
            raise ConfigError(f"quantization level s must be an integer >= 1, got {self.s}")
        if not np.isfinite(self.n) or self.n <= 0:
            raise ConfigError(f"normalization n must be positive, got {self.n}")

    @property
    def step(self):
        """Dequantization step n/s."""
        return self.n / self.s


@dataclass
class QuantizedVector:
    values: np.ndarray
    config: QuantConfig

    @property
    def dim(self):
        return self.values.shape[-1]


def quantize(x, cfg, rng):
    """Unbiased two-point rounding of ``x * s / n``.

    Each coordinate is first clamped to [-n, n], scaled to ``u = x*s/n`` and
    rounded up with probability ``u - floor(u)``, down otherwise, so that
    ``E[(n/s) * l] = x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize non-finite values")
    u = np.clip(x, -cfg.n, cfg.n) * (cfg.s / cfg.n)
    low = np.floor(u)
    frac = u - low
    up = rng.random(u.shape) < frac
    l = (low + up).astype(np.int64)
    # guards float round-off at the boundary u == +-s
    np.clip(l, -cfg.s, cfg.s, out=l)
    return QuantizedVector(l, cfg)


def dequantize(q):
    return q.values * q.config.step


def identity_quantize(x, cfg, rng=None):
    """Pass-through stand-in for ``quantize``: returns real values ``x*s/n``
    without rounding.  Used to isolate codec behaviour from quantization
    noise."""
    x = np.asarray(x, dtype=np.float64)
    return QuantizedVector(x * (cfg.s / cfg.n), cfg)
