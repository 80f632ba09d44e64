"""Monte-Carlo checks of the aggregation variance bounds."""

import math
from dataclasses import dataclass

import numpy as np

from ..quantize import QuantConfig, dequantize, identity_quantize, quantize


def quantization_bound(n, m, d, s):
    """Quantization-only term ``(n/m) * min(d/s^2, sqrt(d)/s)``."""
    return (n / m) * min(d / s**2, math.sqrt(d) / s)


def evaluate_theorem1_bound(n, m, d, s, sigma):
    """``(n/m) * min(d/s^2, sqrt(d)/s) + (n^2/s^2) * sigma^2``."""
    return quantization_bound(n, m, d, s) + (n**2 / s**2) * sigma**2


@dataclass
class BoundReport:
    n: float
    m: int
    d: int
    s: int
    sigma_hat: float
    empirical_mse: float
    bound: float
    tolerance: float = 1.05

    @property
    def passed(self):
        return self.empirical_mse <= self.tolerance * self.bound

    @property
    def margin(self):
        return self.bound / self.empirical_mse if self.empirical_mse > 0 else math.inf

    def summary(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"n={self.n} m={self.m} d={self.d} s={self.s} sigma_hat={self.sigma_hat:.6g} "
            f"bound={self.bound:.6g} empirical_mse={self.empirical_mse:.6g} {verdict}"
        )


def quantized_aggregate_mse(m, s, d, n, groups, rng):
    """Per-coordinate MSE of ``(n/s) mean_i Q(x_i)`` against ``mean_i x_i``
    for ``x_i`` uniform on ``[-n, n]^d``, averaged over coordinates and groups."""
    cfg = QuantConfig(s, n)
    x = rng.uniform(-n, n, size=(groups, m, d))
    est = dequantize(quantize(x, cfg, rng)).mean(axis=1)
    return float(np.mean((est - x.mean(axis=1)) ** 2))


def verify_quantization_bound(m, s, d, n, groups, rng):
    emp = quantized_aggregate_mse(m, s, d, n, groups, rng)
    return BoundReport(n, m, d, s, 0.0, emp, quantization_bound(n, m, d, s), tolerance=1.0)


def codec_aggregate_errors(codec, n, trials, rng, quantize_enabled=True, chunk=256):
    """Squared errors (trials x b) of the full encode-average-decode path."""
    m, b, s = codec.m_train, codec.b, codec.s
    cfg = QuantConfig(s, n)
    quant = quantize if quantize_enabled else identity_quantize
    out = []
    for start in range(0, trials, chunk):
        g = min(chunk, trials - start)
        x = rng.uniform(-n, n, size=(g, m, b))
        levels = quant(x, cfg, rng).values
        enc = codec.encode_blocks(levels.reshape(g * m, b)).reshape(g, m, -1)
        est = codec.decode_mean(enc.mean(axis=1)) * (n / s)
        out.append((est - x.mean(axis=1)) ** 2)
    return np.concatenate(out)


def verify_bound_montecarlo(codec, n, trials=1000, rng=None, tolerance=1.05):
    """Empirical per-coordinate MSE of the codec aggregate against the
    variance bound evaluated with the codec's own ``sigma_hat`` and ``d = b``."""
    rng = np.random.default_rng(rng)
    err = codec_aggregate_errors(codec, n, trials, rng)
    bound = evaluate_theorem1_bound(n, codec.m_train, codec.b, codec.s, codec.sigma_hat)
    return BoundReport(
        n, codec.m_train, codec.b, codec.s, codec.sigma_hat, float(err.mean()), bound, tolerance
    )
