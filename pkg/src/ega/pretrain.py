"""Offline codec training on synthetic quantized vectors, and grid sweeps."""

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import CodecModel
from .errors import ConfigError, NumericError
from .numkernel import AdamState, adam_step, mse, mse_grad
from .seeding import make_rng

log = logging.getLogger(__name__)

SWEEP_FIELDS = ["m", "s", "b", "h", "seed", "sigma_hat", "best_test_loss", "epochs"]


@dataclass
class PretrainConfig:
    b: int = 64
    h: int = 64
    s: int = 8
    m: int = 5
    epochs: int = 100
    batch_size: int = 64
    train_groups: int = 10_000
    test_groups: int = 5_000
    seed: int = 0
    hidden: int | None = None
    learning_rate: float = 1e-3

    def __post_init__(self):
        for name in ("b", "h", "s", "m", "epochs", "batch_size", "train_groups", "test_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"pretrain {name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @classmethod
    def desk(cls, **overrides):
        """Small budget used by tests and CI: 20 epochs over 1,000 groups.

        Batches shrink to 16 groups so the short run still takes enough
        optimizer steps to leave the predict-zero plateau.
        """
        base = dict(epochs=20, train_groups=1_000, test_groups=500, batch_size=16)
        base.update(overrides)
        return cls(**base)


@dataclass
class PretrainReport:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    initial_test_loss: float = float("nan")
    best_epoch: int = -1
    sigma_hat: float = float("nan")
    wall_time: float = 0.0

    @property
    def best_test_loss(self):
        return self.test_loss[self.best_epoch]


def generate_dataset(count, b, s, m, rng):
    """``count`` groups of ``m`` vectors drawn uniformly from {-s..s}^b."""
    return rng.integers(-s, s, size=(count, m, b), endpoint=True, dtype=np.int64)


def _group_forward(model, groups):
    x = groups.reshape(-1, model.b) / model.s
    enc, enc_cache = model.encoder.forward_cache(x)
    g, m = groups.shape[0], groups.shape[1]
    z = enc.reshape(g, m, model.h).mean(axis=1)
    out, dec_cache = model.decoder.forward_cache(z)
    return out, (enc_cache, dec_cache)


def group_loss(model, groups):
    """MSE between the decoded mean encoding and the true group mean, in
    ``l/s`` units."""
    groups = np.asarray(groups)
    out, _ = _group_forward(model, groups)
    return mse(out, groups.mean(axis=1) / model.s)


def group_loss_and_grads(model, groups):
    groups = np.asarray(groups)
    g, m = groups.shape[0], groups.shape[1]
    out, (enc_cache, dec_cache) = _group_forward(model, groups)
    target = groups.mean(axis=1) / model.s
    dz, dec_grads = model.decoder.backward(dec_cache, mse_grad(out, target))
    denc = np.repeat(dz[:, None, :] / m, m, axis=1).reshape(g * m, model.h)
    _, enc_grads = model.encoder.backward(enc_cache, denc)
    return mse(out, target), enc_grads + dec_grads


def _eval_loss(model, groups, chunk=1024):
    total = 0.0
    for start in range(0, len(groups), chunk):
        part = groups[start:start + chunk]
        total += group_loss(model, part) * len(part)
    return total / len(groups)


def train_codec(cfg):
    """Train an encoder/decoder pair end to end; keeps the weights with the
    lowest test loss and stores the resulting error scale as ``sigma_hat``."""
    start = time.perf_counter()
    model = CodecModel.build(
        cfg.b, cfg.h, cfg.s, cfg.m, cfg.hidden, make_rng(cfg.seed, "init")
    )
    data_rng = make_rng(cfg.seed, "data")
    train = generate_dataset(cfg.train_groups, cfg.b, cfg.s, cfg.m, data_rng)
    test = generate_dataset(cfg.test_groups, cfg.b, cfg.s, cfg.m, data_rng)
    shuffle_rng = make_rng(cfg.seed, "shuffle")

    params = model.encoder.params + model.decoder.params
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    report = PretrainReport(initial_test_loss=_eval_loss(model, test))
    best = None
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        running = 0.0
        for start_idx in range(0, len(order), cfg.batch_size):
            batch = train[order[start_idx:start_idx + cfg.batch_size]]
            loss, grads = group_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {start_idx // cfg.batch_size}: "
                    f"loss={loss}"
                )
            adam_step(params, grads, state)
            running += loss * len(batch)
        report.train_loss.append(running / len(train))
        test_loss = _eval_loss(model, test)
        report.test_loss.append(test_loss)
        if best is None or test_loss < report.test_loss[report.best_epoch]:
            report.best_epoch = epoch
            best = (model.encoder.copy(), model.decoder.copy())
        log.debug("epoch %d train %.6g test %.6g", epoch, report.train_loss[-1], test_loss)

    model = replace(model, encoder=best[0], decoder=best[1])
    # RMS decode error on the test set in quantized units
    model.sigma_hat = cfg.s * float(np.sqrt(report.best_test_loss))
    report.sigma_hat = model.sigma_hat
    report.wall_time = time.perf_counter() - start
    return model, report


def _sweep_cell(cfg):
    model, report = train_codec(cfg)
    return {
        "m": cfg.m, "s": cfg.s, "b": cfg.b, "h": cfg.h, "seed": cfg.seed,
        "sigma_hat": model.sigma_hat, "best_test_loss": report.best_test_loss,
        "epochs": cfg.epochs,
    }


def sweep_configs(base, ms=None, ss=None, bs=None, hs=None, seeds=None, h_ratio=None):
    """Cartesian grid of configs.  ``h_ratio`` (when given) sets ``h = b * h_ratio``
    instead of iterating over ``hs``."""
    ms, ss, bs = ms or [base.m], ss or [base.s], bs or [base.b]
    seeds = seeds or [base.seed]
    out = []
    for m in ms:
        for s in ss:
            for b in bs:
                h_values = [max(1, int(b * h_ratio))] if h_ratio else (hs or [base.h])
                for h in h_values:
                    for seed in seeds:
                        out.append(replace(base, m=m, s=s, b=b, h=h, seed=seed))
    return out


def sweep(configs, workers=1):
    """Train one codec per config; returns a list of result rows."""
    configs = list(configs)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_cell, configs))
    return [_sweep_cell(c) for c in configs]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SWEEP_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def normalized_error(row):
    """Decode error relative to the quantization range, ``sigma_hat / s``.

    This is the error the codec adds in units of ``n`` once dequantized, and
    is the scale on which settings with different ``s`` are comparable.
    """
    return row["sigma_hat"] / row["s"]


def config_dict(cfg):
    return asdict(cfg)
