"""Honest-but-curious server attack: isolate one client by re-decoding the
round with that client's encoding swapped for the encoding of zero."""

from dataclasses import dataclass

import numpy as np

from ..codec import IdentityCodec, join_blocks


@dataclass
class AttackReport:
    target_client: int
    recovered: np.ndarray
    true_delta: np.ndarray
    relative_error: float
    snr: float


def _decode(codec, stacked_blocks, n, d):
    decoded = codec.decode_mean(stacked_blocks.mean(axis=0))
    return join_blocks(decoded, d) * (n / codec.s)


def zero_substitution_attack(updates, target, codec, n, true_delta=None):
    """Recover ``lambda_i * dw_i`` of ``updates[target]`` from the server's view.

    With the mean-to-mean codec the difference of the two decodes equals
    ``(q_i - q_0)/m`` plus decode error, so it is scaled back by ``m``.
    """
    d = updates[0].original_dim
    stacked = np.stack([np.asarray(u.blocks, dtype=np.float64) for u in updates])
    m = len(updates)
    zero_blocks = codec.encode_blocks(np.zeros((stacked.shape[1], codec.b)))
    swapped = stacked.copy()
    swapped[target] = zero_blocks
    recovered = m * (_decode(codec, stacked, n, d) - _decode(codec, swapped, n, d))
    if true_delta is None:
        return AttackReport(updates[target].client_id, recovered, None, float("nan"), float("nan"))
    true_delta = np.asarray(true_delta, dtype=np.float64)
    err = recovered - true_delta
    rel = float(np.linalg.norm(err) / max(np.linalg.norm(true_delta), 1e-300))
    noise = float(np.mean(err**2))
    snr = float(np.mean(true_delta**2) / noise) if noise > 0 else float("inf")
    return AttackReport(updates[target].client_id, recovered, true_delta, rel, snr)


def single_sample_deltas(task, x, y, w, lr, rng, m):
    """Each of ``m`` clients takes one gradient step on one random sample."""
    idx = rng.choice(len(x), size=m, replace=False)
    return np.stack([-lr * task.grad(w, x[i:i + 1], y[i:i + 1]) for i in idx])


def attack_trial(deltas, codec, rng, target=0, quantize_enabled=True):
    """Encode ``deltas`` with ``n`` = their largest magnitude, run the attack on
    client ``target`` and return the report."""
    from ..fedsim.loop import FlConfig, encode_update

    n = float(np.max(np.abs(deltas)))
    cfg = FlConfig(s=codec.s, quantize_enabled=quantize_enabled)
    updates = [
        encode_update(dw, 1.0, codec, cfg, n, rng, 0, i) for i, dw in enumerate(deltas)
    ]
    return zero_substitution_attack(updates, target, codec, n, deltas[target])


def attack_experiment(task, x, y, codec, seeds, lr=0.1, w=None):
    """Median relative recovery error over ``seeds`` for ``codec`` and for the
    ideal (identity) codec at the same quantization level."""
    w = task.init_params() if w is None else w
    ideal = IdentityCodec(codec.b, codec.s, codec.m_train)
    trained, floor = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        deltas = single_sample_deltas(task, x, y, w, lr, rng, codec.m_train)
        trained.append(attack_trial(deltas, codec, np.random.default_rng([seed, 1])).relative_error)
        floor.append(attack_trial(deltas, ideal, np.random.default_rng([seed, 1])).relative_error)
    return {
        "trained_errors": trained,
        "ideal_errors": floor,
        "trained_median": float(np.median(trained)),
        "ideal_floor": float(np.median(floor)),
    }


