"""Byte accounting for uplink and downlink traffic, and rounds-to-target."""

import math
from dataclasses import dataclass

from ..netharness.protocol import FRAME_OVERHEAD, UPLOAD_HEADER

UPLOAD_FIXED_BYTES = UPLOAD_HEADER.size


def encoded_vector_bytes(d, b, h):
    return math.ceil(d / b) * h * 4


def plaintext_vector_bytes(d):
    return 4 * d


def uplink_bytes_per_client(d, b, h):
    """Upload payload size: encoded blocks plus the fixed upload header.
    ``b=None`` gives the plaintext float32 vector with the same header."""
    vec = plaintext_vector_bytes(d) if b is None else encoded_vector_bytes(d, b, h)
    return vec + UPLOAD_FIXED_BYTES


@dataclass
class CommReport:
    d: int
    b: int
    h: int
    rounds: int
    m: int
    uplink_vector_per_client: int
    plaintext_vector_per_client: int
    uplink_per_client: int
    uplink_frame_per_client: int
    downlink_per_client: int

    @property
    def uplink_total(self):
        return self.uplink_per_client * self.m * self.rounds

    @property
    def plaintext_uplink_total(self):
        return (self.plaintext_vector_per_client + UPLOAD_FIXED_BYTES) * self.m * self.rounds

    @property
    def downlink_total(self):
        return self.downlink_per_client * self.m * self.rounds

    @property
    def compression(self):
        return self.plaintext_vector_per_client / self.uplink_vector_per_client


def comm_accounting(d, b, h, rounds=1, m=1):
    """Per-client and total traffic for an EGA run.

    Uplink per client per round is ``ceil(d/b) * h * 4`` bytes of encodings
    plus the fixed upload header; the plaintext baseline sends ``4 * d``.
    Downlink is the float32 model, ``4 * d`` per client per round, in both modes.
    """
    if min(d, b, h, m) < 1 or rounds < 0:
        raise ValueError("comm_accounting needs positive d, b, h, m")
    up = uplink_bytes_per_client(d, b, h)
    return CommReport(
        d, b, h, rounds, m,
        uplink_vector_per_client=encoded_vector_bytes(d, b, h),
        plaintext_vector_per_client=plaintext_vector_bytes(d),
        uplink_per_client=up,
        uplink_frame_per_client=up + FRAME_OVERHEAD,
        downlink_per_client=4 * d,
    )


def rounds_to_target(metrics, target):
    """Index of the first round whose accuracy reaches ``target``; ``None``
    when it never does.  Accepts MetricsRecord objects or dict rows."""
    for i, rec in enumerate(metrics):
        acc = rec["accuracy"] if isinstance(rec, dict) else rec.accuracy
        if float(acc) >= target:
            return i
    return None
