"""Labeled derivation of independent random streams from one run seed."""

import zlib

import numpy as np


def _label_words(labels):
    words = []
    for label in labels:
        if isinstance(label, str):
            words.append(zlib.crc32(label.encode()))
        else:
            words.append(int(label) & 0xFFFFFFFF)
    return words


def make_rng(seed, *labels):
    """Counter-based Philox stream keyed by ``seed`` and any number of labels.

    The same ``(seed, labels)`` always yields the same stream, independent of
    process or call order, so client-side randomness can be replayed anywhere.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_label_words(labels)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *labels):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_label_words(labels)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
