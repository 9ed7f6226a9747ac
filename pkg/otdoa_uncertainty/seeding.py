"""Reproducible randomness.

One root seed drives a run. Each stage derives its own seed from the root by
hashing a fixed label, and each parallel work item (UE, tree, BS, sample) gets its
own generator keyed by its index, so results never depend on scheduling.
"""

import hashlib

import numpy as np


def derive_seed(root, label):
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stream(seed, index):
    """Generator for work item ``index`` of a stage seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def get_rng(seed):
    return np.random.default_rng(seed)
