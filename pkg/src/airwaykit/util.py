"""Seed derivation and small shared helpers.

Every stochastic routine takes an integer seed and derives independent
per-item generators through ``item_rng``, so datasets and training runs are
reproducible item by item regardless of iteration order or parallelism.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np


def item_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for one derived stream: (seed, *key) -> independent rng."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def derive_int_seed(seed: int, *key: int) -> int:
    """Stable 63-bit integer seed derived from (seed, *key), e.g. for torch."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_float(v: float) -> str:
    """Shortest round-trip decimal form; stable across runs."""
    return repr(float(v))
