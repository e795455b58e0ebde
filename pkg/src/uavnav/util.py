"""Small shared helpers: hashing, bounded parallel map, seeded streams."""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def derived_rng(*keys: int) -> np.random.Generator:
    """Generator for an explicit (seed, stream...) tuple; never ambient."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derived_seed(*keys: int) -> int:
    """Stable 63-bit seed derived from an integer tuple."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def parallel_map(fn, items, workers: int = 1) -> list:
    """Order-preserving map, optionally over a process pool.

    Results are identical for any worker count because each item carries its
    own seed/state; the pool only changes wall-clock time.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
