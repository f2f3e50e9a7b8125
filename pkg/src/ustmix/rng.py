"""Seed plumbing: counter-based sub-streams derived from a master seed."""

from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def task_seed(master: int, *key: int) -> int:
    """32-bit seed for task ``key`` of a run with the given master seed.

    Derived with SeedSequence(master, spawn_key=key), so it depends only on
    (master, key) and not on scheduling order.
    """
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint32)[0])


def task_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key)))


def kernel_seed(rng: np.random.Generator) -> int:
    """Draw a seed for a compiled kernel from a Python-level stream."""
    return int(rng.integers(0, 2**32 - 1))


def map_tasks(fn, n_tasks: int, threads: int = 1) -> list:
    """fn(i) for i < n_tasks, in index order.

    Each task is expected to draw from its own ``task_rng(master, i)``, so
    the result does not depend on ``threads``.
    """
    if threads <= 1:
        return [fn(i) for i in range(n_tasks)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, range(n_tasks)))
