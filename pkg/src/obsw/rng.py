"""Counter-based Gaussian draws keyed by (seed, step, path).

Each step gets its own Philox key; path ``p`` always reads the two 64-bit
words ``2p`` and ``2p + 1`` of that stream, so a value never depends on how
many paths are drawn or on which worker draws it.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 1 << 14  # paths per work item; fixed so results never depend on thread count


def worker_count() -> int:
    raw = os.environ.get("OBSW_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _normals(seed: int, step: int, start: int, stop: int, stream: int) -> np.ndarray:
    # start is even: two words per path, Philox blocks are four words
    bitgen = np.random.Philox(key=[seed & 0xFFFF_FFFF_FFFF_FFFF, (stream << 32) | step],
                              counter=[start // 2, 0, 0, 0])
    words = bitgen.random_raw(2 * (stop - start))
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def standard_normals(seed: int, n_steps: int, n_paths: int, stream: int = 0) -> np.ndarray:
    """Array of shape (n_steps, n_paths) of independent N(0, 1) draws."""
    out = np.empty((n_steps, n_paths))
    jobs = [(k, a, min(a + CHUNK, n_paths)) for k in range(n_steps) for a in range(0, n_paths, CHUNK)]

    def fill(job):
        k, a, b = job
        out[k, a:b] = _normals(seed, k, a, b, stream)

    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        for job in jobs:
            fill(job)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, jobs))
    return out


def uniform_row(seed: int, step: int, n_paths: int, stream: int = 1) -> np.ndarray:
    """Uniform [0, 1) draws for one step, keyed like the normals."""
    bitgen = np.random.Philox(key=[seed & 0xFFFF_FFFF_FFFF_FFFF, (stream << 32) | step])
    return (bitgen.random_raw(n_paths) >> np.uint64(11)).astype(np.float64) * 2.0**-53
