"""Reproducible Wiener increments keyed on (master seed, sample index).

Each sample owns a Philox stream whose 128-bit key is the pair
``(master_seed, sample_index)``, so a path never depends on which worker
produced it or in which order samples were drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SEED = 0x5EED
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class BrownianPath:
    """Wiener increments on a uniform grid.

    ``increments`` has shape ``(n_steps, wiener_dim)``; every entry is
    ``N(0, resolution)``.
    """

    increments: np.ndarray
    resolution: float
    master_seed: int
    sample_index: int

    @property
    def wiener_dim(self) -> int:
        return self.increments.shape[1]

    def __len__(self) -> int:
        return self.increments.shape[0]


def sample_generator(master_seed: int, sample_index: int) -> np.random.Generator:
    key = np.array([master_seed & _MASK64, sample_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master_seed: int, stream: int) -> int:
    """A 64-bit seed for an independent family of paths (e.g. one per step size)."""
    state = np.random.SeedSequence([master_seed & _MASK64, stream]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def sample_path(
    master_seed: int, sample_index: int, wiener_dim: int, finest_h: float, n_fine: int
) -> BrownianPath:
    if not finest_h > 0:
        raise ValueError("finest_h must be positive")
    if n_fine < 1:
        raise ValueError("n_fine must be at least 1")
    gen = sample_generator(master_seed, sample_index)
    z = gen.standard_normal((n_fine, wiener_dim))
    inc = np.sqrt(finest_h) * z
    inc.setflags(write=False)
    return BrownianPath(inc, float(finest_h), master_seed, sample_index)


def sample_increments(
    master_seed: int, sample_indices, wiener_dim: int, finest_h: float, n_fine: int
) -> np.ndarray:
    """Stacked increments of several samples, shape ``(samples, n_fine, wiener_dim)``."""
    indices = list(sample_indices)
    out = np.empty((len(indices), n_fine, wiener_dim))
    for row, idx in enumerate(indices):
        out[row] = sample_generator(master_seed, idx).standard_normal((n_fine, wiener_dim))
    out *= np.sqrt(finest_h)
    return out


def coarsen_increments(increments: np.ndarray, factor: int, axis: int = -2) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments along ``axis``.

    Factors of two are peeled off as adjacent-pair sums, so coarsening by 2
    twice is bitwise identical to coarsening by 4. An odd remainder is summed
    left to right.
    """
    factor = int(factor)
    n = increments.shape[axis]
    if factor < 1 or n % factor:
        raise ValueError(f"factor {factor} does not divide path length {n}")
    inc = np.moveaxis(np.asarray(increments, dtype=float), axis, 0)
    while factor > 1 and factor % 2 == 0:
        inc = inc[0::2] + inc[1::2]
        factor //= 2
    if factor > 1:
        blocks = inc.reshape((inc.shape[0] // factor, factor) + inc.shape[1:])
        total = blocks[:, 0].copy()
        for k in range(1, factor):
            total += blocks[:, k]
        inc = total
    return np.array(np.moveaxis(inc, 0, axis))


def coarsen(path: BrownianPath, factor: int) -> BrownianPath:
    inc = coarsen_increments(path.increments, factor, axis=0)
    inc.setflags(write=False)
    return BrownianPath(inc, path.resolution * factor, path.master_seed, path.sample_index)
