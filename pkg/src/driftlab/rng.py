"""Deterministic random-number streams for reproducible parallel simulation.

Every unit of simulation work (a realized world, a sampled dataset, a Monte
Carlo replicate) draws from its own counter-keyed Philox stream, so results
are bit-for-bit reproducible regardless of execution order or thread count.
"""

from __future__ import annotations

import numpy as np

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF


def substream(seed: int, lane: int, index: int = 0) -> np.random.Generator:
    """Return an independent generator keyed by (seed, lane, index).

    ``lane`` separates purposes (world realization, dataset sampling, harness
    checks, ...) and ``index`` separates replicates within a purpose. The
    mapping is pure: replicate ``index`` can be regenerated in isolation,
    which is what makes parallel reductions order-independent.
    """
    if lane < 0 or index < 0:
        raise ValueError("lane and index must be nonnegative")
    key = np.array(
        [seed & _MASK64, ((lane & _MASK32) << 32) | (index & _MASK32)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def split_uniform(u: np.ndarray, streams: int) -> np.ndarray:
    """Split one uniform draw into ``streams`` independent uniform draws.

    The 53 mantissa bits of each value are dealt round-robin (most
    significant first) to the output streams. Because the streams read
    disjoint bit sets of a uniform variable, they are exactly independent;
    each is uniform on a centered dyadic grid of 53 // streams or more bits.

    Returns an array of shape ``(streams,) + u.shape`` with values in (0, 1).
    """
    if streams < 1:
        raise ValueError("streams must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    if streams == 1:
        return u[None, ...]
    bits = (u * float(1 << 53)).astype(np.uint64)
    acc = [np.zeros(u.shape, dtype=np.uint64) for _ in range(streams)]
    width = [0] * streams
    for b in range(53):
        s = b % streams
        bit = (bits >> np.uint64(52 - b)) & np.uint64(1)
        acc[s] = (acc[s] << np.uint64(1)) | bit
        width[s] += 1
    out = np.empty((streams,) + u.shape, dtype=np.float64)
    for s in range(streams):
        out[s] = (acc[s].astype(np.float64) + 0.5) / float(1 << width[s])
    return out
