"""Counter-based random streams.

Every draw comes from a Philox generator keyed by (seed, *stream keys), so a
block of samples is a pure function of its coordinates and parallel work can
be scheduled in any order. Normals use numpy's ziggurat on top of Philox;
golden files depend on that choice.
"""

import numpy as np

# Chains and Monte Carlo samples are generated in fixed-size blocks, one stream each.
BLOCK_SIZE = 8192


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream addressed by (seed, *keys)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int, int]]:
    """Split n draws into (block index, start, stop) triples."""
    return [(i, start, min(start + block_size, n))
            for i, start in enumerate(range(0, n, block_size))]


def standard_normal(seed: int, n: int, dim: int, *keys: int) -> np.ndarray:
    """n x dim standard normals, assembled block by block.

    The result for a given (seed, keys, n) does not depend on how the blocks
    are later distributed over workers.
    """
    out = np.empty((n, dim))
    for i, start, stop in blocks(n):
        out[start:stop] = stream(seed, *keys, i).standard_normal((stop - start, dim))
    return out
