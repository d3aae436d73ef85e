"""Counter-based random number streams.

Every stochastic component draws from a Philox generator keyed by
``(seed, stream)``, so independent components never share a stream and
results are reproducible regardless of evaluation order or worker count.
"""

from __future__ import annotations

import numpy as np

# Stream salts, one per consumer. Training steps use the step index
# directly as the stream so each step has its own generator.
DATA_STREAM = 0xDA7A
MASK_STREAM = 0x3A5C
GEN_STREAM = 0x6E40
JITTER_STREAM = 0x0011
ORDER_STREAM = 0x0BA5


def philox(seed: int, stream: int) -> np.random.Generator:
    """Generator for the given (seed, stream) key."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
