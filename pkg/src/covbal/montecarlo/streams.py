"""Per-replicate random streams.

Replicate ``i`` of a study seeded with ``master_seed`` owns two Philox
(counter-based, 4x64-bit) generators keyed by
``SeedSequence([master_seed, i]).spawn(2)``: stream 0 draws covariates and
stream 1 draws the one allocation uniform per patient. Streams depend only
on ``(master_seed, i)``, never on scheduling or worker count.
"""
from __future__ import annotations

import numpy as np

COVARIATES = 0
ALLOCATION = 1


def replicate_streams(master_seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    if master_seed < 0 or index < 0:
        raise ValueError("seeds and replicate indices must be non-negative")
    cov, alloc = np.random.SeedSequence([int(master_seed), int(index)]).spawn(2)
    return np.random.Generator(np.random.Philox(cov)), np.random.Generator(np.random.Philox(alloc))
