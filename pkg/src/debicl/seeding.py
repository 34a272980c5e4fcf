"""Named RNG substreams.

Every source of randomness in a run (class order, weight init, style
sampling, distortions, landscape directions, ...) draws from its own
generator, derived deterministically from the run seed and a stream name.
Components therefore stay reproducible independently of each other: adding
draws to one stream never shifts another.
"""

import hashlib

import numpy as np
import torch

_MASK_63 = (1 << 63) - 1


def seed_for(root_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for the substream `name`."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _MASK_63


def torch_gen(root_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed_for(root_seed, name))
    return gen


def numpy_gen(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(root_seed, name))
