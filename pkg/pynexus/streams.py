import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha1(name.encode()).digest()[:8], "little")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for consumer ``name`` derived from the global seed.

    Adding or removing a consumer never shifts the draws of another one.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, stream_key(name)]))
