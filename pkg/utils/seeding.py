import zlib
import numpy as np

from .errors import InvalidInput


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise InvalidInput(f"Seeds and stream keys must be non-negative, got {value}")
    return value


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator for one (seed, purpose, ...) coordinate.

    Every random draw in the toolkit goes through here so sub-pipelines can be
    replayed independently (e.g. epoch 7 of a resumed run).
    """
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))
