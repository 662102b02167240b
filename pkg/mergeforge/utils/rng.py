import hashlib
from typing import Any

import numpy as np


def derive_key(*parts: Any) -> int:
    """128-bit key from an ordered tuple of key parts."""
    text = "\x1f".join(str(part) for part in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:16], "little")


def derive_seed(*parts: Any) -> int:
    """Non-negative 63-bit seed derived from key parts."""
    return derive_key(*parts) >> 65


def keyed_generator(*parts: Any) -> np.random.Generator:
    """
    Counter-based generator keyed by `parts`.

    Streams for different keys are independent, so adding a task or a layer
    never shifts the draws of another.
    """
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
