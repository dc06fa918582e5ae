"""Deterministic random streams built on counter-based Philox generators.

Every source of randomness in the simulator is drawn from a named stream,
derived from a path of integers and string labels. The same path yields the
same bit stream on every platform and in any call order, which is what makes
whole experiments reproducible byte for byte.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(*path: int | str) -> np.random.Generator:
    """Return an independent generator for the given seed path.

    Path components may be ints or short labels, e.g.
    ``stream(seed, "local", round_idx, client_id)``. Distinct paths give
    statistically independent streams; identical paths give identical ones.
    """
    if not path:
        raise ValueError("stream path must not be empty")
    parts = []
    for p in path:
        if isinstance(p, (int, np.integer)):
            parts.append(repr(int(p)))
        elif isinstance(p, str):
            parts.append(repr(p))
        else:
            raise TypeError(f"stream path components must be int or str, got {type(p)}")
    digest = hashlib.sha256("/".join(parts).encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
