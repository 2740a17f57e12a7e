"""Counter-based deterministic random streams.

Every random decision in the package draws from a Philox generator whose
key is derived from a user seed plus a structured path (strings and
integers naming the consumer).  Streams are therefore independent of
iteration order and identical across platforms and runs.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK63 = (1 << 63) - 1


def _derive_key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<q", int(seed)))
    for part in path:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        elif isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(struct.pack("<q", int(part)))
        else:
            raise TypeError(f"unsupported path element {part!r}")
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Philox generator keyed by (seed, *path); same inputs, same stream."""
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, path)))


def derive_seed(seed: int, *path) -> int:
    """Collapse (seed, *path) to a nonnegative 63-bit integer seed."""
    return _derive_key(seed, path) & _MASK63
