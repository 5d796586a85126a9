"""Named, counter-based random streams.

Every stochastic step draws from a ``numpy.random.Philox`` (Philox-4x64-10)
generator whose 128-bit key is derived from a tuple of labels, e.g.
``(master_seed, "local", client_id, round)``.  The key derivation is:

    key = BLAKE2b-128( "|".join(str(label) for label in labels) )

read as two little-endian uint64 words.  Because the key depends only on the
labels, the order in which clients are simulated never changes the numbers a
given client sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*labels) -> np.ndarray:
    text = "|".join(str(label) for label in labels).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


def stream(*labels) -> np.random.Generator:
    """Return an independent generator keyed by ``labels``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*labels)))
