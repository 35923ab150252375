"""Named, counter-based random substreams.

Every stochastic choice in the pipeline draws from a Philox generator keyed
by (seed, purpose-name, index). Streams are stateless across process
boundaries: re-creating a stream replays it exactly, which is what makes
checkpoint resume bit-exact without persisting RNG state.
"""

import hashlib

import numpy as np


def _name_key(name: str, index: int) -> int:
    digest = hashlib.sha256(f"{name}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Deterministic generator for one named draw site."""
    key = [seed & 0xFFFFFFFFFFFFFFFF, _name_key(name, index)]
    return np.random.Generator(np.random.Philox(key=key))
