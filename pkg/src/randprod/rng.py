"""Counter-based, splittable random streams.

A stream is keyed by ``(seed, stream_id)`` and backed by numpy's Philox
generator, so identical keys give identical sequences and distinct stream ids
give independent streams without any shared state.  Advancing a stream plays
the role of the shift on the sequence space.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_stream_id(purpose: str, index: int = 0) -> int:
    """Deterministic 64-bit stream id from a purpose tag and an index."""
    digest = hashlib.blake2b(f"{purpose}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def for_purpose(cls, seed: int, purpose: str, index: int = 0) -> "RngStream":
        return cls(seed, derive_stream_id(purpose, index))

    def split(self, purpose: str, index: int = 0) -> "RngStream":
        """Child stream keyed by this stream's id, the tag and the index."""
        return RngStream(self.seed, derive_stream_id(f"{self.stream_id}/{purpose}", index))

    def fresh(self) -> "RngStream":
        """A new stream with the same key, rewound to the start."""
        return RngStream(self.seed, self.stream_id)

    @property
    def counter(self) -> int:
        state = self.generator.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def random(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
