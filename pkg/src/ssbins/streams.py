"""Buffered random streams.

Every random decision in the simulator consumes exactly one uniform double
from a named stream, so the number of draws a procedure makes is part of its
contract and two code paths that make the same decisions stay in lockstep.

A run owns three independent streams spawned from one seed:

``dest``
    destination draws, one per forwarded ball, in ascending source-node order.
``order``
    queue-strategy randomness and the arrival order of simultaneous arrivals.
``env``
    initial placement, adversarial reshuffles and Bernoulli fault triggers.

Anonymous (count-only) runs never touch ``order``, which is what lets them
reproduce the load trajectory of a traced run exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

CHUNK = 1 << 16


class RandomStream:
    """A sequential stream of uniform doubles in [0, 1) backed by PCG64.

    The sequence does not depend on how it is chunked: ``take(3)`` followed by
    ``take(2)`` yields the same five values as ``take(5)``.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        self._gen = np.random.Generator(np.random.PCG64(seed))
        self.buf = np.empty(0, dtype=np.float64)
        self.pos = 0
        self.consumed = 0

    def reserve(self, k: int) -> None:
        """Make at least ``k`` unread values available in ``buf[pos:]``."""
        have = len(self.buf) - self.pos
        if have >= k:
            return
        fresh = self._gen.random(max(k - have, CHUNK))
        self.buf = np.concatenate([self.buf[self.pos:], fresh])
        self.pos = 0

    def advance(self, new_pos: int) -> None:
        # kernels read buf directly and report where they stopped
        self.consumed += new_pos - self.pos
        self.pos = new_pos

    def draw(self) -> float:
        self.reserve(1)
        u = float(self.buf[self.pos])
        self.advance(self.pos + 1)
        return u

    def take(self, k: int) -> np.ndarray:
        self.reserve(k)
        out = self.buf[self.pos:self.pos + k].copy()
        self.advance(self.pos + k)
        return out

    def integers(self, high: int, size: int) -> np.ndarray:
        """``size`` uniform integers in ``[0, high)``, one draw each."""
        out = (self.take(size) * high).astype(np.int64)
        np.minimum(out, high - 1, out=out)
        return out


@dataclass
class Streams:
    dest: RandomStream
    order: RandomStream
    env: RandomStream


def make_streams(seed: int) -> Streams:
    children = np.random.SeedSequence(seed).spawn(3)
    return Streams(*(RandomStream(c) for c in children))


def derive_seed(master_seed: int, *parts: object) -> int:
    """Per-run seed: first 8 bytes (big endian) of sha256 over ``master:part:part...``.

    Only the low 63 bits are kept so the value fits a signed 64-bit column.
    """
    key = ":".join([str(master_seed), *map(str, parts)]).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
