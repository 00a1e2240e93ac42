"""Deterministic derivation of the per-purpose random streams.

A master seed is split with numpy's SeedSequence spawning, which is documented
to be stable across library versions.  Stream 0 drives the first (low
temperature) chain, stream 1 the second chain, stream 2 the swap gate and
acceptance uniforms, and stream 3 synthetic data generation.  Because each
consumer owns a stream, running the two chain updates concurrently can never
change the sampled values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("chain1", "chain2", "swap", "data")


@dataclass(frozen=True)
class SeedStreams:
    master: int
    chain1: np.random.SeedSequence
    chain2: np.random.SeedSequence
    swap: np.random.SeedSequence
    data: np.random.SeedSequence

    def generator(self, name):
        return np.random.default_rng(getattr(self, name))

    def generators(self):
        return tuple(self.generator(name) for name in STREAM_NAMES)

    def state_keys(self):
        """128-bit digest per stream, used for manifests and collision checks."""
        keys = {}
        for name in STREAM_NAMES:
            words = getattr(self, name).generate_state(4)
            keys[name] = [int(w) for w in words]
        return keys


def seed_streams(master):
    """Split a master seed into the four independent named streams."""
    master = int(master)
    children = np.random.SeedSequence(master).spawn(len(STREAM_NAMES))
    return SeedStreams(master, *children)
