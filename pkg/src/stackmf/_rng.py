"""Deterministic stream derivation for reproducible parallel Monte Carlo.

Every random draw in the package comes from a counter-based Philox generator
keyed by (master entropy, stream tag, indices).  Streams are independent by
construction, so replications and players can be generated in any order or
concurrently and still produce bit-identical results.
"""
from __future__ import annotations

import numpy as np

# stream tags; values are part of the reproducibility contract
LEADER_INIT = 0
LEADER_NOISE = 1
FOLLOWER_INIT = 2
FOLLOWER_NOISE = 3
DELAY = 4
FLOW_INIT = 5
FLOW_NOISE = 6
SUBSAMPLE = 7
PROBE = 8
PANEL = 9
REPLICATION = 10


def generator(entropy: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream identified by (entropy, key...)."""
    seq = np.random.SeedSequence(entropy=entropy, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(seq))


def child_entropy(entropy: int, *key: int) -> int:
    """64-bit entropy for an independent child family, e.g. one replication.

    Children are a pure function of (entropy, key), so work units seeded this
    way can run in any order or on any number of threads and still produce
    identical numbers.
    """
    seq = np.random.SeedSequence(entropy=int(entropy),
                                 spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, np.uint64)[0])


class SharedNoise:
    """Noise layout shared between an N-player run and its limit twin.

    The leader streams depend only on the master entropy, follower streams on
    the follower index, so the same object drives synchronously coupled
    simulations and relabeling followers permutes their streams exactly.
    """

    def __init__(self, entropy: int):
        self.entropy = int(entropy)

    @property
    def provenance(self) -> tuple:
        """Seed record stored in trajectory bundles."""
        return ("shared_noise", self.entropy)

    # identity used to verify that a conditional-law flow and a bundle
    # condition on the same leader realization
    @property
    def leader_key(self) -> tuple[int, int]:
        return (self.entropy, LEADER_NOISE)

    def leader_init(self) -> np.random.Generator:
        return generator(self.entropy, LEADER_INIT)

    def leader_noise(self) -> np.random.Generator:
        return generator(self.entropy, LEADER_NOISE)

    def follower_init(self, i: int) -> np.random.Generator:
        return generator(self.entropy, FOLLOWER_INIT, self._map(i))

    def follower_noise(self, i: int) -> np.random.Generator:
        return generator(self.entropy, FOLLOWER_NOISE, self._map(i))

    def delay(self, i: int) -> np.random.Generator:
        return generator(self.entropy, DELAY, self._map(i))

    def flow_init(self, atom: int) -> np.random.Generator:
        return generator(self.entropy, FLOW_INIT, atom)

    def flow_noise(self, atom: int) -> np.random.Generator:
        return generator(self.entropy, FLOW_NOISE, atom)

    def subsample(self) -> np.random.Generator:
        return generator(self.entropy, SUBSAMPLE)

    def _map(self, i: int) -> int:
        return int(i)

    def permuted(self, perm) -> "SharedNoise":
        """View with follower i mapped to the streams of perm[i]."""
        view = SharedNoise(self.entropy)
        table = [int(p) for p in perm]
        view._map = lambda i: table[int(i)]  # type: ignore[method-assign]
        return view


def exact_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Permutation-invariant float sum (sorts before pairwise summation).

    Sorting makes the summation order a function of the multiset of values
    only, so relabeling particles cannot perturb the last ulp of aggregates.
    """
    return np.sum(np.sort(values, axis=axis), axis=axis)
