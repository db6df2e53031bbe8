"""Per-atom random streams.

Every atom owns a Philox (counter-based) stream keyed by the master seed,
a purpose tag and its atom index.  A trajectory therefore depends only on
``(seed, tag, atom_index)`` and never on how atoms are batched or which
thread integrates them.
"""

import numpy as np

__all__ = ["atom_stream", "atom_streams", "derive_seed"]

# Purpose tags keep, e.g., spectrum point 3 from replaying the undriven run.
TAG_ENSEMBLE = 0
TAG_SPECTRUM = 1
TAG_TOY = 2
TAG_QUENCH = 3


def atom_stream(seed, atom_index, key=()):
    ss = np.random.SeedSequence(int(seed), spawn_key=(*map(int, key), int(atom_index)))
    return np.random.Generator(np.random.Philox(ss))


def atom_streams(seed, atom_indices, key=()):
    return [atom_stream(seed, i, key) for i in atom_indices]


def derive_seed(seed, *key):
    """A 64-bit seed derived from ``seed`` and an integer key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
