"""
Named random substreams.

All randomness in a run flows from one master seed. Each consumer asks for a
substream by name (``'data'``, ``'rollout'``, ``'init'`` ...) plus any indices,
so adding a consumer never shifts the draws of another.
"""
import zlib

import numpy as np


def _spawn_key(names):
    return tuple(zlib.crc32(str(name).encode('utf-8')) for name in names)


def derive_seed(master, *names):
    """Deterministic 63-bit seed for the substream identified by names"""
    sequence = np.random.SeedSequence(int(master), spawn_key=_spawn_key(names))
    state = sequence.generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def substream(master, *names):
    """Generator for the named substream"""
    return np.random.default_rng(derive_seed(master, *names))
