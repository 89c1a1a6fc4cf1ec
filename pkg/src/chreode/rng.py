"""Seed substreams keyed by purpose labels.

Every random draw in a run descends from one root seed. A purpose label
(e.g. ``"init"``, ``"batches"``) and optional integer keys select an
independent stream, so adding a consumer never perturbs the others.
"""

import zlib

import numpy as np
import torch


def _label_key(label):
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(seed, label, *keys):
    return np.random.SeedSequence([int(seed), _label_key(label), *map(int, keys)])


def numpy_rng(seed, label, *keys):
    return np.random.default_rng(seed_sequence(seed, label, *keys))


def torch_generator(seed, label, *keys):
    state = seed_sequence(seed, label, *keys).generate_state(2, dtype=np.uint32)
    gen = torch.Generator()
    gen.manual_seed(int(state[0]) << 32 | int(state[1]))
    return gen


def derived_seed(seed, label, *keys):
    """A 63-bit integer seed for libraries that only accept ints."""
    state = seed_sequence(seed, label, *keys).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
