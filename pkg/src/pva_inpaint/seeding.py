"""Named-stream RNG derivation.

Every random draw in the pipeline comes from a stream keyed by
(global seed, purpose string), so adding a new consumer never perturbs
the draws of an existing one.
"""

import hashlib

import numpy as np


def stream_seed(global_seed, purpose):
    h = hashlib.sha256(f"{global_seed}:{purpose}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def rng_for(global_seed, purpose):
    return np.random.default_rng(stream_seed(global_seed, purpose))
