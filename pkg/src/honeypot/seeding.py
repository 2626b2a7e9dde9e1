"""Deterministic seed derivation.

Every stage draws its randomness from a child seed derived from the master
seed and a label string, so any stage can be rerun on its own.
"""
import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    """One step of the splitmix64 mixer on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed, label):
    """Child seed for ``label`` under ``seed``.

    The label bytes are folded into the state one at a time, each followed
    by a splitmix64 round, and a final round mixes in the length.
    """
    h = splitmix64(int(seed) & _MASK)
    data = label.encode("utf-8")
    for byte in data:
        h = splitmix64(h ^ byte)
    return splitmix64(h ^ len(data))


def make_rng(seed, label=None):
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.default_rng(int(seed) & _MASK)
