"""Deterministic, keyed random streams.

A stream is identified by an integer seed plus a path of string/int keys, so
independent consumers (a modality's encoder, stage 3's replay draw, ...) never
share or perturb each other's randomness.
"""
import zlib

import numpy as np


def _key_word(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_key_word(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_key_word(k) for k in keys])))
