"""Counter-based seed splitting: every random stream is keyed by
``(master_seed, stream_name, counter...)`` so streams never overlap and any
single draw can be regenerated in isolation."""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def rng(master_seed: int, stream: str, *counters: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, stream_key(stream), *map(int, counters)])
    return np.random.Generator(np.random.PCG64(ss))
