"""
Counter based random streams.

Every stream is addressed by an integer seed, a tag naming its purpose and any number of
integer keys (batch row, iteration, chunk). Addressing a stream twice yields bit-identical
draws, and streams with different addresses are statistically independent.
"""
import numpy as np

from .schemas import tag_codes


def stream_sequence(seed: int, tag: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed),
                                  spawn_key=(tag_codes[tag],) + tuple(int(k) for k in keys))


def rng_stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Philox generator for the stream ``(seed, tag, *keys)``."""
    return np.random.Generator(np.random.Philox(stream_sequence(seed, tag, *keys)))


def derive_seed(seed: int, tag: str, *keys: int) -> int:
    """Deterministic 63-bit child seed, e.g. the noise seed of one training iteration."""
    state = stream_sequence(seed, tag, *keys).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))
