"""Named, independent random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("world", "ensemble_init", "ensemble_batch", "nav", "gate", "eval")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for stream ``name``; streams never share state."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def int_seed(seed: int, name: str) -> int:
    """A plain int seed (for network initialisers) from a named stream."""
    return int(stream(seed, name).integers(2**31 - 1))


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
