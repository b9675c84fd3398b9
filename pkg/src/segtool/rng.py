"""Seeded random streams.

Every stream is xoshiro256** whose 256-bit state is filled by four
successive splitmix64 outputs of the 64-bit seed. Scalar uniforms are
``(next_u64 >> 11) * 2**-53``, so parameter draws can be reproduced from
the reference xoshiro256** algorithm in any language. Bulk arrays (noise
fields) come from numpy's ``Generator`` on the same bit generator.
"""

from __future__ import annotations

import numpy as np
from randomgen import Xoshiro256

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def seed_state(seed: int) -> list[int]:
    s, out = seed & MASK64, []
    for _ in range(4):
        s, z = splitmix64(s)
        out.append(z)
    return out


def make_generator(seed: int) -> np.random.Generator:
    bg = Xoshiro256(0)
    state = bg.state
    state["s"] = np.array(seed_state(seed), dtype=np.uint64)
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bg.state = state
    return np.random.Generator(bg)


def split_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th independent case or worker: ``seed XOR index``."""
    return (int(seed) ^ int(index)) & MASK64
