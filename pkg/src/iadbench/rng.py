"""Deterministic seeding and sampling primitives.

All random choices made by split protocols go through a splitmix64
stream so that identical (input, seed) pairs reproduce bit-identical
results regardless of platform, process, or thread schedule. Seeds for
sub-tasks are derived by hashing string labels into the stream state,
never by consuming a shared counter.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Minimal 64-bit splitmix stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state, out = _splitmix64(self._state)
        return out

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) without modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK64 - (_MASK64 + 1) % bound
        while True:
            value = self.next_u64()
            if value <= limit:
                return value % bound


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a child seed from a parent seed and a label path.

    Labels are folded in FNV-1a style over their UTF-8 text and then
    mixed through splitmix64, so distinct label paths give independent
    streams.
    """
    state = seed & _MASK64
    for label in labels:
        for byte in str(label).encode("utf-8"):
            state = ((state ^ byte) * 0x100000001B3) & _MASK64
        state, _ = _splitmix64(state)
    _, out = _splitmix64(state)
    return out


def sample_without_replacement(population: int, count: int, seed: int) -> list[int]:
    """Draw ``count`` distinct indices from range(population), uniformly.

    Partial Fisher-Yates driven by a splitmix64 stream; the result order
    is the draw order.
    """
    if count < 0 or count > population:
        raise ValueError(f"cannot draw {count} from {population}")
    stream = SplitMix64(seed)
    pool = list(range(population))
    for i in range(count):
        j = i + stream.next_below(population - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:count]
