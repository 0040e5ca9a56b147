"""Deterministic pseudo-random numbers for the simulator.

The generator is xorshift64* (Vigna's 64-bit xorshift with a multiplying
output scramble), a named, stable algorithm that any implementation of
the same scenario format can reproduce exactly.

Stream splitting: a generator is identified by ``(seed, stream)``.  The
initial state is produced by stepping splitmix64 from ``seed`` exactly
``stream + 1`` times and taking the last output, which decorrelates
streams sharing one seed.  The simulator assigns one stream per purpose
and per replica (see ``sim`` for the stream-number layout), so replicas
draw from independent sequences and insertion order never leaks into the
random choices.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return state, z


class Rng:
    """xorshift64* generator for one (seed, stream) pair."""

    def __init__(self, seed: int, stream: int = 0):
        state = seed & _MASK64
        out = 0
        for _ in range(stream + 1):
            state, out = _splitmix64(state)
        # xorshift64* requires a nonzero state
        self._state = out if out != 0 else 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        s = self._state
        s ^= s >> 12
        s = (s ^ (s << 25)) & _MASK64
        s ^= s >> 27
        self._state = s
        return (s * 0x2545F4914F6CDD1D) & _MASK64

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection sampling."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def chance(self, p: float) -> bool:
        """True with probability ``p``."""
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return self.next_u64() < int(p * (1 << 64))

    def take_bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out.extend(self.next_u64().to_bytes(8, "big"))
        return bytes(out[:n])
