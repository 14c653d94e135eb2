"""Seeded, platform-independent random source.

The generator is SplitMix64: the 64-bit state advances by the golden-ratio
increment and each output is the state passed through the SplitMix64
finaliser. Because output ``i`` depends only on ``state + i * GAMMA`` the
whole stream can be produced vectorised with wrapping uint64 arithmetic.
Uniforms take the top 53 bits; normals use Box-Muller on pairs of uniforms.
"""

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Prng:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GAMMA
            out = _mix(z)
        self.state = (self.state + n * int(GAMMA)) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return mean + std * z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def spawn(self, key: int) -> "Prng":
        """Independent child stream; does not advance this generator."""
        with np.errstate(over="ignore"):
            z = _mix(np.array([(self.state ^ (int(key) * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64))
        return Prng(int(z[0]))
