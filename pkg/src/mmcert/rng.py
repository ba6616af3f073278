"""Portable, counter-based random streams.

Every random draw in the package goes through :class:`PortableRNG` so that a
``(seed, stream)`` pair fully determines the values on any platform.

Algorithm
---------
* Raw words come from Philox-4x64-10 (``numpy.random.Philox``), keyed with the
  two 64-bit words ``(seed, stream)`` and a zero starting counter.  NumPy keeps
  the raw bit-generator output stable across releases; only the higher level
  ``Generator`` transforms may change, which is why none of them are used.
* A uniform double in ``[0, 1)`` is ``(w >> 11) * 2**-53``.
* Standard normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` and the matching ``sin`` branch,
  interleaved in that order.
* Permutations sort fresh uniforms with a stable sort.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0


class PortableRNG:
    """Deterministic random stream keyed by ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64),
                                      counter=0)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        words = self.raw(n) >> np.uint64(11)
        return (words.astype(np.float64) * _INV_2_53).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, stream: int) -> "PortableRNG":
        """Independent stream sharing this generator's seed."""
        return PortableRNG(self.seed, stream)
