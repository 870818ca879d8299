"""Named, splittable random streams on top of numpy's Philox counter generator.

Every stream is addressed by a path of names under a root seed, so the draw
order of one stream never perturbs another. That keeps parallel batch workers
and resumed runs reproducible: ``RngTree(seed).child("batch").child("42")``
always yields the same generator no matter what else has been sampled.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngTree:
    """A node in a deterministic tree of random streams."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path

    def child(self, name) -> "RngTree":
        return RngTree(self.seed, self.path + (str(name),))

    def _key(self) -> np.ndarray:
        ident = f"{self.seed}|" + "/".join(self.path)
        digest = hashlib.sha256(ident.encode()).digest()
        return np.frombuffer(digest, dtype=np.uint64)[:2]

    def generator(self) -> np.random.Generator:
        """Fresh generator for this node; identical across calls."""
        return np.random.Generator(np.random.Philox(key=self._key()))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator().standard_normal(shape) * std).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size=size)

    def choice(self, options, size=None, replace: bool = True):
        return self.generator().choice(options, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def __repr__(self) -> str:
        return f"RngTree(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
