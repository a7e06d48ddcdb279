"""Deterministic seeding.

Every randomized operation in the toolkit is a pure function of its inputs
and a Seed. Sub-streams are derived by hashing the parent seed value with
string labels, so per-item randomness (for example the option shuffle of
one question) is stable no matter how many other items a run contains.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Seed:
    """A 64-bit seed value.

    Identical Seed plus identical inputs must give bit-identical outputs
    everywhere in the pipeline.
    """

    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= _MASK64:
            raise ValueError(f"seed out of 64-bit range: {self.value}")

    def derive(self, *labels: str | int) -> "Seed":
        """Derive a child seed from string or integer labels.

        Hash-based, so derivation order is the only thing that matters and
        children are independent of sibling count.
        """
        h = hashlib.sha256()
        h.update(self.value.to_bytes(8, "big"))
        for label in labels:
            h.update(b"\x1f")
            h.update(str(label).encode("utf-8"))
        return Seed(int.from_bytes(h.digest()[:8], "big"))

    def rng(self) -> random.Random:
        return random.Random(self.value)


def shuffled(items: list, seed: Seed) -> list:
    """Return a new list with items shuffled deterministically by seed."""
    out = list(items)
    seed.rng().shuffle(out)
    return out
