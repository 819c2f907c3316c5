"""Keyed seed derivation so every random stream in a run hangs off one master seed."""

from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    """Return a 64-bit seed determined only by ``master`` and the ordered ``keys``."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest()[:8], "little")


def np_stream(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def py_stream(master: int, *keys: object) -> random.Random:
    return random.Random(derive_seed(master, *keys))
