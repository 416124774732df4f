"""Deterministic random streams derived from a master seed."""

from __future__ import annotations

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; identical inputs give identical streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(1)[0])
