"""Modality subsets as integer bitmasks (bit m set <=> modality m present)."""

from __future__ import annotations

import numpy as np


def full(n_modalities: int) -> int:
    return (1 << n_modalities) - 1


def all_nonempty(n_modalities: int) -> list[int]:
    return list(range(1, 1 << n_modalities))


def members(subset: int) -> list[int]:
    out, m = [], 0
    while subset >> m:
        if subset >> m & 1:
            out.append(m)
        m += 1
    return out


def from_members(indices) -> int:
    mask = 0
    for m in indices:
        mask |= 1 << int(m)
    return mask


def to_bool(subset: int, n_modalities: int) -> np.ndarray:
    return np.array([(subset >> m) & 1 for m in range(n_modalities)], dtype=bool)


def from_bool(row) -> int:
    return from_members(np.flatnonzero(np.asarray(row, dtype=bool)))


def label(subset: int) -> str:
    return "{" + ",".join(str(m) for m in members(subset)) + "}"


def sample_subsets(n_modalities: int, count: int, rng: np.random.Generator) -> list[int]:
    """Draw ``count`` distinct nonempty subsets uniformly without replacement."""
    pool = (1 << n_modalities) - 1
    if not 1 <= count <= pool:
        raise ValueError(f"cannot draw {count} distinct nonempty subsets of {n_modalities} modalities (pool {pool})")
    return [int(s) + 1 for s in rng.choice(pool, size=count, replace=False)]
