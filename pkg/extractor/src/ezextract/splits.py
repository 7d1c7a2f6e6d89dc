from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def chunk_id(index: int) -> str:
    return f"chunk-{index:06d}"


@dataclass(frozen=True)
class SplitIds:
    member: list[str]
    nonmember: list[str]
    validation: list[str]


def make_splits(
    n_chunks: int, n_member: int, n_nonmember: int, n_validation: int, seed: int
) -> SplitIds:
    """Disjoint member/nonmember/validation chunk ids, deterministic in seed."""
    needed = n_member + n_nonmember + n_validation
    if needed > n_chunks:
        raise ValueError(
            f"corpus too small: requested {needed} chunks "
            f"({n_member} member + {n_nonmember} nonmember + {n_validation} validation), "
            f"available {n_chunks}"
        )
    perm = np.random.default_rng(seed).permutation(n_chunks)
    member = sorted(int(i) for i in perm[:n_member])
    nonmember = sorted(int(i) for i in perm[n_member : n_member + n_nonmember])
    validation = sorted(int(i) for i in perm[n_member + n_nonmember : needed])
    return SplitIds(
        [chunk_id(i) for i in member],
        [chunk_id(i) for i in nonmember],
        [chunk_id(i) for i in validation],
    )
