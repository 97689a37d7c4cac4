"""Exact statistical matching on A variables.

Records in D1 and D2 are grouped on identical values of the key variables.
Each D1 record receives the whole B' block of one randomly chosen D2 donor
from its group, and each D2 record the B block of a D1 donor. Groups
without donors are coarsened by dropping the last key variable.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import MISSING, CompletedDataset, Dataset, Role
from .errors import ValidationError
from .sampler import make_rng


@dataclass
class MatchGroupIndex:
    """Row indices of recipients and donors keyed on observed key values."""

    key: tuple[int, ...]
    recipients: dict[tuple, list[int]]
    donors: dict[tuple, list[int]]


def build_groups(
    recipients: Dataset, donors: Dataset, key_idx: list[int], block: list[int]
) -> MatchGroupIndex:
    """Group row indices on exact key values.

    Donor rows must observe the whole block. Rows with a missing key value
    are grouped on the observed prefix of the key.
    """

    def index(data: Dataset, rows: np.ndarray) -> dict[tuple, list[int]]:
        groups = defaultdict(list)
        for i in rows:
            vals = []
            for j in key_idx:
                v = int(data.codes[i, j])
                if v == MISSING:
                    break
                vals.append(v)
            groups[tuple(vals)].append(int(i))
        return groups

    needs = np.flatnonzero((recipients.codes[:, block] == MISSING).any(axis=1))
    usable = np.flatnonzero((donors.codes[:, block] != MISSING).all(axis=1))
    return MatchGroupIndex(tuple(key_idx), index(recipients, needs), index(donors, usable))


def _donor_pool(key: tuple, donor_groups: dict, fallback: str) -> list[int]:
    probe = key
    while True:
        pool = [
            i
            for k, rows in donor_groups.items()
            if len(k) >= len(probe) and k[: len(probe)] == probe
            for i in rows
        ]
        if pool:
            return pool
        if fallback == "error" or not probe:
            raise ValidationError(f"no donors for match group {key}")
        probe = probe[:-1]


def _donate(recipients: Dataset, donors: Dataset, key_idx, block, rng, fallback):
    groups = build_groups(recipients, donors, key_idx, block)
    codes = recipients.codes.copy()
    for key in sorted(groups.recipients):
        rows = np.array(groups.recipients[key])
        pool = np.array(sorted(_donor_pool(key, groups.donors, fallback)))
        chosen = pool[rng.integers(0, pool.size, size=rows.size)]
        codes[np.ix_(rows, block)] = donors.codes[np.ix_(chosen, block)]
    return codes


def exact_match_fuse(
    d1: Dataset,
    d2: Dataset,
    key: Sequence[str],
    seed=0,
    fallback: str = "coarsen",
) -> tuple[Dataset, Dataset]:
    """Fill B' in ``d1`` and B in ``d2`` by whole-block donation within key groups.

    ``fallback`` is ``"coarsen"`` (drop trailing key variables until donors
    exist) or ``"error"``. Item nonresponse outside the donated block is
    left as is.
    """
    if not key:
        raise ValidationError("matching key must name at least one A variable")
    if fallback not in ("coarsen", "error"):
        raise ValidationError(f"unknown fallback {fallback!r}")
    schema = d1.schema
    if d2.schema != schema:
        raise ValidationError("datasets must share one schema")
    for name in key:
        if schema.role_of(name) is not Role.A:
            raise ValidationError(f"key variable {name!r} is not an A variable")
    key_idx = schema.indices(key)
    b = schema.indices(schema.names_with_role(Role.B))
    bp = schema.indices(schema.names_with_role(Role.BPRIME))
    rng = make_rng(seed)
    filled1 = _donate(d1, d2, key_idx, bp, rng, fallback)
    filled2 = _donate(d2, d1, key_idx, b, rng, fallback)
    return CompletedDataset.build(schema, filled1, d1.sources), CompletedDataset.build(
        schema, filled2, d2.sources
    )
