"""Glue datasets: auxiliary records that jointly observe B and B' variables.

Three ways to get glue:

* append collected glue as-is (``APPEND_RAW``);
* duplicate chosen variables from a complete source (``DUPLICATE``), as in
  glue richness and size studies;
* build glue from a nonrepresentative source (``CONSTRUCT_FROM_CONDITIONAL``):
  fit the mixture model to the source alone, then copy donor records from
  D1 or D2 and fill the complementary block from the fitted conditional.

:func:`representativeness_diagnostic` compares the marginals of a filled
block with the survey they should match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .dataset import MISSING, Dataset, Role, Source
from .errors import ValidationError
from .sampler import (
    Hyperparams,
    SamplerConfig,
    make_rng,
    run_chain,
    sample_categorical,
    z_probabilities,
)


class GlueMode(str, Enum):
    APPEND_RAW = "APPEND_RAW"
    DUPLICATE = "DUPLICATE"
    CONSTRUCT_FROM_CONDITIONAL = "CONSTRUCT_FROM_CONDITIONAL"


class Direction(str, Enum):
    B_GIVEN_A_BPRIME = "B_given_ABprime"
    BPRIME_GIVEN_A_B = "Bprime_given_AB"

    @property
    def donor_source(self) -> Source:
        return Source.D2 if self is Direction.B_GIVEN_A_BPRIME else Source.D1

    @property
    def filled_role(self) -> Role:
        return Role.B if self is Direction.B_GIVEN_A_BPRIME else Role.BPRIME


@dataclass(frozen=True)
class GlueSpec:
    variables_kept: tuple[str, ...] = ()
    size: int | None = None
    mode: GlueMode = GlueMode.DUPLICATE
    direction: Direction | None = None
    resample: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", GlueMode(self.mode))
        object.__setattr__(self, "variables_kept", tuple(self.variables_kept))
        if self.direction is not None:
            object.__setattr__(self, "direction", Direction(self.direction))
        if self.size is not None and self.size < 1:
            raise ValidationError("glue size n_s must be at least 1")
        if self.mode is GlueMode.CONSTRUCT_FROM_CONDITIONAL and self.direction is None:
            raise ValidationError("constructed glue needs a conditional direction")

    def validate(self, schema) -> None:
        if self.mode is GlueMode.DUPLICATE:
            roles = {schema.role_of(v) for v in self.variables_kept}
            if Role.B not in roles or Role.BPRIME not in roles:
                raise ValidationError("glue must keep at least one B and one Bprime variable")

    def to_dict(self) -> dict:
        return {
            "variables_kept": list(self.variables_kept),
            "size": self.size,
            "mode": self.mode.value,
            "direction": None if self.direction is None else self.direction.value,
            "resample": self.resample,
        }


def make_duplicate_glue(source: Dataset, spec: GlueSpec, seed=0) -> Dataset:
    """Copy ``spec.variables_kept`` from source rows; every other column is missing.

    ``size`` equal to the source size copies every row in order; smaller
    sizes subsample without replacement and larger ones sample with
    replacement.
    """
    spec.validate(source.schema)
    schema = source.schema
    keep = schema.indices(spec.variables_kept)
    for j in keep:
        if not (source.codes[:, j] != MISSING).any():
            raise ValidationError(f"kept variable {schema.names[j]!r} is never observed in source")
    n = source.n
    size = n if spec.size is None else spec.size
    rng = make_rng(seed)
    if size == n:
        rows = np.arange(n)
    elif size < n:
        rows = np.sort(rng.choice(n, size=size, replace=False))
    else:
        rows = rng.integers(0, n, size=size)
    codes = np.zeros((size, schema.p), dtype=np.int64)
    codes[:, keep] = source.codes[np.ix_(rows, keep)]
    return Dataset(schema, codes, Source.GLUE)


def _donor_rows(n: int, size: int, resample: bool, rng) -> np.ndarray:
    if resample:
        return rng.integers(0, n, size=size)
    whole, rest = divmod(size, n)
    rows = np.tile(np.arange(n), whole)
    if rest:
        rows = np.concatenate([rows, np.sort(rng.choice(n, size=rest, replace=False))])
    return rows


def construct_glue(
    glue_raw: Dataset,
    donors: Dataset,
    direction: Direction | str,
    hp: Hyperparams,
    cfg: SamplerConfig,
    size: int | None = None,
    resample: bool = False,
) -> Dataset:
    """Two-step glue for a source that is only conditionally representative.

    Step 1 fits the mixture to ``glue_raw`` alone. Step 2 takes donor
    records (D2 donors for ``B_given_ABprime``, D1 donors for
    ``Bprime_given_AB``), draws each one's class from its observed columns
    under a posterior draw, and fills the missing block from that class.
    Donors are duplicated whole by default (``resample`` samples with
    replacement instead); the default size is ``glue_raw.n``.
    """
    direction = Direction(direction)
    schema = glue_raw.schema
    if donors.schema != schema:
        raise ValidationError("glue and donors must share one schema")
    want = direction.donor_source.value
    if donors.n == 0 or (donors.sources != want).any():
        raise ValidationError(f"direction {direction.value} needs donors drawn from {want}")
    fill = schema.indices(schema.names_with_role(direction.filled_role))
    given_role = Role.BPRIME if direction.filled_role is Role.B else Role.B
    needed = fill + schema.indices(schema.names_with_role(given_role))
    if not (glue_raw.codes[:, needed] != MISSING).all(axis=1).any():
        raise ValidationError("glue never jointly observes the B and Bprime blocks")

    fit_cfg = SamplerConfig(
        burn_in=cfg.burn_in,
        n_iterations=cfg.n_iterations,
        thin=cfg.thin,
        seed=cfg.seed,
        m=0,
        store_draws=True,
        draw_thin=max(cfg.draw_thin, cfg.thin),
    )
    _, summary = run_chain(glue_raw.relabel(Source.GLUE), hp, fit_cfg)
    draws = summary.draws or [summary.final_state]

    rng = make_rng([cfg.seed, 1])
    size = glue_raw.n if size is None else size
    if size < 1:
        raise ValidationError("constructed glue size must be at least 1")
    rows = _donor_rows(donors.n, size, resample, rng)
    codes = donors.codes[rows].copy()
    codes[:, fill] = MISSING
    base = Dataset(schema, codes, Source.CONSTRUCTED_GLUE)
    which = rng.integers(0, len(draws), size=size)
    for k in np.unique(which):
        mine = np.flatnonzero(which == k)
        draw = draws[k]
        probs = z_probabilities(draw, base.select(mine))
        z = sample_categorical(rng, probs)
        for j in fill:
            codes[mine, j] = sample_categorical(rng, draw.phi[j][z]) + 1
    return Dataset(schema, codes, Source.CONSTRUCTED_GLUE)


@dataclass
class VariableComparison:
    name: str
    sample: np.ndarray
    reference: np.ndarray

    @property
    def differences(self) -> np.ndarray:
        return np.abs(self.sample - self.reference)

    @property
    def max_difference(self) -> float:
        return float(self.differences.max())


@dataclass
class DiagnosticReport:
    comparisons: list[VariableComparison]
    threshold: float
    label: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def max_difference(self) -> float:
        return max(c.max_difference for c in self.comparisons)

    @property
    def verdict(self) -> str:
        # inclusive at the threshold, up to float noise
        return "PASS" if self.max_difference <= self.threshold + 1e-12 else "FAIL"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "threshold": self.threshold,
            "max_difference": self.max_difference,
            "verdict": self.verdict,
            "variables": [
                {
                    "name": c.name,
                    "sample": c.sample.tolist(),
                    "reference": c.reference.tolist(),
                    "abs_difference": c.differences.tolist(),
                    "max_difference": c.max_difference,
                }
                for c in self.comparisons
            ],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"Representativeness diagnostic {self.label}".rstrip()
        lines = [head, "=" * len(head)]
        lines.append(f"{'variable':<14}{'level':>6}{'sampled':>10}{'reference':>11}{'|diff|':>9}")
        for c in self.comparisons:
            for lv, (s, r, dd) in enumerate(zip(c.sample, c.reference, c.differences), start=1):
                lines.append(f"{c.name:<14}{lv:>6}{s:>10.4f}{r:>11.4f}{dd:>9.4f}")
        lines.append(
            f"max |diff| = {self.max_difference:.4f}  threshold = {self.threshold:.4f}  "
            f"verdict = {self.verdict}"
        )
        lines.extend(f"WARNING: {w}" for w in self.warnings)
        return "\n".join(lines) + "\n"


def _level_probs(data: Dataset, j: int):
    col = data.codes[:, j]
    col = col[col != MISSING]
    if col.size == 0:
        return None
    return np.bincount(col - 1, minlength=data.schema.levels[j]) / col.size


def representativeness_diagnostic(
    constructed: Dataset,
    reference: Dataset,
    variables: Sequence[str],
    threshold: float = 0.05,
    label: str = "",
) -> DiagnosticReport:
    """Per-level marginal comparison; PASS when the largest gap is at most ``threshold``."""
    if constructed.schema != reference.schema:
        raise ValidationError("datasets must share one schema")
    if not variables:
        raise ValidationError("diagnostic needs at least one variable")
    comps = []
    skipped = []
    for name in variables:
        j = constructed.schema.index(name)
        ps, pr = _level_probs(constructed, j), _level_probs(reference, j)
        if ps is None or pr is None:
            skipped.append(name)
            continue
        comps.append(VariableComparison(name, ps, pr))
    if not comps:
        raise ValidationError("none of the requested variables is observed in both inputs")
    warn = [f"{v} not observed in both inputs; skipped" for v in skipped]
    return DiagnosticReport(comps, threshold, label, warn)
