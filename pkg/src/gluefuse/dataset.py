"""Categorical schemas, datasets with provenance, and contingency tables.

Level codes are 1-based everywhere a caller can see them. Internally a
dataset is an ``(n, p)`` integer matrix where ``0`` marks a missing cell,
so the stored codes are the public codes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

MISSING = 0
DEFAULT_MISSING_TOKEN = "NA"
# dense tables above this many cells are refused rather than allocated
MAX_DENSE_CELLS = 2**31


class Role(str, Enum):
    A = "A"
    B = "B"
    BPRIME = "Bprime"


class Source(str, Enum):
    D1 = "D1"
    D2 = "D2"
    GLUE = "GLUE"
    CONSTRUCTED_GLUE = "CONSTRUCTED_GLUE"
    COMPLETE = "COMPLETE"


GLUE_SOURCES = (Source.GLUE.value, Source.CONSTRUCTED_GLUE.value)


@dataclass(frozen=True)
class Variable:
    name: str
    levels: int
    role: Role

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError(f"variable name must be a non-empty string, got {self.name!r}")
        if isinstance(self.levels, bool) or not isinstance(self.levels, (int, np.integer)):
            raise ValidationError(f"levels for {self.name!r} must be an integer")
        if self.levels < 2:
            raise ValidationError(f"variable {self.name!r} needs at least 2 levels, got {self.levels}")
        try:
            object.__setattr__(self, "role", Role(self.role))
        except ValueError:
            raise ValidationError(
                f"role for {self.name!r} must be one of A, B, Bprime; got {self.role!r}"
            ) from None
        object.__setattr__(self, "levels", int(self.levels))


@dataclass(frozen=True)
class Schema:
    """Ordered categorical variables, each tagged A, B or Bprime.

    Fusion needs every role present. ``require_roles=False`` relaxes that
    for plain modelling of a table that is not split into surveys.
    """

    variables: tuple[Variable, ...]
    require_roles: bool = field(default=True, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        variables = tuple(self.variables)
        object.__setattr__(self, "variables", variables)
        if not variables:
            raise ValidationError("schema needs at least one variable")
        names = [v.name for v in variables]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValidationError(f"duplicate variable names: {dupes}")
        for role in Role if self.require_roles else ():
            if not any(v.role is role for v in variables):
                raise ValidationError(f"schema has no variable with role {role.value}")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def from_records(cls, records: Iterable[dict], require_roles: bool = True) -> "Schema":
        out = []
        for rec in records:
            if not isinstance(rec, dict):
                raise ValidationError(f"schema entries must be objects, got {rec!r}")
            missing = {"name", "levels", "role"} - set(rec)
            if missing:
                raise ValidationError(f"schema entry {rec!r} lacks {sorted(missing)}")
            out.append(Variable(rec["name"], rec["levels"], rec["role"]))
        return cls(tuple(out), require_roles)

    def to_records(self) -> list[dict]:
        return [{"name": v.name, "levels": v.levels, "role": v.role.value} for v in self.variables]

    @property
    def p(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def levels(self) -> list[int]:
        return [v.levels for v in self.variables]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"unknown variable {name!r}") from None

    def indices(self, names: Sequence[str]) -> list[int]:
        return [self.index(n) for n in names]

    def names_with_role(self, role: Role | str) -> list[str]:
        role = Role(role)
        return [v.name for v in self.variables if v.role is role]

    def role_of(self, name: str) -> Role:
        return self.variables[self.index(name)].role

    def cell_count(self, names: Sequence[str] | None = None) -> int:
        """Number of cells in the cross-classification of ``names`` (all by default)."""
        vs = self.variables if names is None else [self.variables[i] for i in self.indices(names)]
        return math.prod(v.levels for v in vs)


def load_schema(path: str | os.PathLike) -> Schema:
    with open(path) as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"schema file {path} is not valid JSON: {exc}") from None
    if not isinstance(records, list):
        raise ValidationError("schema file must hold a JSON array of {name, levels, role}")
    return Schema.from_records(records)


def write_schema(schema: Schema, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(schema.to_records(), indent=2) + "\n")


def _by_design_missing(schema: Schema, source: str) -> set[int]:
    if source == Source.D1.value:
        return set(schema.indices(schema.names_with_role(Role.BPRIME)))
    if source == Source.D2.value:
        return set(schema.indices(schema.names_with_role(Role.B)))
    return set()


@dataclass(frozen=True)
class Dataset:
    """Rows of 1-based level codes (``0`` = missing) with per-row provenance."""

    schema: Schema
    codes: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int64, copy=True)
        if codes.ndim != 2 or codes.shape[1] != self.schema.p:
            raise ValidationError(
                f"codes must be an (n, {self.schema.p}) matrix, got shape {codes.shape}"
            )
        n = codes.shape[0]
        sources = self.sources
        if isinstance(sources, (str, Source)):
            sources = [Source(sources).value] * n
        sources = np.array([Source(s).value for s in sources], dtype="<U16")
        if sources.shape != (n,):
            raise ValidationError("one provenance tag is required per row")
        levels = np.array(self.schema.levels)
        bad = (codes < 0) | (codes > levels)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValidationError(
                f"code out of range 1..{levels[j]} in column {self.schema.names[j]!r} "
                f"(row {i + 1}): {codes[i, j]}"
            )
        for tag in (Source.D1.value, Source.D2.value):
            cols = sorted(_by_design_missing(self.schema, tag))
            rows = sources == tag
            if rows.any() and (codes[np.ix_(rows, cols)] != MISSING).any():
                raise ValidationError(
                    f"{tag} rows must leave {[self.schema.names[c] for c in cols]} missing"
                )
        codes.setflags(write=False)
        sources.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "sources", sources)

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def observed(self) -> np.ndarray:
        return self.codes != MISSING

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.schema.index(name)]

    def select(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.schema, self.codes[rows], self.sources[rows])

    def from_source(self, *tags: str | Source) -> "Dataset":
        wanted = [Source(t).value for t in tags]
        return self.select(np.isin(self.sources, wanted))

    def with_codes(self, codes: np.ndarray, sources=None) -> "Dataset":
        return Dataset(self.schema, codes, self.sources if sources is None else sources)

    def masked(self, names: Sequence[str]) -> np.ndarray:
        """Copy of the code matrix with the named columns set to missing."""
        codes = self.codes.copy()
        codes[:, self.schema.indices(names)] = MISSING
        return codes

    def relabel(self, source: str | Source) -> "Dataset":
        return Dataset(self.schema, self.codes, source)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.sources, other.sources)
        )


@dataclass(frozen=True)
class CompletedDataset(Dataset):
    """Dataset whose holes were filled; ``origin`` keeps each row's provenance.

    Filled rows carry the ``COMPLETE`` tag, since a D1 row with B' filled
    no longer meets the D1 missingness contract.
    """

    origin: np.ndarray = None

    @classmethod
    def build(cls, schema: Schema, codes: np.ndarray, origin, filled=None) -> "CompletedDataset":
        origin = np.array([Source(s).value for s in origin], dtype="<U16")
        if filled is None:
            filled = np.ones(origin.size, dtype=bool)
        sources = np.where(filled, Source.COMPLETE.value, origin)
        return cls(schema, codes, sources, origin)

    def part(self, source: str | Source) -> Dataset:
        """Rows that originally came from ``source``, tagged COMPLETE."""
        rows = self.origin == Source(source).value
        return Dataset(self.schema, self.codes[rows], self.sources[rows])

    def select(self, rows) -> "CompletedDataset":
        rows = np.asarray(rows)
        return CompletedDataset(self.schema, self.codes[rows], self.sources[rows], self.origin[rows])


def _parse_cell(token: str, missing_token: str, name: str, levels: int, lineno: int) -> int:
    if token == missing_token:
        return MISSING
    try:
        value = int(token)
    except ValueError:
        raise ValidationError(
            f"line {lineno}: non-integer cell {token!r} in column {name!r}"
        ) from None
    if str(value) != token.strip():
        raise ValidationError(f"line {lineno}: non-integer cell {token!r} in column {name!r}")
    if not 1 <= value <= levels:
        raise ValidationError(
            f"line {lineno}: code out of range 1..{levels} in column {name!r}: {value}"
        )
    return value


def load_dataset(
    schema: Schema,
    path: str | os.PathLike,
    source: str | Source,
    missing_token: str = DEFAULT_MISSING_TOKEN,
) -> Dataset:
    """Read a comma-separated file of level codes.

    The header must name schema variables, in any order. Columns that are
    missing by design for ``source`` (Bprime in D1, B in D2, anything in a
    glue file) may be omitted and are read as all-missing. Any invalid row
    aborts the load.
    """
    source = Source(source).value
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise ValidationError(f"duplicate header columns: {dupes}")
        cols = []
        for h in header:
            if h not in schema.names:
                raise ValidationError(f"unknown column {h!r} in {path}")
            cols.append(schema.index(h))
        absent = set(range(schema.p)) - set(cols)
        if source in GLUE_SOURCES:
            allowed = absent
        else:
            allowed = _by_design_missing(schema, source)
        if absent - allowed:
            raise ValidationError(
                f"{path} lacks columns {[schema.names[j] for j in sorted(absent - allowed)]}"
            )
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ValidationError(
                    f"line {lineno}: expected {len(header)} cells, found {len(record)}"
                )
            row = [MISSING] * schema.p
            for token, j in zip(record, cols):
                v = schema.variables[j]
                row[j] = _parse_cell(token, missing_token, v.name, v.levels, lineno)
            rows.append(row)
    codes = np.array(rows, dtype=np.int64).reshape(len(rows), schema.p)
    return Dataset(schema, codes, source)


def dataset_to_csv(data: Dataset, missing_token: str = DEFAULT_MISSING_TOKEN) -> str:
    lines = [",".join(data.schema.names)]
    for row in data.codes.tolist():
        lines.append(",".join(missing_token if c == MISSING else str(c) for c in row))
    return "\n".join(lines) + "\n"


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(
    data: Dataset, path: str | os.PathLike, missing_token: str = DEFAULT_MISSING_TOKEN
) -> None:
    write_text_atomic(path, dataset_to_csv(data, missing_token))


def concat(datasets: Sequence[Dataset]) -> Dataset:
    if not datasets:
        raise ValidationError("concat needs at least one dataset")
    schema = datasets[0].schema
    for d in datasets[1:]:
        if d.schema != schema:
            raise ValidationError("cannot concatenate datasets with different schemas")
    return Dataset(
        schema,
        np.concatenate([d.codes for d in datasets], axis=0),
        np.concatenate([d.sources for d in datasets]),
    )


@dataclass(frozen=True)
class ContingencyTable:
    variables: tuple[str, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts.shape

    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise ValidationError("cannot normalize an empty contingency table")
        return self.counts / total

    def cell(self, *levels: int) -> int:
        return int(self.counts[tuple(lv - 1 for lv in levels)])


def tabulate(data: Dataset, variables: Sequence[str]) -> ContingencyTable:
    """Complete-case counts over the cross-product of ``variables``."""
    if not variables:
        raise ValidationError("tabulate needs at least one variable")
    idx = data.schema.indices(variables)
    shape = tuple(data.schema.levels[j] for j in idx)
    if math.prod(shape) > MAX_DENSE_CELLS:
        raise ValidationError(f"table over {list(variables)} has too many cells to materialize")
    sub = data.codes[:, idx]
    complete = (sub != MISSING).all(axis=1)
    if data.n and not complete.any():
        warnings.warn(f"no complete rows over {list(variables)}; table is all zeros", stacklevel=2)
    flat = np.ravel_multi_index(tuple((sub[complete] - 1).T), shape)
    counts = np.bincount(flat, minlength=math.prod(shape)).reshape(shape)
    return ContingencyTable(tuple(variables), counts)
