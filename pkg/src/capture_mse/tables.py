"""Stratified incomplete contingency tables and loglinear design matrices.

A dual-system stratum holds the three observed cells (1,1), (1,0), (0,1);
a triple-system stratum holds the seven cells other than (0,0,0).  The
never-observed cell is only known for synthetic data and is carried along
as ``n00_truth`` / ``n000_truth``.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np


class SpecificationError(ValueError):
    """Model specification inconsistent with the data or with itself."""


class TableFormatError(ValueError):
    """Malformed table input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _check_count(name: str, value) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise ValueError(f"{name} must be an integer count, got {value!r}")
    value = int(value)
    if value < 0:
        raise ValueError(f"{name} must be nonnegative, got {value}")
    return value


def _check_truth(name: str, value):
    if value is None:
        return None
    value = float(value)
    if not value >= 0:
        raise ValueError(f"{name} must be nonnegative, got {value}")
    return value


@dataclass(frozen=True)
class DualStratumCounts:
    n11: int
    n10: int
    n01: int
    n00_truth: float | None = None

    lists = 2
    cell_names = ("n11", "n10", "n01")
    cells = ((1, 1), (1, 0), (0, 1))
    missing_cell = (0, 0)

    def __post_init__(self):
        for name in self.cell_names:
            object.__setattr__(self, name, _check_count(name, getattr(self, name)))
        object.__setattr__(self, "n00_truth", _check_truth("n00_truth", self.n00_truth))

    @property
    def observed(self) -> tuple[int, ...]:
        return (self.n11, self.n10, self.n01)

    @property
    def missing_truth(self) -> float | None:
        return self.n00_truth

    @property
    def total(self) -> int:
        return self.n11 + self.n10 + self.n01


@dataclass(frozen=True)
class TripleStratumCounts:
    n111: int
    n110: int
    n101: int
    n011: int
    n100: int
    n010: int
    n001: int
    n000_truth: float | None = None

    lists = 3
    # field order (also the CSV column order)
    cell_names = ("n111", "n110", "n101", "n011", "n100", "n010", "n001")
    # design-row order: lexicographic descending
    cells = ((1, 1, 1), (1, 1, 0), (1, 0, 1), (1, 0, 0), (0, 1, 1), (0, 1, 0), (0, 0, 1))
    missing_cell = (0, 0, 0)

    def __post_init__(self):
        for name in self.cell_names:
            object.__setattr__(self, name, _check_count(name, getattr(self, name)))
        object.__setattr__(self, "n000_truth", _check_truth("n000_truth", self.n000_truth))

    @property
    def observed(self) -> tuple[int, ...]:
        """Counts in design-row order (111, 110, 101, 100, 011, 010, 001)."""
        return tuple(getattr(self, "n" + "".join(map(str, c))) for c in self.cells)

    @property
    def missing_truth(self) -> float | None:
        return self.n000_truth

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in self.cell_names)


StratumCounts = Union[DualStratumCounts, TripleStratumCounts]


@dataclass(frozen=True)
class StratifiedTable:
    strata: tuple[StratumCounts, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        strata = tuple(self.strata)
        if not strata:
            raise ValueError("a table needs at least one stratum")
        kind = type(strata[0])
        if kind not in (DualStratumCounts, TripleStratumCounts):
            raise TypeError(f"unsupported stratum type {kind.__name__}")
        if any(type(s) is not kind for s in strata):
            raise ValueError("strata must all be dual or all be triple")
        labels = tuple(str(x) for x in self.labels) if self.labels else tuple(
            str(i + 1) for i in range(len(strata)))
        if len(labels) != len(strata):
            raise ValueError("one label per stratum required")
        if len(set(labels)) != len(labels):
            raise ValueError("stratum labels must be unique")
        object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def dual(cls, rows: Iterable[Sequence[int]], labels=()) -> "StratifiedTable":
        """Build from ``(n11, n10, n01)`` or ``(n11, n10, n01, n00_truth)`` rows."""
        return cls(tuple(DualStratumCounts(*row) for row in rows), tuple(labels))

    @classmethod
    def triple(cls, rows: Iterable[Sequence[int]], labels=()) -> "StratifiedTable":
        """Build from rows in field order ``(n111, n110, n101, n011, n100, n010, n001)``."""
        return cls(tuple(TripleStratumCounts(*row) for row in rows), tuple(labels))

    @property
    def lists(self) -> int:
        return self.strata[0].lists

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    @property
    def cells(self) -> tuple[tuple[int, ...], ...]:
        return self.strata[0].cells

    def counts(self) -> np.ndarray:
        """Observed counts, shape (strata, cells), in design-row order."""
        return np.array([s.observed for s in self.strata], dtype=float)

    def complete_counts(self) -> np.ndarray:
        """Counts including the missing cell as the last column; needs truths."""
        truths = [s.missing_truth for s in self.strata]
        if any(t is None for t in truths):
            raise SpecificationError("complete table requested but the missing-cell truth is unknown")
        return np.column_stack([self.counts(), np.asarray(truths, dtype=float)])

    def stratum_totals(self) -> np.ndarray:
        return np.array([s.total for s in self.strata], dtype=float)


def observed_total(table: StratifiedTable) -> int:
    return sum(s.total for s in table.strata)


# ---------------------------------------------------------------------------
# model specification

FIXED_TERMS = (
    "intercept", "A", "B", "C", "R",
    "AB", "AC", "BC", "AR", "BR", "CR",
    "ABC", "ABR", "ACR", "BCR", "ABCR",
)
RANDOM_TERMS = {
    "u0": "intercept", "u1": "A", "u2": "B", "u3": "C",
    "u4": "AB", "u5": "AC", "u6": "BC",
}
CORNER = "corner-point"
SUM_ZERO = "sum-zero"


def _lists_of(term: str) -> str:
    return "" if term == "intercept" else term.replace("R", "")


@dataclass(frozen=True)
class ModelSpec:
    lists: int
    terms: frozenset = field(default_factory=frozenset)
    random_terms: frozenset = field(default_factory=frozenset)
    parameterization: str = CORNER

    def __post_init__(self):
        terms = frozenset(self.terms)
        random_terms = frozenset(self.random_terms)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "random_terms", random_terms)
        if self.lists not in (2, 3):
            raise SpecificationError("only 2 or 3 lists are supported")
        if self.parameterization not in (CORNER, SUM_ZERO):
            raise SpecificationError(f"unknown parameterization {self.parameterization!r}")
        unknown = terms - set(FIXED_TERMS)
        if unknown:
            raise SpecificationError(f"unknown fixed terms {sorted(unknown)}")
        unknown = random_terms - set(RANDOM_TERMS)
        if unknown:
            raise SpecificationError(f"unknown random terms {sorted(unknown)}")
        if self.lists == 2:
            bad = [t for t in terms | {RANDOM_TERMS[u] for u in random_terms} if "C" in t]
            if bad:
                raise SpecificationError(f"terms {sorted(bad)} reference list C in a dual-system model")
        if random_terms and self.parameterization != SUM_ZERO:
            raise SpecificationError("random effects require the sum-zero parameterization")
        for u in random_terms:
            counterpart = RANDOM_TERMS[u]
            needed = {"intercept"} if counterpart == "intercept" else set(counterpart)
            if not needed <= terms:
                raise SpecificationError(f"random term {u} needs fixed terms {sorted(needed)}")

    @property
    def fixed_terms(self) -> list[str]:
        return [t for t in FIXED_TERMS if t in self.terms]

    @property
    def random_term_list(self) -> list[str]:
        return sorted(self.random_terms)

    @property
    def is_mixed(self) -> bool:
        return bool(self.random_terms)


def independence_spec(parameterization: str = CORNER) -> ModelSpec:
    return ModelSpec(2, {"intercept", "A", "B"}, parameterization=parameterization)


def conditional_independence_spec(parameterization: str = CORNER) -> ModelSpec:
    """[AR][BR]: lists independent within each stratum (maximal, zero df)."""
    return ModelSpec(2, {"intercept", "A", "B", "R", "AR", "BR"}, parameterization=parameterization)


def saturated_dual_spec(stratified: bool = True, parameterization: str = CORNER) -> ModelSpec:
    terms = {"intercept", "A", "B", "AB"}
    if stratified:
        terms |= {"R", "AR", "BR", "ABR"}
    return ModelSpec(2, terms, parameterization=parameterization)


def triple_maximal_spec(parameterization: str = CORNER) -> ModelSpec:
    """[ABR][ACR][BCR]."""
    return ModelSpec(3, {"intercept", "A", "B", "C", "R", "AR", "BR", "CR",
                         "AB", "AC", "BC", "ABR", "ACR", "BCR"},
                     parameterization=parameterization)


def triple_saturated_spec(parameterization: str = CORNER) -> ModelSpec:
    return ModelSpec(3, set(FIXED_TERMS), parameterization=parameterization)


def mixed_dual_spec() -> ModelSpec:
    """Random intercept and random A, B slopes by stratum."""
    return ModelSpec(2, {"intercept", "A", "B"}, {"u0", "u1", "u2"}, SUM_ZERO)


def mixed_triple_spec() -> ModelSpec:
    return ModelSpec(3, {"intercept", "A", "B", "C", "AB", "AC", "BC"},
                     {"u0", "u1", "u2", "u3", "u4", "u5", "u6"}, SUM_ZERO)


# ---------------------------------------------------------------------------
# design matrices

def _list_code(level: int, parameterization: str) -> float:
    if parameterization == CORNER:
        return float(level)
    return 1.0 if level == 1 else -1.0


def _stratum_codes(n_strata: int, parameterization: str) -> np.ndarray:
    """(strata, strata-1) coding of R: corner drops the first stratum,
    sum-zero uses deviation coding with the last stratum redundant."""
    if parameterization == CORNER:
        return np.eye(n_strata)[:, 1:]
    codes = np.eye(n_strata)[:, :-1]
    codes[-1, :] = -1.0
    return codes


def term_value(term: str, cell: Sequence[int], parameterization: str) -> float:
    """Product of list codings of ``term`` (R excluded) at ``cell``."""
    value = 1.0
    for letter in _lists_of(term):
        value *= _list_code(cell["ABC".index(letter)], parameterization)
    return value


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray          # (rows, columns)
    columns: tuple[str, ...]
    rows: tuple[tuple[int, tuple[int, ...]], ...]   # (stratum index, cell)
    counts: np.ndarray          # response aligned with rows


def _cells_for(table: StratifiedTable, complete: bool):
    cells = table.cells
    return cells + (table.strata[0].missing_cell,) if complete else cells


def design_rows(spec: ModelSpec, n_strata: int, cells, labels=None):
    """Fixed-effect design for arbitrary cells: returns (matrix, column labels).

    ``matrix`` has shape (strata * cells, columns) with stratum-major rows.
    """
    labels = labels or [str(i + 1) for i in range(n_strata)]
    r_codes = _stratum_codes(n_strata, spec.parameterization)
    if spec.parameterization == CORNER:
        r_labels = [labels[k] for k in range(1, n_strata)]
    else:
        r_labels = [labels[k] for k in range(n_strata - 1)]
    blocks, names = [], []
    for term in spec.fixed_terms:
        vals = np.array([term_value(term, c, spec.parameterization) for c in cells])
        per_row = np.tile(vals, n_strata)
        if "R" in term:
            strat = np.repeat(r_codes, len(cells), axis=0)
            blocks.append(per_row[:, None] * strat)
            names.extend(f"{term}[{lab}]" for lab in r_labels)
        else:
            blocks.append(per_row[:, None])
            names.append(term)
    if not blocks:
        return np.zeros((n_strata * len(cells), 0)), ()
    return np.hstack(blocks), tuple(names)


def design_matrix(spec: ModelSpec, table: StratifiedTable, complete: bool = False) -> DesignMatrix:
    """Indicator/contrast matrix over the table's cells.

    With ``complete=True`` the never-observed cell is appended to every
    stratum (synthetic data only), which is how saturated models are fitted.
    """
    if spec.lists != table.lists:
        raise SpecificationError(
            f"model has {spec.lists} lists but the table has {table.lists}")
    cells = _cells_for(table, complete)
    matrix, names = design_rows(spec, table.n_strata, cells, list(table.labels))
    counts = table.complete_counts() if complete else table.counts()
    rows = tuple((l, c) for l in range(table.n_strata) for c in cells)
    return DesignMatrix(matrix, names, rows, counts.ravel())


def random_design(spec: ModelSpec, cells) -> np.ndarray:
    """Per-stratum random-effects design, shape (cells, random terms).

    Column k is the sum-zero coding of the fixed counterpart of the k-th
    random term, so each random term contributes one scalar per stratum.
    """
    return np.array([[term_value(RANDOM_TERMS[u], c, SUM_ZERO) for u in spec.random_term_list]
                     for c in cells]).reshape(len(cells), len(spec.random_terms))


# ---------------------------------------------------------------------------
# CSV input/output

DUAL_HEADER = ("stratum", "n11", "n10", "n01")
TRIPLE_HEADER = ("stratum",) + TripleStratumCounts.cell_names


def parse_table_csv(text: str) -> StratifiedTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TableFormatError("empty file", 1) from None
    header = tuple(h.strip() for h in header)
    if header == DUAL_HEADER:
        kind = DualStratumCounts
    elif header == TRIPLE_HEADER:
        kind = TripleStratumCounts
    else:
        raise TableFormatError(
            f"unrecognised header {','.join(header)!r}; expected "
            f"{','.join(DUAL_HEADER)!r} or {','.join(TRIPLE_HEADER)!r}", 1)
    strata, labels = [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise TableFormatError(f"expected {len(header)} fields, got {len(row)}", line_no)
        values = []
        for name, cell in zip(header[1:], row[1:]):
            try:
                values.append(int(cell.strip()))
            except ValueError:
                raise TableFormatError(f"{name}={cell!r} is not an integer", line_no) from None
            if values[-1] < 0:
                raise TableFormatError(f"{name}={cell!r} is negative", line_no)
        label = row[0].strip()
        if label in labels:
            raise TableFormatError(f"duplicate stratum {label!r}", line_no)
        labels.append(label)
        strata.append(kind(*values))
    if not strata:
        raise TableFormatError("no strata in file", 1)
    return StratifiedTable(tuple(strata), tuple(labels))


def read_table_csv(path) -> StratifiedTable:
    return parse_table_csv(Path(path).read_text(encoding="utf-8"))


def write_table_csv(table: StratifiedTable, path) -> None:
    header = DUAL_HEADER if table.lists == 2 else TRIPLE_HEADER
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for label, s in zip(table.labels, table.strata):
            writer.writerow([label] + [getattr(s, name) for name in header[1:]])


def all_cells(lists: int) -> list[tuple[int, ...]]:
    return [tuple(c) for c in itertools.product((1, 0), repeat=lists)]
