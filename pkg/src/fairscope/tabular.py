"""Tabular core: typed columns, CSV ingestion, design matrices, holdout splits.

Tables are immutable after construction; every operation below is a pure
function, so tables and model specs can be shared freely across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

#: Cell contents treated as missing during ingestion.
MISSING_CELLS = frozenset({"", "NA"})


def _parse_real(cell: str) -> float | None:
    """Parse a cell as a finite real number, or return None."""
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


@dataclass(frozen=True)
class Column:
    """One named column: numeric (float64 values) or factor (codes + levels)."""

    name: str
    values: np.ndarray
    levels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.levels is not None:
            codes = np.asarray(self.values)
            if codes.size and (codes.min() < 0 or codes.max() >= len(self.levels)):
                raise DataError(f"factor column {self.name!r} has out-of-range codes")
            object.__setattr__(self, "values", codes.astype(np.int64))
        else:
            object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def is_factor(self) -> bool:
        return self.levels is not None

    def labels(self) -> np.ndarray:
        """Row labels of a factor column, as an object array."""
        if self.levels is None:
            raise DataError(f"column {self.name!r} is numeric, not a factor")
        return np.asarray(self.levels, dtype=object)[self.values]

    def take(self, indices: np.ndarray) -> "Column":
        return Column(self.name, self.values[indices], self.levels)


@dataclass(frozen=True)
class Table:
    """An immutable named-column dataset."""

    name: str
    columns: tuple[Column, ...]
    dropped_rows: int = 0

    def __post_init__(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise DataError("column names must be unique and non-empty")
        lengths = {len(c.values) for c in self.columns}
        if len(lengths) > 1:
            raise DataError("all columns must have the same length")

    @property
    def nrows(self) -> int:
        return len(self.columns[0].values) if self.columns else 0

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise DataError(f"no column named {name!r} in table {self.name!r}")

    def subset(self, indices) -> "Table":
        idx = np.asarray(indices)
        return Table(self.name, tuple(c.take(idx) for c in self.columns))

    def drop(self, *names: str) -> "Table":
        missing = [n for n in names if n not in self.column_names]
        if missing:
            raise DataError(f"no column named {missing[0]!r} in table {self.name!r}")
        return Table(self.name, tuple(c for c in self.columns if c.name not in names))


def load_csv(path: str | Path) -> Table:
    """Load a CSV file into a Table, dropping rows with missing cells.

    A column is numeric iff every retained cell parses as a finite real;
    otherwise it becomes a factor whose levels are relabelled to
    lexicographic order. The number of dropped rows is recorded on the
    returned table.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from exc

    if len(set(header)) != len(header) or any(not h for h in header):
        raise DataError(f"{path}: header names must be unique and non-empty")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, expected {width}")

    kept = [row for row in rows if not any(cell in MISSING_CELLS for cell in row)]
    dropped = len(rows) - len(kept)
    if not kept:
        raise DataError(f"{path}: no data rows remain after dropping missing values")

    columns = []
    for j, name in enumerate(header):
        cells = [row[j] for row in kept]
        parsed = [_parse_real(c) for c in cells]
        if all(v is not None for v in parsed):
            columns.append(Column(name, np.array(parsed, dtype=np.float64)))
        else:
            levels = tuple(sorted(set(cells)))
            index = {label: k for k, label in enumerate(levels)}
            codes = np.array([index[c] for c in cells], dtype=np.int64)
            columns.append(Column(name, codes, levels))
    return Table(path.stem, tuple(columns), dropped_rows=dropped)


def write_csv(table: Table, path: str | Path) -> None:
    """Write a Table back to CSV; numeric cells use shortest round-trip repr."""
    cols = []
    for c in table.columns:
        if c.is_factor:
            cols.append(c.labels())
        else:
            cols.append([repr(v) for v in c.values])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.column_names)
        for i in range(table.nrows):
            writer.writerow([col[i] for col in cols])


@dataclass(frozen=True)
class ModelSpec:
    """Names the response Y, the optional sensitive column S, and covariates X."""

    y_name: str
    s_name: str | None = None
    x_names: tuple[str, ...] = ()

    def resolve(self, table: Table) -> "ModelSpec":
        """Validate against a table; empty x_names means every other column."""
        names = table.column_names
        if self.y_name not in names:
            raise DataError(f"response column {self.y_name!r} not in table")
        if self.s_name is not None:
            if self.s_name not in names:
                raise DataError(f"sensitive column {self.s_name!r} not in table")
            if self.s_name == self.y_name:
                raise DataError("response and sensitive columns must differ")
        x = self.x_names or tuple(
            n for n in names if n != self.y_name and n != self.s_name
        )
        reserved = {self.y_name, self.s_name}
        for n in x:
            if n not in names:
                raise DataError(f"covariate column {n!r} not in table")
            if n in reserved:
                raise DataError(f"covariate {n!r} duplicates the response or sensitive column")
        return ModelSpec(self.y_name, self.s_name, tuple(x))


@dataclass(frozen=True)
class DesignColumn:
    """Metadata for one design-matrix column."""

    name: str
    source: str
    level: str | None = None


@dataclass(frozen=True)
class DesignMatrix:
    """A dense regression design with per-column provenance.

    Factors contribute one 0/1 dummy per non-reference level; the reference
    is the lexicographically first level observed when the design was built.
    """

    matrix: np.ndarray
    column_meta: tuple[DesignColumn, ...]
    intercept_included: bool
    factor_refs: dict[str, str] = field(default_factory=dict)
    factor_levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.column_meta)

    def encode_rows(self, table: Table) -> np.ndarray:
        """Encode rows of `table` into this design's column space.

        Raises DataError when a factor row holds a level this design never saw.
        """
        n = table.nrows
        out = np.zeros((n, len(self.column_meta)))
        sources = {m.source for m in self.column_meta if m.source != "(Intercept)"}
        cols = {name: table.column(name) for name in sources}
        for j, meta in enumerate(self.column_meta):
            if meta.source == "(Intercept)":
                out[:, j] = 1.0
                continue
            col = cols[meta.source]
            if meta.level is None:
                if col.is_factor:
                    raise DataError(f"column {meta.source!r} must be numeric")
                out[:, j] = col.values
            else:
                if not col.is_factor:
                    raise DataError(f"column {meta.source!r} must be a factor")
                out[:, j] = (col.labels() == meta.level).astype(np.float64)
        for source in sources:
            col = cols[source]
            if not col.is_factor:
                continue
            known = set(self.factor_levels[source])
            seen = set(col.levels[k] for k in np.unique(col.values))
            unseen = sorted(seen - known)
            if unseen:
                raise DataError(
                    f"level {unseen[0]!r} of column {source!r} was not seen when the design was built"
                )
        return out


def _dummy_block(col: Column) -> tuple[np.ndarray, list[DesignColumn], str]:
    levels = sorted(col.levels)
    if len(levels) < 2:
        raise DataError(f"factor column {col.name!r} has a single level")
    labels = col.labels()
    block = np.column_stack([(labels == lv).astype(np.float64) for lv in levels[1:]])
    meta = [DesignColumn(f"{col.name}{lv}", col.name, lv) for lv in levels[1:]]
    return block, meta, levels[0]


def response_vector(col: Column) -> np.ndarray:
    """Numeric response; a 2-level factor codes the lexicographically second level as 1."""
    if not col.is_factor:
        return col.values.copy()
    levels = sorted(col.levels)
    if len(levels) != 2:
        raise DataError(f"response factor {col.name!r} must have exactly 2 levels, has {len(levels)}")
    return (col.labels() == levels[1]).astype(np.float64)


def build_design(
    table: Table, spec: ModelSpec, include_s: bool = False
) -> tuple[DesignMatrix, np.ndarray]:
    """Build (design, y): intercept first, covariates in table order, S dummies last."""
    spec = spec.resolve(table)
    n = table.nrows
    blocks = [np.ones((n, 1))]
    meta: list[DesignColumn] = [DesignColumn("(Intercept)", "(Intercept)")]
    refs: dict[str, str] = {}
    level_sets: dict[str, tuple[str, ...]] = {}

    expand = [table.column(name) for name in spec.x_names]
    if include_s:
        if spec.s_name is None:
            raise DataError("include_s requires a sensitive column in the spec")
        expand.append(table.column(spec.s_name))
    for col in expand:
        if col.is_factor:
            block, block_meta, ref = _dummy_block(col)
            blocks.append(block)
            meta.extend(block_meta)
            refs[col.name] = ref
            level_sets[col.name] = tuple(sorted(col.levels))
        else:
            blocks.append(col.values.reshape(-1, 1))
            meta.append(DesignColumn(col.name, col.name))

    y = response_vector(table.column(spec.y_name))
    design = DesignMatrix(np.hstack(blocks), tuple(meta), True, refs, level_sets)
    return design, y


def standardize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Center and scale to sample mean 0, sample sd 1 (n-1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DataError("standardize needs at least 2 values")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if sd <= 0.0:
        raise DataError("cannot standardize a constant column")
    return (v - mean) / sd, mean, sd


@dataclass(frozen=True)
class HoldoutSplit:
    """Disjoint train/holdout row indices drawn for a given seed."""

    train_indices: np.ndarray
    holdout_indices: np.ndarray
    seed: int


def make_holdout(nrows: int, fraction: float | None = None, seed: int = 0) -> HoldoutSplit:
    """Sample a holdout set of floor(min(1000, 0.1*nrows)) rows, or floor(fraction*nrows)."""
    if nrows < 10:
        raise DataError(f"need at least 10 rows to split, got {nrows}")
    size = math.floor(min(1000.0, 0.1 * nrows)) if fraction is None else math.floor(fraction * nrows)
    if size <= 0 or size >= nrows:
        raise DataError(f"holdout size {size} must be in [1, {nrows - 1}]")
    rng = np.random.default_rng(seed)
    holdout = np.sort(rng.choice(nrows, size=size, replace=False))
    mask = np.ones(nrows, dtype=bool)
    mask[holdout] = False
    return HoldoutSplit(np.flatnonzero(mask), holdout, seed)


_PREDICATE_OPS = ("<=", ">=", "==", "<", ">")


def filter_rows(table: Table, condits: list[str] | tuple[str, ...]) -> Table:
    """Apply "column op value" predicates (op in <,<=,>,>=,==) conjunctively."""
    mask = np.ones(table.nrows, dtype=bool)
    for text in condits:
        for op in _PREDICATE_OPS:
            if op in text:
                name, _, raw = text.partition(op)
                break
        else:
            raise DataError(f"cannot parse predicate {text!r}")
        name, raw = name.strip(), raw.strip()
        col = table.column(name)
        if col.is_factor:
            if op != "==":
                raise DataError(f"factor column {name!r} only supports '==' predicates")
            mask &= col.labels() == raw
        else:
            value = _parse_real(raw)
            if value is None:
                raise DataError(f"predicate value {raw!r} is not numeric")
            ops = {
                "<": np.less,
                "<=": np.less_equal,
                ">": np.greater,
                ">=": np.greater_equal,
                "==": np.equal,
            }
            mask &= ops[op](col.values, value)
    return table.subset(np.flatnonzero(mask))
