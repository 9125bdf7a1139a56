"""Tabular case data: CSV reading and column typing."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

__all__ = ["DataTable", "DataError", "read_csv", "write_csv"]

MISSING = "?"


class DataError(ValueError):
    """Malformed data or data incompatible with the model."""


@dataclass(frozen=True)
class DataTable:
    """Rectangular numeric table; missing cells are NaN and flagged in ``mask``."""

    columns: tuple
    values: np.ndarray
    mask: np.ndarray
    types: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1, len(self.columns))
        m = np.asarray(self.mask, dtype=bool).reshape(v.shape)
        if len(set(self.columns)) != len(self.columns):
            raise DataError("duplicate column names")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def has(self, name: str) -> bool:
        return name in self.columns

    def column(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise DataError(f"no column named '{name}'") from None
        return self.values[:, j], self.mask[:, j]

    @classmethod
    def from_columns(cls, data: dict) -> "DataTable":
        """Build from ``{name: sequence}``; ``None`` or NaN entries are missing."""
        names = tuple(data)
        cols = []
        masks = []
        n = None
        for k in names:
            raw = list(data[k])
            if n is None:
                n = len(raw)
            elif len(raw) != n:
                raise DataError("columns differ in length")
            arr = np.array([np.nan if x is None else float(x) for x in raw], dtype=float)
            cols.append(arr)
            masks.append(np.isnan(arr))
        n = n or 0
        values = np.column_stack(cols) if cols else np.zeros((n, 0))
        mask = np.column_stack(masks) if masks else np.zeros((n, 0), bool)
        return cls(names, values, mask)


def read_csv(source: Union[str, Path, io.TextIOBase], missing: str = MISSING) -> DataTable:
    """Read an RFC-4180 CSV with a header row; ``missing`` marks unknown cells."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return _read(fh, missing)
    return _read(source, missing)


def _read(fh, missing: str) -> DataTable:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty data file") from None
    header = tuple(h.strip() for h in header)
    if any(not h for h in header):
        raise DataError("empty column name in header")
    rows, masks = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {lineno} has {len(row)} fields, expected {len(header)}")
        vals, miss = [], []
        for name, cell in zip(header, row):
            cell = cell.strip()
            if cell == missing:
                vals.append(np.nan)
                miss.append(True)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"row {lineno} column '{name}': cannot parse {cell!r}") from None
            if not np.isfinite(v):
                raise DataError(f"row {lineno} column '{name}': non-finite value")
            vals.append(v)
            miss.append(False)
        rows.append(vals)
        masks.append(miss)
    values = np.array(rows, dtype=float).reshape(-1, len(header))
    mask = np.array(masks, dtype=bool).reshape(-1, len(header))
    return DataTable(header, values, mask)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows, missing: str = MISSING) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([missing if (isinstance(x, float) and np.isnan(x)) else _fmt(x) for x in r])


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if xf.is_integer() and abs(xf) < 1e15:
        return str(int(xf))
    return repr(xf)
