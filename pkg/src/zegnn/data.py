"""Tabular spatial datasets: role schemas, CSV ingest/export, z-scoring.

A dataset is a plain CSV with a header row. A role schema assigns each
column to one of: outcome, coordinate axis, burden block, or capacity
block (optionally a regime-label column). Column order inside the burden
and capacity blocks follows the schema, so covariate indexing is
deterministic end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np


class SchemaError(ValueError):
    """A role schema is inconsistent or references a missing column."""


class DataError(ValueError):
    """A data cell failed to parse as a finite number."""


class DegenerateColumnError(ValueError):
    """A column is constant, so it cannot be standardized."""


@dataclass(frozen=True)
class RoleSchema:
    """Column-role assignment for a tabular spatial dataset."""

    outcome: str
    coord_x: str
    coord_y: str
    burden_cols: tuple[str, ...]
    capacity_cols: tuple[str, ...]
    regime_col: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "burden_cols", tuple(self.burden_cols))
        object.__setattr__(self, "capacity_cols", tuple(self.capacity_cols))
        if not self.burden_cols:
            raise SchemaError("burden block must name at least one column")
        if not self.capacity_cols:
            raise SchemaError("capacity block must name at least one column")
        names = [self.outcome, self.coord_x, self.coord_y]
        names += list(self.burden_cols) + list(self.capacity_cols)
        if self.regime_col is not None:
            names.append(self.regime_col)
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(
                "schema roles must be pairwise disjoint; reused: "
                + ", ".join(sorted(dupes))
            )

    @property
    def all_columns(self) -> tuple[str, ...]:
        cols = (self.outcome, self.coord_x, self.coord_y)
        cols += self.burden_cols + self.capacity_cols
        if self.regime_col is not None:
            cols += (self.regime_col,)
        return cols


def read_schema(path) -> RoleSchema:
    """Parse a ``key = value`` role-schema config file.

    Recognized keys: outcome, coord_x, coord_y, burden, capacity, regime.
    burden/capacity values are comma-separated column lists. Lines that
    are blank or start with ``#`` are skipped.
    """
    entries: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    missing = [k for k in ("outcome", "coord_x", "coord_y", "burden", "capacity")
               if k not in entries]
    if missing:
        raise SchemaError(f"schema file missing keys: {', '.join(missing)}")

    def split(value):
        return tuple(v.strip() for v in value.split(",") if v.strip())

    return RoleSchema(
        outcome=entries["outcome"],
        coord_x=entries["coord_x"],
        coord_y=entries["coord_y"],
        burden_cols=split(entries["burden"]),
        capacity_cols=split(entries["capacity"]),
        regime_col=entries.get("regime") or None,
    )


def write_schema(schema: RoleSchema, path) -> None:
    lines = [
        f"outcome = {schema.outcome}",
        f"coord_x = {schema.coord_x}",
        f"coord_y = {schema.coord_y}",
        f"burden = {','.join(schema.burden_cols)}",
        f"capacity = {','.join(schema.capacity_cols)}",
    ]
    if schema.regime_col is not None:
        lines.append(f"regime = {schema.regime_col}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class GroundTruthFields:
    """Known generating fields attached to a synthetic dataset.

    ``f_true = e_true - s_true`` and ``grad_f = grad_e - grad_s`` hold
    exactly (the generator fixes the effective temperature at 1).
    """

    e_true: np.ndarray
    s_true: np.ndarray
    f_true: np.ndarray
    regime: np.ndarray
    grad_f: np.ndarray
    grad_e: np.ndarray
    grad_s: np.ndarray


@dataclass(frozen=True)
class SpatialDataset:
    """Point dataset with burden/capacity covariate blocks and an outcome."""

    coords: np.ndarray
    x_burden: np.ndarray
    x_capacity: np.ndarray
    y: np.ndarray
    burden_names: tuple[str, ...]
    capacity_names: tuple[str, ...]
    regime_labels: np.ndarray | None = None
    truth: GroundTruthFields | None = None

    def __post_init__(self):
        n = self.y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        shapes = {
            "coords": (self.coords, (n, 2)),
            "x_burden": (self.x_burden, (n, len(self.burden_names))),
            "x_capacity": (self.x_capacity, (n, len(self.capacity_names))),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise DataError(f"{name} has shape {arr.shape}, expected {want}")
        for name, arr in (("coords", self.coords), ("x_burden", self.x_burden),
                          ("x_capacity", self.x_capacity), ("y", self.y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_burden(self) -> int:
        return self.x_burden.shape[1]

    @property
    def p_capacity(self) -> int:
        return self.x_capacity.shape[1]

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.burden_names + self.capacity_names

    def covariates(self) -> np.ndarray:
        """Burden block then capacity block, as one matrix."""
        return np.hstack([self.x_burden, self.x_capacity])

    def subset(self, ids: np.ndarray) -> "SpatialDataset":
        """Row subset (e.g. one CV fold), preserving the given order."""
        ids = np.asarray(ids)
        truth = self.truth
        if truth is not None:
            truth = GroundTruthFields(
                e_true=truth.e_true[ids], s_true=truth.s_true[ids],
                f_true=truth.f_true[ids], regime=truth.regime[ids],
                grad_f=truth.grad_f[ids], grad_e=truth.grad_e[ids],
                grad_s=truth.grad_s[ids],
            )
        return replace(
            self,
            coords=self.coords[ids],
            x_burden=self.x_burden[ids],
            x_capacity=self.x_capacity[ids],
            y=self.y[ids],
            regime_labels=None if self.regime_labels is None
            else self.regime_labels[ids],
            truth=truth,
        )


def load_dataset(csv_path, schema: RoleSchema) -> SpatialDataset:
    """Load a header-CSV into a dataset, extracting columns in schema order.

    Raises SchemaError naming any absent column, and DataError with the
    offending row index for cells that are not finite numbers. Row order
    is preserved; duplicate coordinates are allowed.
    """
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file, header row required")
        col_index = {name: i for i, name in enumerate(header)}
        for name in schema.all_columns:
            if name not in col_index:
                raise SchemaError(f"column '{name}' not found in {csv_path}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{csv_path}: no data rows")

    def parse_column(name, rows, integer=False):
        j = col_index[name]
        out = np.empty(len(rows), dtype=np.int64 if integer else np.float64)
        for i, row in enumerate(rows):
            try:
                value = float(row[j])
            except (ValueError, IndexError):
                raise DataError(
                    f"{csv_path}: row {i}, column '{name}': "
                    f"cannot parse {row[j] if j < len(row) else '<missing>'!r}"
                )
            if not np.isfinite(value):
                raise DataError(
                    f"{csv_path}: row {i}, column '{name}': non-finite value"
                )
            if integer:
                if value != int(value):
                    raise DataError(
                        f"{csv_path}: row {i}, column '{name}': "
                        "regime label must be an integer"
                    )
                out[i] = int(value)
            else:
                out[i] = value
        return out

    y = parse_column(schema.outcome, rows)
    cx = parse_column(schema.coord_x, rows)
    cy = parse_column(schema.coord_y, rows)
    x_burden = np.column_stack([parse_column(c, rows) for c in schema.burden_cols])
    x_capacity = np.column_stack([parse_column(c, rows) for c in schema.capacity_cols])
    regime = None
    if schema.regime_col is not None:
        regime = parse_column(schema.regime_col, rows, integer=True)
    return SpatialDataset(
        coords=np.column_stack([cx, cy]),
        x_burden=x_burden,
        x_capacity=x_capacity,
        y=y,
        burden_names=schema.burden_cols,
        capacity_names=schema.capacity_cols,
        regime_labels=regime,
    )


def format_float(value: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(value))


def write_dataset_csv(dataset: SpatialDataset, schema: RoleSchema, path) -> None:
    """Write a dataset as CSV such that reloading reproduces it bit for bit."""
    header = [schema.outcome, schema.coord_x, schema.coord_y]
    header += list(schema.burden_cols) + list(schema.capacity_cols)
    if schema.regime_col is not None:
        if dataset.regime_labels is None:
            raise SchemaError("schema names a regime column but dataset has none")
        header.append(schema.regime_col)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [format_float(dataset.y[i]),
                   format_float(dataset.coords[i, 0]),
                   format_float(dataset.coords[i, 1])]
            row += [format_float(v) for v in dataset.x_burden[i]]
            row += [format_float(v) for v in dataset.x_capacity[i]]
            if schema.regime_col is not None:
                row.append(str(int(dataset.regime_labels[i])))
            writer.writerow(row)


def standardize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Population z-score: returns (z, mean, sd) with sd using the /N form.

    The returned moments invert the transform via ``mean + sd * z``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise DataError("standardize requires at least 2 values")
    mean = float(np.mean(values))
    sd = float(np.sqrt(np.mean((values - mean) ** 2)))
    if sd == 0.0:
        raise DegenerateColumnError("constant column cannot be standardized")
    return (values - mean) / sd, mean, sd


def destandardize(z: np.ndarray, mean: float, sd: float) -> np.ndarray:
    return mean + sd * np.asarray(z, dtype=np.float64)


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-scoring moments, fit once and applied elsewhere.

    In cross-validation the moments are fit on training rows only and
    then applied to held-out rows without re-estimation.
    """

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64).T).T
        mean = x.mean(axis=0)
        sd = np.sqrt(np.mean((x - mean) ** 2, axis=0))
        if np.any(sd == 0.0):
            bad = int(np.argmax(sd == 0.0))
            raise DegenerateColumnError(f"column {bad} is constant")
        return cls(mean=mean, sd=sd)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return (x - self.mean[0]) / self.sd[0]
        return (x - self.mean) / self.sd

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1 and self.mean.shape[0] == 1:
            return self.mean[0] + self.sd[0] * z
        return self.mean + self.sd * z
