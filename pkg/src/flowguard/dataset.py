"""Dataset specifications, CSV ingestion, fusion and train/eval splitting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

MISSING_CATEGORY = "__missing__"
ORIGIN_COLUMN = "__origin__"


class DataError(ValueError):
    """Bad dataset specification or flow data."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    categorical_fields: tuple[str, ...]
    numerical_fields: tuple[str, ...]
    label_column: str
    benign_label: str
    class_column: str | None = None
    dropped_columns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for attr in ("categorical_fields", "numerical_fields", "dropped_columns"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        self.validate()

    def validate(self) -> None:
        if not self.label_column:
            raise DataError("missing label column: 'label_column' must be set")
        if not self.categorical_fields and not self.numerical_fields:
            raise DataError("no features: declare at least one categorical or numerical field")
        groups = {
            "categorical_fields": self.categorical_fields,
            "numerical_fields": self.numerical_fields,
            "dropped_columns": self.dropped_columns,
        }
        for name, cols in groups.items():
            dupes = sorted({c for c in cols if cols.count(c) > 1})
            if dupes:
                raise DataError(f"duplicate field {dupes[0]!r} in {name}")
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                both = sorted(set(groups[a]) & set(groups[b]))
                if both:
                    raise DataError(f"overlapping field {both[0]!r} listed in both {a} and {b}")
        if self.label_column in self.categorical_fields or self.label_column in self.numerical_fields:
            raise DataError(f"label column {self.label_column!r} is listed as a feature field")
        if self.label_column in self.dropped_columns:
            raise DataError(f"label column {self.label_column!r} is listed in dropped_columns")

    @property
    def feature_fields(self) -> tuple[str, ...]:
        return self.categorical_fields + self.numerical_fields

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("categorical_fields", "numerical_fields", "dropped_columns"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        required = ("name", "categorical_fields", "numerical_fields", "label_column", "benign_label")
        for key in required:
            if key not in d:
                if key == "label_column":
                    raise DataError("missing label column: key 'label_column' not present")
                raise DataError(f"dataset spec is missing key {key!r}")
        unknown = set(d) - set(required) - {"class_column", "dropped_columns"}
        if unknown:
            raise DataError(f"dataset spec has unknown key(s): {sorted(unknown)}")
        return cls(
            name=str(d["name"]),
            categorical_fields=tuple(d["categorical_fields"]),
            numerical_fields=tuple(d["numerical_fields"]),
            label_column=d["label_column"],
            benign_label=str(d["benign_label"]),
            class_column=d.get("class_column"),
            dropped_columns=tuple(d.get("dropped_columns") or ()),
        )


def load_spec(path: str | Path) -> DatasetSpec:
    """Read and validate a JSON dataset specification."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"dataset spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse dataset spec {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise DataError(f"dataset spec {path} must be a JSON object")
    return DatasetSpec.from_dict(raw)


@dataclass(frozen=True)
class RawFlowTable:
    """Sanitised flow records in their original row order.

    ``frame`` holds strings for categorical/label cells and floats for
    numerical cells. ``origin`` names the source dataset of every row.
    Treat both as read-only.
    """

    frame: pd.DataFrame
    origin: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.origin) != len(self.frame):
            raise DataError("origin tags must cover every row")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    @property
    def rows(self) -> list[dict]:
        return self.frame.to_dict(orient="records")

    def take(self, indices) -> "RawFlowTable":
        idx = np.asarray(indices, dtype=np.int64)
        return RawFlowTable(self.frame.iloc[idx].reset_index(drop=True), self.origin[idx])


def ingest_frame(
    df: pd.DataFrame, spec: DatasetSpec, source: str = "<frame>", require_label: bool = True
) -> RawFlowTable:
    """Sanitise an all-string frame; empty strings mark missing cells."""
    needed = list(spec.feature_fields)
    if require_label:
        needed.append(spec.label_column)
    absent = [c for c in needed if c not in df.columns]
    if absent:
        raise DataError(f"{source}: header is missing declared column(s): {', '.join(absent)}")

    df = df.drop(columns=[c for c in spec.dropped_columns if c in df.columns])
    df = df.reset_index(drop=True).copy()
    for col in spec.numerical_fields:
        text = df[col].astype(str).str.strip()
        values = pd.to_numeric(text.where(text != "", "0"), errors="coerce")
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"{source}: row {row}: column {col!r} has non-numeric value {df[col].iloc[row]!r}"
            )
        df[col] = values.astype(float).clip(lower=0.0)
    for col in spec.categorical_fields:
        text = df[col].astype(str).str.strip()
        df[col] = text.where(text != "", MISSING_CATEGORY)
    return RawFlowTable(df, np.full(len(df), spec.name, dtype=object))


def ingest_csv(path: str | Path, spec: DatasetSpec, require_label: bool = True) -> RawFlowTable:
    """Load a flow CSV and sanitise it under ``spec``.

    Missing numerical cells become 0 and negatives are clamped to 0; missing
    categorical cells become ``"__missing__"``. No rows are dropped.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"flow file not found: {path}") from None
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read flow file {path}: {exc}") from None
    return ingest_frame(df, spec, source=str(path), require_label=require_label)


def fuse(tables: list[RawFlowTable], seed: int) -> RawFlowTable:
    """Concatenate same-schema tables and shuffle rows deterministically."""
    if not tables:
        raise DataError("fuse needs at least one table")
    ref = set(tables[0].columns)
    for t in tables[1:]:
        cols = set(t.columns)
        if cols != ref:
            diff = sorted(ref ^ cols)
            raise DataError(f"schema mismatch between fused tables: {diff}")
    order = tables[0].columns
    frame = pd.concat([t.frame[order] for t in tables], ignore_index=True)
    origin = np.concatenate([t.origin for t in tables])
    perm = np.random.default_rng(seed).permutation(len(frame))
    return RawFlowTable(frame.iloc[perm].reset_index(drop=True), origin[perm])


def split(table: RawFlowTable, train_fraction: float, seed: int) -> tuple[RawFlowTable, RawFlowTable]:
    """Shuffle and cut into (train, eval) with ``floor(fraction * N)`` train rows."""
    if len(table) == 0:
        raise DataError("cannot split an empty table")
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(table)
    n_train = int(np.floor(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return table.take(np.sort(perm[:n_train])), table.take(np.sort(perm[n_train:]))


def binary_labels(table: RawFlowTable, spec: DatasetSpec) -> np.ndarray:
    """0 for rows whose label equals the benign label, 1 otherwise."""
    cells = table.frame[spec.label_column].astype(str).str.strip()
    return (cells != str(spec.benign_label)).to_numpy().astype(np.int64)
