"""Train-only encoder fitting, flow encoding and sliding windows."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from .dataset import DataError, DatasetSpec, RawFlowTable, binary_labels

STATE_VERSION = 1
DEFAULT_N_TOP = 32
DEFAULT_WINDOW = 8


class EncodingMode(str, Enum):
    ONE_HOT = "one_hot"
    INTEGER = "integer"


@dataclass(frozen=True)
class CategoricalFieldState:
    field: str
    top_categories: tuple[str, ...]

    @property
    def other_index(self) -> int:
        return len(self.top_categories)

    @property
    def cardinality(self) -> int:
        return len(self.top_categories) + 1

    def index_of(self, value: str) -> int:
        try:
            return self.top_categories.index(value)
        except ValueError:
            return self.other_index


@dataclass(frozen=True)
class NumericalFieldState:
    field: str
    min_log: float
    max_log: float


@dataclass(frozen=True)
class PreprocessorState:
    mode: EncodingMode
    n_top: int
    categorical: tuple[CategoricalFieldState, ...]
    numerical: tuple[NumericalFieldState, ...]
    spec: DatasetSpec

    @property
    def feature_width(self) -> int:
        if self.mode is EncodingMode.ONE_HOT:
            return sum(c.cardinality for c in self.categorical) + len(self.numerical)
        return len(self.categorical) + len(self.numerical)

    @property
    def categorical_layout(self) -> tuple[int, ...]:
        """Cardinality of every categorical field, in field order."""
        return tuple(c.cardinality for c in self.categorical)

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "mode": self.mode.value,
            "n_top": self.n_top,
            "feature_width": self.feature_width,
            "categorical": [
                {"field": c.field, "top_categories": list(c.top_categories)} for c in self.categorical
            ],
            "numerical": [
                {"field": n.field, "min_log": n.min_log, "max_log": n.max_log} for n in self.numerical
            ],
            "spec": self.spec.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessorState":
        if d.get("version") != STATE_VERSION:
            raise DataError(f"unsupported preprocessor state version {d.get('version')!r}")
        state = cls(
            mode=EncodingMode(d["mode"]),
            n_top=int(d["n_top"]),
            categorical=tuple(
                CategoricalFieldState(c["field"], tuple(c["top_categories"])) for c in d["categorical"]
            ),
            numerical=tuple(
                NumericalFieldState(n["field"], float(n["min_log"]), float(n["max_log"]))
                for n in d["numerical"]
            ),
            spec=DatasetSpec.from_dict(d["spec"]),
        )
        if "feature_width" in d and d["feature_width"] != state.feature_width:
            raise DataError("preprocessor state feature_width disagrees with its fields")
        return state

    @classmethod
    def from_json(cls, text: str) -> "PreprocessorState":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _top_categories(values, n_top: int) -> tuple[str, ...]:
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(k for k, _ in ranked[:n_top])


def fit(
    train: RawFlowTable,
    spec: DatasetSpec,
    n_top: int = DEFAULT_N_TOP,
    mode: EncodingMode | str = EncodingMode.ONE_HOT,
) -> PreprocessorState:
    """Fit top-N category maps and log-space extrema on training rows only.

    Categories are ranked by descending count, ties broken lexicographically.
    """
    mode = EncodingMode(mode)
    if len(train) == 0:
        raise DataError("cannot fit on an empty training table")
    if n_top < 1:
        raise DataError(f"n_top must be >= 1, got {n_top}")
    frame = train.frame
    categorical = tuple(
        CategoricalFieldState(col, _top_categories(frame[col].astype(str), n_top))
        for col in spec.categorical_fields
    )
    numerical = []
    for col in spec.numerical_fields:
        logged = np.log1p(frame[col].to_numpy(dtype=np.float64))
        numerical.append(NumericalFieldState(col, float(logged.min()), float(logged.max())))
    return PreprocessorState(mode, n_top, categorical, tuple(numerical), spec)


def encode_categorical(value: str, field_state: CategoricalFieldState, mode: EncodingMode | str):
    """One-hot vector of length ``|top| + 1`` or an integer index; unseen values
    go to the trailing "other" slot."""
    idx = field_state.index_of(value)
    if EncodingMode(mode) is EncodingMode.INTEGER:
        return idx
    vec = np.zeros(field_state.cardinality)
    vec[idx] = 1.0
    return vec


def scale_numerical(values: np.ndarray, st: NumericalFieldState) -> np.ndarray:
    logged = np.log1p(np.asarray(values, dtype=np.float64))
    span = st.max_log - st.min_log
    if span == 0.0:
        return np.full(logged.shape, 0.5)
    return np.clip((logged - st.min_log) / span, 0.0, 1.0)


@dataclass(frozen=True)
class EncodedFlows:
    features: np.ndarray  # (N, feature_width)
    labels: np.ndarray | None  # (N,) of 0/1, None when the label column is absent

    def __len__(self) -> int:
        return len(self.features)


def transform(table: RawFlowTable, state: PreprocessorState) -> EncodedFlows:
    """Encode every row of ``table``; row i of the output is input row i."""
    frame = table.frame
    missing = [c for c in state.spec.feature_fields if c not in frame.columns]
    if missing:
        raise DataError(f"table is missing column(s): {', '.join(missing)}")
    n = len(frame)
    blocks = []
    for cs in state.categorical:
        lookup = {v: i for i, v in enumerate(cs.top_categories)}
        idx = np.fromiter(
            (lookup.get(v, cs.other_index) for v in frame[cs.field].astype(str)), dtype=np.int64, count=n
        )
        if state.mode is EncodingMode.ONE_HOT:
            onehot = np.zeros((n, cs.cardinality))
            onehot[np.arange(n), idx] = 1.0
            blocks.append(onehot)
        else:
            blocks.append(idx[:, None].astype(np.float64))
    for ns in state.numerical:
        blocks.append(scale_numerical(frame[ns.field].to_numpy(dtype=np.float64), ns)[:, None])
    features = np.hstack(blocks) if blocks else np.zeros((n, 0))
    assert np.all(np.isfinite(features)), "non-finite encoded feature"
    labels = None
    if state.spec.label_column in frame.columns:
        labels = binary_labels(table, state.spec)
    return EncodedFlows(features, labels)


@dataclass(frozen=True)
class EncodedWindow:
    features: np.ndarray  # (T, feature_width), oldest flow first
    label: int | None
    pad_count: int


@dataclass(frozen=True)
class WindowSet:
    """Stacked windows: ``features`` is (N, T, F); one window per flow."""

    features: np.ndarray
    labels: np.ndarray | None
    pad_counts: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> EncodedWindow:
        label = None if self.labels is None else int(self.labels[i])
        return EncodedWindow(self.features[i], label, int(self.pad_counts[i]))

    def __iter__(self) -> Iterator[EncodedWindow]:
        for i in range(len(self)):
            yield self[i]

    @property
    def window(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "WindowSet":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return WindowSet(self.features[idx], labels, self.pad_counts[idx])

    @classmethod
    def from_windows(cls, windows: list[EncodedWindow]) -> "WindowSet":
        labels = None
        if windows and windows[0].label is not None:
            labels = np.array([w.label for w in windows], dtype=np.int64)
        return cls(
            np.stack([w.features for w in windows]),
            labels,
            np.array([w.pad_count for w in windows], dtype=np.int64),
        )


def make_windows(encoded: EncodedFlows, window: int = DEFAULT_WINDOW) -> WindowSet:
    """Window i holds flows ``i-T+1 .. i``, zero-padded on the left at stream start."""
    if window < 1:
        raise DataError(f"window length must be >= 1, got {window}")
    x = encoded.features
    n, width = x.shape
    padded = np.vstack([np.zeros((window - 1, width)), x])
    idx = np.arange(n)[:, None] + np.arange(window)[None, :]
    features = padded[idx]
    pads = np.maximum(window - 1 - np.arange(n), 0)
    return WindowSet(features, encoded.labels, pads.astype(np.int64))
