"""Run configuration and the ingest -> fuse -> split -> fit -> window chain."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchConfig
from .dataset import DataError, DatasetSpec, RawFlowTable, fuse, ingest_csv, load_spec, split
from .model import ConfigError, ModelConfig, required_mode
from .preprocess import DEFAULT_N_TOP, DEFAULT_WINDOW, PreprocessorState, WindowSet, fit, make_windows, transform
from .training import GridData, GridSpec, TrainConfig

MANIFEST_NAME = "manifest.json"


@dataclass
class DatasetEntry:
    spec_path: Path
    data_path: Path


@dataclass
class RunConfig:
    datasets: list[DatasetEntry]
    fusion_seed: int = 0
    train_fraction: float = 0.8
    split_seed: int = 0
    n_top: int = DEFAULT_N_TOP
    window: int = DEFAULT_WINDOW
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    raw: dict = field(default_factory=dict, repr=False)
    base: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"cannot parse config {path}: {exc}") from None
        if isinstance(raw, dict) and "config" in raw and "files" in raw:
            # a run manifest: replay its embedded config against the original base
            return cls.from_dict(raw["config"], base=Path(raw.get("config_base", path.parent)))
        return cls.from_dict(raw, base=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        known = {"datasets", "fusion_seed", "split", "preprocess", "model", "train", "bench", "grid"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        entries = raw.get("datasets") or []
        if not entries:
            raise ConfigError("config lists no datasets")
        datasets = []
        for e in entries:
            spec_path, data_path = base / e["spec"], base / e["data"]
            for p in (spec_path, data_path):
                if not p.exists():
                    raise DataError(f"referenced path does not exist: {p}")
            datasets.append(DatasetEntry(spec_path, data_path))
        split_cfg = raw.get("split", {})
        prep = raw.get("preprocess", {})
        window = int(prep.get("window", DEFAULT_WINDOW))
        model_d = dict(raw.get("model", {}))
        if model_d.get("window", window) != window:
            raise ConfigError("model.window must equal preprocess.window")
        model_d["window"] = window
        mode = prep.get("mode")
        model = ModelConfig.from_dict(model_d)
        if mode is not None and mode != required_mode(model.input_encoding):
            raise ConfigError(
                f"preprocess.mode={mode!r} is incompatible with input_encoding={model.input_encoding!r}"
            )
        fraction = float(split_cfg.get("train_fraction", 0.8))
        if not 0.0 < fraction < 1.0:
            raise ConfigError(f"split.train_fraction must lie in (0, 1), got {fraction}")
        return cls(
            datasets=datasets,
            fusion_seed=int(raw.get("fusion_seed", 0)),
            train_fraction=fraction,
            split_seed=int(split_cfg.get("seed", 0)),
            n_top=int(prep.get("n_top", DEFAULT_N_TOP)),
            window=window,
            model=model,
            train=TrainConfig(**raw.get("train", {})),
            bench=BenchConfig(**raw.get("bench", {})),
            grid=GridSpec.from_dict(raw["grid"]) if "grid" in raw else GridSpec(),
            raw=raw,
            base=Path(base).resolve(),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        self.model = self.model.replace(seed=seed)
        self.train = self.train.replace(seed=seed)
        self.raw = {**self.raw, "model": {**self.raw.get("model", {}), "seed": seed},
                    "train": {**self.raw.get("train", {}), "seed": seed}}
        return self

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def load_specs(cfg: RunConfig) -> list[DatasetSpec]:
    specs = [load_spec(e.spec_path) for e in cfg.datasets]
    ref = specs[0]
    for s in specs[1:]:
        same = (
            s.categorical_fields == ref.categorical_fields
            and s.numerical_fields == ref.numerical_fields
            and s.label_column == ref.label_column
            and s.benign_label == ref.benign_label
        )
        if not same:
            raise DataError(f"dataset spec {s.name!r} disagrees with {ref.name!r} on fields or labels")
    return specs


def load_tables(cfg: RunConfig) -> tuple[DatasetSpec, RawFlowTable]:
    specs = load_specs(cfg)
    tables = [ingest_csv(e.data_path, s) for e, s in zip(cfg.datasets, specs)]
    table = fuse(tables, cfg.fusion_seed) if len(tables) > 1 else tables[0]
    return specs[0], table


@dataclass
class Prepared:
    spec: DatasetSpec
    state: PreprocessorState
    train_table: RawFlowTable
    eval_table: RawFlowTable
    train: WindowSet
    eval: WindowSet


def split_tables(cfg: RunConfig) -> tuple[DatasetSpec, RawFlowTable, RawFlowTable]:
    spec, table = load_tables(cfg)
    train_t, eval_t = split(table, cfg.train_fraction, cfg.split_seed)
    return spec, train_t, eval_t


def prepare(cfg: RunConfig, state: PreprocessorState | None = None) -> Prepared:
    """Split the data and window both parts; fits on the train part unless
    ``state`` is supplied."""
    spec, train_t, eval_t = split_tables(cfg)
    if state is None:
        state = fit(train_t, spec, cfg.n_top, required_mode(cfg.model.input_encoding))
    return Prepared(
        spec,
        state,
        train_t,
        eval_t,
        make_windows(transform(train_t, state), cfg.window),
        make_windows(transform(eval_t, state), cfg.window),
    )


def grid_data(cfg: RunConfig) -> GridData:
    spec, train_t, eval_t = split_tables(cfg)
    return GridData(train_t, eval_t, spec, cfg.n_top, cfg.window)


# manifests -------------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig | None, extra: dict | None = None) -> Path:
    """Record config, seeds, input digests and a digest of every emitted file."""
    out = Path(out)
    files = {
        str(p.relative_to(out)): file_digest(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }
    doc = {
        "command": command,
        "versions": {"flowguard": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "files": files,
    }
    if cfg is not None:
        doc.update({
            "config": cfg.raw,
            "config_hash": cfg.digest(),
            "config_base": str(cfg.base),
            "seeds": {
                "fusion": cfg.fusion_seed,
                "split": cfg.split_seed,
                "model": cfg.model.seed,
                "train": cfg.train.seed,
            },
            "datasets": [
                {"spec": str(e.spec_path), "data": str(e.data_path), "sha256": file_digest(e.data_path)}
                for e in cfg.datasets
            ],
        })
    if extra:
        doc.update(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def verify_manifest(path: str | Path) -> list[str]:
    """Problems found when re-hashing the files a manifest lists."""
    path = Path(path)
    doc = json.loads(path.read_text())
    problems = []
    for rel, digest in doc.get("files", {}).items():
        p = path.parent / rel
        if not p.exists():
            problems.append(f"missing: {rel}")
        elif file_digest(p) != digest:
            problems.append(f"modified: {rel}")
    return problems
