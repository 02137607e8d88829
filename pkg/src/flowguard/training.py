"""Adam/BCE training loop with early stopping, evaluation and grid search."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .dataset import DatasetSpec, RawFlowTable
from .metrics import MetricsReport, confusion, derive, threshold
from .model import ConfigError, ModelConfig, build, required_mode
from .preprocess import PreprocessorState, WindowSet, fit, make_windows, transform

log = logging.getLogger(__name__)

Clock = Callable[[], int]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 20
    steps_per_epoch: int = 64
    patience: int = 5
    repeats: int = 3
    seed: int = 0
    monitor: str = "eval_loss"
    threshold: float = 0.5
    eval_batch_size: int = 1024

    def __post_init__(self) -> None:
        for name in ("batch_size", "max_epochs", "steps_per_epoch", "patience", "repeats", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience may not exceed max_epochs")
        if self.monitor != "eval_loss":
            raise ConfigError(f"unsupported monitor {self.monitor!r}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int  # 1-based
    train_loss: float
    eval_loss: float
    metrics: MetricsReport
    wall_time: float
    steps: int
    step_seconds: float
    improved: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs.

    Only a strict decrease counts as an improvement.
    """

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = float("inf")
        self.best_epoch: int | None = None
        self.wait = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool]:
        """Record one epoch; returns (improved, should_stop)."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    while True:
        out = []
        while len(out) < size:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(size - len(out), n - pos)
            out.extend(order[pos : pos + take])
            pos += take
        yield np.asarray(out)


def predict_proba(model, windows: WindowSet, batch_size: int = 1024) -> np.ndarray:
    out = []
    for start in range(0, len(windows), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.predict_proba(windows.features[sl], windows.pad_counts[sl]))
    return np.concatenate(out) if out else np.zeros(0)


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, ag.PROB_EPS, 1.0 - ag.PROB_EPS)
    return float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))


def evaluate(model, windows: WindowSet, cutoff: float = 0.5, batch_size: int = 1024) -> MetricsReport:
    """Threshold the model's probabilities and tally against window labels."""
    if len(windows) == 0:
        raise ValueError("cannot evaluate on zero windows")
    if windows.labels is None:
        raise ValueError("evaluation windows carry no labels")
    p = predict_proba(model, windows, batch_size)
    return derive(confusion(threshold(p, cutoff), windows.labels))


def evaluate_with_loss(model, windows: WindowSet, cutoff: float, batch_size: int) -> tuple[float, MetricsReport]:
    p = predict_proba(model, windows, batch_size)
    report = derive(confusion(threshold(p, cutoff), windows.labels))
    return _bce(p, windows.labels), report


def snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params.items()}


def restore(model, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.params.items():
        p.data = snap[name].copy()


def train_step(model, x: np.ndarray, y: np.ndarray, pads: np.ndarray, state: ag.AdamState) -> float:
    """One forward/backward/Adam update on a batch; returns the batch loss."""
    params = model.params
    ag.zero_grads(params.values())
    loss = ag.bce_loss(ag.sigmoid(model.logits(x, pads)), y)
    loss.backward()
    ag.adam_step(params, ag.collect_grads(params), state)
    return float(loss.data)


def train(
    model,
    train_windows: WindowSet,
    eval_windows: WindowSet,
    cfg: TrainConfig,
    clock: Clock = time.perf_counter_ns,
    on_epoch: Callable[[EpochLog], None] | None = None,
):
    """Train in place and return ``(model, epoch_logs)``.

    Each epoch draws ``steps_per_epoch`` batches from a seeded reshuffling
    stream. After training the parameters of the best-monitor epoch are
    restored.
    """
    if len(train_windows) == 0 or len(eval_windows) == 0:
        raise TrainingError("training and evaluation splits must be nonempty")
    if train_windows.labels is None or eval_windows.labels is None:
        raise TrainingError("training needs labelled windows")
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(train_windows), cfg.batch_size, rng)
    state = ag.AdamState(learning_rate=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    best = snapshot(model)
    logs: list[EpochLog] = []
    labels = train_windows.labels.astype(model.dtype)
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        losses = []
        step_ns = 0
        for _ in range(cfg.steps_per_epoch):
            idx = next(batches)
            t0 = clock()
            loss = train_step(model, train_windows.features[idx], labels[idx], train_windows.pad_counts[idx], state)
            step_ns += clock() - t0
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            losses.append(loss)
        eval_loss, report = evaluate_with_loss(model, eval_windows, cfg.threshold, cfg.eval_batch_size)
        improved, stop = stopper.update(eval_loss, epoch)
        if improved:
            best = snapshot(model)
        entry = EpochLog(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            eval_loss=eval_loss,
            metrics=report,
            wall_time=time.perf_counter() - started,
            steps=cfg.steps_per_epoch,
            step_seconds=step_ns / 1e9,
            improved=improved,
        )
        logs.append(entry)
        log.debug("epoch %d train=%.5f eval=%.5f f1=%.4f", epoch, entry.train_loss, eval_loss, report.f1)
        if on_epoch is not None:
            on_epoch(entry)
        if stop:
            break
    restore(model, best)
    model.optimizer_steps = state.t
    return model, logs


# grid search -----------------------------------------------------------------

GRID_DIMENSIONS = ("input_encoding", "block_type", "layers", "d_ff", "heads", "head", "learning_rate")


@dataclass(frozen=True)
class GridSpec:
    input_encodings: tuple[str, ...] = ("record_embed_dense",)
    block_types: tuple[str, ...] = ("encoder",)
    layers: tuple[int, ...] = (2,)
    d_ff: tuple[int, ...] = (128,)
    heads: tuple[int, ...] = (2,)
    head_kinds: tuple[str, ...] = ("last_token",)
    learning_rates: tuple[float, ...] = (1e-3,)

    def __post_init__(self) -> None:
        for f_name in ("input_encodings", "block_types", "layers", "d_ff", "heads", "head_kinds", "learning_rates"):
            value = tuple(getattr(self, f_name))
            if not value:
                raise ConfigError(f"grid dimension {f_name} is empty")
            object.__setattr__(self, f_name, value)

    def cells(self) -> list[dict]:
        combos = itertools.product(
            self.input_encodings, self.block_types, self.layers, self.d_ff,
            self.heads, self.head_kinds, self.learning_rates,
        )
        return [dict(zip(GRID_DIMENSIONS, c)) for c in combos]

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class PreparedSplit:
    state: PreprocessorState
    train: WindowSet
    eval: WindowSet


class GridData:
    """Train/eval tables plus lazily fitted windows for each encoding mode."""

    def __init__(self, train: RawFlowTable, eval: RawFlowTable, spec: DatasetSpec, n_top: int, window: int) -> None:
        self.train_table = train
        self.eval_table = eval
        self.spec = spec
        self.n_top = n_top
        self.window = window
        self._cache: dict[str, PreparedSplit] = {}

    def prepared(self, mode: str) -> PreparedSplit:
        if mode not in self._cache:
            state = fit(self.train_table, self.spec, self.n_top, mode)
            self._cache[mode] = PreparedSplit(
                state,
                make_windows(transform(self.train_table, state), self.window),
                make_windows(transform(self.eval_table, state), self.window),
            )
        return self._cache[mode]


RESULT_COLUMNS = GRID_DIMENSIONS + (
    "best_repeat",
    "f1",
    "accuracy",
    "false_alarm_rate",
    "eval_loss",
    "param_count",
    "train_flows_per_sec",
    "inference_flows_per_sec",
)


@dataclass
class GridResult:
    rows: list[dict] = field(default_factory=list)
    skipped: list[tuple[dict, str]] = field(default_factory=list)
    runs: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in self.rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in RESULT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.rows, "skipped": [{"cell": c, "reason": r} for c, r in self.skipped]},
            indent=2,
        )


def derive_seed(master_seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([master_seed, *path]).generate_state(1)[0])


def _run_repeat(data: GridData, config: ModelConfig, cfg: TrainConfig, clock: Clock) -> dict:
    prepared = data.prepared(required_mode(config.input_encoding))
    model = build(config, prepared.state.feature_width, prepared.state.categorical_layout)
    model, logs = train(model, prepared.train, prepared.eval, cfg, clock=clock)
    t0 = clock()
    eval_loss, report = evaluate_with_loss(model, prepared.eval, cfg.threshold, cfg.eval_batch_size)
    infer_s = (clock() - t0) / 1e9
    step_s = sum(e.step_seconds for e in logs)
    flows = sum(e.steps for e in logs) * cfg.batch_size
    return {
        "report": report,
        "eval_loss": eval_loss,
        "param_count": model.param_count(),
        "train_flows_per_sec": flows / step_s if step_s > 0 else float("inf"),
        "inference_flows_per_sec": len(prepared.eval) / infer_s if infer_s > 0 else float("inf"),
    }


def grid_search(
    grid: GridSpec,
    data: GridData,
    base_model: ModelConfig,
    base_train: TrainConfig,
    master_seed: int = 0,
    clock: Clock = time.perf_counter_ns,
    threads: int = 1,
) -> GridResult:
    """Train every valid cell ``repeats`` times and keep the best repeat.

    Best means highest eval F1, then lower eval loss, then lower repeat
    index. Invalid cells are skipped and listed with their reason.
    """
    result = GridResult()
    jobs = []
    valid: list[tuple[int, dict, ModelConfig]] = []
    for ci, cell in enumerate(grid.cells()):
        try:
            config = base_model.replace(
                input_encoding=cell["input_encoding"], block_type=cell["block_type"],
                layers=cell["layers"], d_ff=cell["d_ff"], heads=cell["heads"], head=cell["head"],
            )
            prepared = data.prepared(required_mode(config.input_encoding))
            build(config.replace(layers=1, d_ff=1), prepared.state.feature_width,
                  prepared.state.categorical_layout)
        except ConfigError as exc:
            log.info("skipping grid cell %s: %s", cell, exc)
            result.skipped.append((cell, str(exc)))
            continue
        valid.append((ci, cell, config))
    if not valid:
        raise ConfigError("every grid cell is invalid")

    for ci, cell, config in valid:
        for rep in range(base_train.repeats):
            seed = derive_seed(master_seed, ci, rep)
            jobs.append((ci, rep, config.replace(seed=seed), base_train.replace(learning_rate=cell["learning_rate"], seed=seed + 1)))

    def run(job):
        _, _, config, cfg = job
        return _run_repeat(data, config, cfg, clock)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]
    result.runs = len(jobs)

    by_cell: dict[int, list[tuple[int, dict]]] = {}
    for (ci, rep, _, _), out in zip(jobs, outcomes):
        by_cell.setdefault(ci, []).append((rep, out))
    for ci, cell, _ in valid:
        rep, best = min(by_cell[ci], key=lambda ro: (-ro[1]["report"].f1, ro[1]["eval_loss"], ro[0]))
        r: MetricsReport = best["report"]
        result.rows.append({
            **cell,
            "best_repeat": rep,
            "f1": r.f1,
            "accuracy": r.accuracy,
            "false_alarm_rate": r.false_alarm_rate,
            "eval_loss": best["eval_loss"],
            "param_count": best["param_count"],
            "train_flows_per_sec": best["train_flows_per_sec"],
            "inference_flows_per_sec": best["inference_flows_per_sec"],
        })
    return result
