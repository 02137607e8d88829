"""Training and inference throughput in flows per second.

Training: untimed warmup steps, then every measured step (forward, backward,
update) is timed and its flows/sec averaged. Inference: each randomly chosen
batch is timed ``inference_repeats`` times, the median kept, and the mean of
those medians converted to flows/sec.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .preprocess import WindowSet
from .training import train_step

_TIMED = threading.Lock()


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    batch_size: int = 128
    warmup_batches: int = 3
    train_batches: int = 20
    inference_repeats: int = 4
    inference_batches: int = 50
    outlier_factor: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("batch_size", "warmup_batches", "train_batches", "inference_repeats", "inference_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.inference_repeats < 2:
            raise ValueError("inference_repeats must be >= 2")
        if self.outlier_factor <= 0:
            raise ValueError("outlier_factor must be positive")


@dataclass
class BenchReport:
    batch_size: int
    train_flows_per_sec: float
    inference_flows_per_sec: float
    train_batch_seconds: list[float] = field(default_factory=list)
    inference_repeat_seconds: list[list[float]] = field(default_factory=list)
    outlier_batch_indices: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self) -> str:
        lines = ["phase,batch,repeat,seconds"]
        for i, s in enumerate(self.train_batch_seconds):
            lines.append(f"train,{i},0,{s!r}")
        for i, reps in enumerate(self.inference_repeat_seconds):
            for j, s in enumerate(reps):
                lines.append(f"inference,{i},{j},{s!r}")
        return "\n".join(lines) + "\n"


class _exclusive:
    def __enter__(self):
        if not _TIMED.acquire(blocking=False):
            raise BenchError("another timed benchmark section is already running")

    def __exit__(self, *exc):
        _TIMED.release()


def outlier_scan(timings, factor: float = 3.0) -> list[int]:
    """Indices of timings above ``factor`` times the median."""
    t = list(timings)
    if not t:
        raise ValueError("outlier_scan needs at least one timing")
    cut = factor * statistics.median(t)
    return [i for i, v in enumerate(t) if v > cut]


def _batch_indices(n: int, batch: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n < batch:
        raise BenchError(f"need at least {batch} windows for one batch, have {n}")
    return [rng.choice(n, size=batch, replace=False) for _ in range(count)]


def time_train_steps(
    step: Callable[[np.ndarray], None],
    batches: list[np.ndarray],
    warmup: int,
    clock: Callable[[], int] = time.perf_counter_ns,
) -> list[float]:
    """Run ``warmup`` untimed steps, then time each remaining batch (seconds)."""
    if len(batches) <= warmup:
        raise BenchError("not enough batches after warmup")
    with _exclusive():
        for idx in batches[:warmup]:
            step(idx)
        seconds = []
        for idx in batches[warmup:]:
            t0 = clock()
            step(idx)
            seconds.append((clock() - t0) / 1e9)
    return seconds


def time_inference(
    infer: Callable[[np.ndarray], None],
    batches: list[np.ndarray],
    repeats: int,
    clock: Callable[[], int] = time.perf_counter_ns,
) -> list[list[float]]:
    with _exclusive():
        out = []
        for idx in batches:
            reps = []
            for _ in range(repeats):
                t0 = clock()
                infer(idx)
                reps.append((clock() - t0) / 1e9)
            out.append(reps)
    return out


def train_throughput(batch_size: int, seconds: list[float]) -> float:
    """Mean over batches of batch_size / seconds."""
    return float(np.mean([batch_size / s for s in seconds]))


def inference_throughput(batch_size: int, repeat_seconds: list[list[float]]) -> float:
    """batch_size / mean over batches of the per-batch median time."""
    medians = [statistics.median(r) for r in repeat_seconds]
    return batch_size / float(np.mean(medians))


def _train_fn(model, data: WindowSet, learning_rate: float):
    state = ag.AdamState(learning_rate=learning_rate)
    labels = data.labels.astype(model.dtype) if data.labels is not None else np.zeros(len(data))

    def step(idx):
        train_step(model, data.features[idx], labels[idx], data.pad_counts[idx], state)

    return step


def _infer_fn(model, data: WindowSet):
    def infer(idx):
        model.predict_proba(data.features[idx], data.pad_counts[idx])

    return infer


def measure_train_throughput(
    model,
    data: WindowSet,
    cfg: BenchConfig,
    clock: Callable[[], int] = time.perf_counter_ns,
    step: Callable[[np.ndarray], None] | None = None,
    learning_rate: float = 1e-3,
) -> tuple[float, list[float]]:
    """Returns (flows/sec, per-batch seconds). Updates the model's weights."""
    rng = np.random.default_rng(cfg.seed)
    batches = _batch_indices(len(data), cfg.batch_size, cfg.warmup_batches + cfg.train_batches, rng)
    step = step or _train_fn(model, data, learning_rate)
    seconds = time_train_steps(step, batches, cfg.warmup_batches, clock)
    return train_throughput(cfg.batch_size, seconds), seconds


def measure_inference_throughput(
    model,
    data: WindowSet,
    cfg: BenchConfig,
    clock: Callable[[], int] = time.perf_counter_ns,
    infer: Callable[[np.ndarray], None] | None = None,
) -> tuple[float, list[list[float]]]:
    """Returns (flows/sec, per-batch repeat timings in seconds)."""
    rng = np.random.default_rng(cfg.seed + 1)
    batches = _batch_indices(len(data), cfg.batch_size, cfg.inference_batches, rng)
    infer = infer or _infer_fn(model, data)
    for idx in batches[: cfg.warmup_batches]:
        infer(idx)
    reps = time_inference(infer, batches, cfg.inference_repeats, clock)
    return inference_throughput(cfg.batch_size, reps), reps


def run_bench(
    model,
    data: WindowSet,
    cfg: BenchConfig,
    clock: Callable[[], int] = time.perf_counter_ns,
    learning_rate: float = 1e-3,
) -> BenchReport:
    """Inference is measured first so the weights it sees are the given ones."""
    infer_fps, reps = measure_inference_throughput(model, data, cfg, clock)
    train_fps, seconds = measure_train_throughput(model, data, cfg, clock, learning_rate=learning_rate)
    return BenchReport(
        batch_size=cfg.batch_size,
        train_flows_per_sec=train_fps,
        inference_flows_per_sec=infer_fps,
        train_batch_seconds=seconds,
        inference_repeat_seconds=reps,
        outlier_batch_indices=outlier_scan(seconds, cfg.outlier_factor),
    )
