"""Confusion counts and derived detection metrics (attack = positive class)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "false_alarm_rate", "detection_rate")
CSV_HEADER = ("tp", "tn", "fp", "fn") + METRIC_NAMES


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float
    false_alarm_rate: float
    detection_rate: float

    def to_dict(self) -> dict:
        d = {"counts": asdict(self.counts)}
        d.update({name: getattr(self, name) for name in METRIC_NAMES})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(ConfusionCounts(**d["counts"]), **{name: float(d[name]) for name in METRIC_NAMES})


def confusion(predictions, labels) -> ConfusionCounts:
    p = np.asarray(predictions).astype(np.int64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("cannot tally an empty prediction list")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def derive(counts: ConfusionCounts) -> MetricsReport:
    """Metrics from counts; any 0/0 is reported as 0."""
    if counts.total <= 0:
        raise ValueError("cannot derive metrics from zero evaluated windows")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    recall = _ratio(tp, tp + fn)
    return MetricsReport(
        counts=counts,
        accuracy=_ratio(tp + tn, counts.total),
        precision=_ratio(tp, tp + fp),
        recall=recall,
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        false_alarm_rate=_ratio(fp, fp + tn),
        detection_rate=recall,
    )


def threshold(probabilities, cutoff: float = 0.5) -> np.ndarray:
    """A probability equal to the cutoff counts as an attack."""
    return (np.asarray(probabilities) >= cutoff).astype(np.int64)


def confusion_grid(report: MetricsReport) -> list[list[int]]:
    """[[TN, FP], [FN, TP]]: rows are actual benign/attack, columns predicted."""
    c = report.counts
    return [[c.tn, c.fp], [c.fn, c.tp]]


def render_json(report: MetricsReport) -> str:
    d = report.to_dict()
    d["confusion_matrix"] = {
        "rows": ["actual_benign", "actual_attack"],
        "columns": ["predicted_benign", "predicted_attack"],
        "values": confusion_grid(report),
    }
    d["false_alarm_rate_percent"] = 100.0 * report.false_alarm_rate
    return json.dumps(d, indent=2)


def parse_json(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))


def render_csv(reports, labels=None) -> str:
    """One row per report, stable header; an optional leading ``label`` column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = (("label",) if labels is not None else ()) + CSV_HEADER
    w.writerow(header)
    for i, r in enumerate(reports):
        c = r.counts
        row = [c.tp, c.tn, c.fp, c.fn] + [repr(getattr(r, m)) for m in METRIC_NAMES]
        if labels is not None:
            row.insert(0, labels[i])
        w.writerow(row)
    return buf.getvalue()


def parse_csv(text: str) -> list[MetricsReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        counts = ConfusionCounts(*(int(row[k]) for k in ("tp", "tn", "fp", "fn")))
        out.append(MetricsReport(counts, **{m: float(row[m]) for m in METRIC_NAMES}))
    return out


def render_confusion_csv(report: MetricsReport) -> str:
    g = confusion_grid(report)
    return (
        "actual\\predicted,benign,attack\n"
        f"benign,{g[0][0]},{g[0][1]}\n"
        f"attack,{g[1][0]},{g[1][1]}\n"
    )
