from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowguard.metrics import (
    ConfusionCounts,
    confusion,
    confusion_grid,
    derive,
    parse_csv,
    parse_json,
    render_confusion_csv,
    render_csv,
    render_json,
    threshold,
)

counts_st = st.builds(ConfusionCounts, *(st.integers(0, 10_000) for _ in range(4))).filter(lambda c: c.total > 0)


def test_perfect_pair():
    assert confusion([1, 0], [1, 0]) == ConfusionCounts(tp=1, tn=1, fp=0, fn=0)


def test_single_false_alarm():
    assert confusion([1], [0]).fp == 1


def test_brute_force_tally():
    rng = np.random.default_rng(0)
    p, y = rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)
    tally = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for a, b in zip(p.tolist(), y.tolist()):
        key = ("t" if a == b else "f") + ("p" if a == 1 else "n")
        tally[key] += 1
    assert confusion(p, y) == ConfusionCounts(**tally)


def test_confusion_errors():
    with pytest.raises(ValueError, match="length"):
        confusion([1, 0], [1])
    with pytest.raises(ValueError, match="empty"):
        confusion([], [])


def test_perfect_metrics():
    r = derive(ConfusionCounts(1, 1, 0, 0))
    assert (r.f1, r.accuracy, r.false_alarm_rate) == (1.0, 1.0, 0.0)


def test_no_true_positives():
    assert derive(ConfusionCounts(0, 5, 2, 3)).f1 == 0.0


def test_worked_example():
    r = derive(ConfusionCounts(tp=90, tn=890, fp=10, fn=10))
    assert r.f1 == pytest.approx(0.9, abs=1e-15)
    assert r.false_alarm_rate == 10 / 900
    assert r.detection_rate == r.recall == 0.9


def test_zero_over_zero_is_zero():
    r = derive(ConfusionCounts(0, 4, 0, 0))
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        derive(ConfusionCounts(0, 0, 0, 0))


@given(counts_st)
def test_metric_formulas_exact(c):
    r = derive(c)

    def frac(n, d):
        return float(Fraction(n, d)) if d else 0.0

    assert r.f1 == frac(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    assert r.accuracy == frac(c.tp + c.tn, c.total)
    assert r.false_alarm_rate == frac(c.fp, c.fp + c.tn)
    for m in (r.accuracy, r.precision, r.recall, r.f1, r.false_alarm_rate):
        assert 0.0 <= m <= 1.0
    if r.precision > 0 and r.recall > 0:
        harmonic = 2 * r.precision * r.recall / (r.precision + r.recall)
        assert r.f1 == pytest.approx(harmonic, rel=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_swap_exchanges_fp_and_fn(pairs):
    p, y = zip(*pairs)
    a, b = confusion(p, y), confusion(y, p)
    assert (a.tp, a.tn, a.fp, a.fn) == (b.tp, b.tn, b.fn, b.fp)
    assert derive(a).f1 == derive(b).f1


def test_threshold_tie_is_attack():
    assert threshold([0.5, 0.49999, 0.7], 0.5).tolist() == [1, 0, 1]


def test_confusion_grid_layout():
    assert confusion_grid(derive(ConfusionCounts(1, 1, 0, 0))) == [[1, 0], [0, 1]]
    assert confusion_grid(derive(ConfusionCounts(tp=4, tn=3, fp=2, fn=1))) == [[3, 2], [1, 4]]


def test_json_round_trip():
    r = derive(ConfusionCounts(7, 11, 3, 2))
    assert parse_json(render_json(r)) == r


def test_csv_round_trip_and_header():
    reports = [derive(ConfusionCounts(7, 11, 3, 2)), derive(ConfusionCounts(1, 0, 0, 0))]
    text = render_csv(reports)
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0] == "tp,tn,fp,fn,accuracy,precision,recall,f1,false_alarm_rate,detection_rate"
    assert parse_csv(text) == reports
    labelled = render_csv(reports, labels=["a", "b"])
    assert labelled.splitlines()[0].startswith("label,")


def test_confusion_csv():
    text = render_confusion_csv(derive(ConfusionCounts(tp=4, tn=3, fp=2, fn=1)))
    assert text.splitlines() == ["actual\\predicted,benign,attack", "benign,3,2", "attack,1,4"]
