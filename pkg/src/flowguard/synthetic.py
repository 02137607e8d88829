"""Synthetic NetFlow-shaped streams with a known labelling rule.

A flow is an attack iff ``IN_PKTS >= 200`` and it is either non-TCP or a
bare SYN (``TCP_FLAGS == "2"``). Sampled packet counts keep a wide margin
around the threshold, so the rule is exactly recoverable from one flow.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .dataset import DatasetSpec, ingest_frame
from .preprocess import WindowSet, fit, make_windows, transform

SPEC = DatasetSpec(
    name="synthetic",
    categorical_fields=("PROTOCOL", "L4_DST_PORT", "TCP_FLAGS", "L7_PROTO"),
    numerical_fields=("IN_BYTES", "OUT_BYTES", "IN_PKTS", "OUT_PKTS", "FLOW_DURATION_MILLISECONDS"),
    label_column="Label",
    benign_label="normal",
    class_column="Attack",
    dropped_columns=("IPV4_SRC_ADDR", "IPV4_DST_ADDR"),
)

_PORTS = ("80", "443", "53", "22", "1883", "5683", "8080", "123")


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def _labels(n: int, rng: np.random.Generator, pattern: str, window: int, attack_rate: float) -> np.ndarray:
    if pattern == "iid":
        return (rng.random(n) < attack_rate).astype(np.int64)
    if pattern == "adversarial":
        # every segment: window-1 flows of one class, then one of the other
        out = []
        while len(out) < n:
            c = int(rng.random() < 0.5)
            out.extend([c] * (window - 1) + [1 - c])
        return np.asarray(out[:n], dtype=np.int64)
    raise ValueError(f"unknown label pattern {pattern!r}")


def synthetic_flows(
    n: int,
    seed: int = 0,
    pattern: str = "iid",
    window: int = 8,
    attack_rate: float = 0.4,
) -> pd.DataFrame:
    """All-string frame of ``n`` flows in stream order.

    ``pattern="adversarial"`` arranges labels so that the flows preceding a
    label flip look like the opposite class.
    """
    rng = np.random.default_rng(seed)
    y = _labels(n, rng, pattern, window, attack_rate)
    rows = []
    for label in y:
        if label:
            proto = rng.choice(["17", "1", "6"], p=[0.5, 0.2, 0.3])
            flags = "2" if proto == "6" else "0"
            pkts = _log_uniform(rng, 300, 5000)
            out_pkts = rng.integers(0, 3)
        elif rng.random() < 0.5:
            proto = rng.choice(["17", "1", "6"], p=[0.3, 0.1, 0.6])
            flags = rng.choice(["2", "16", "18", "24"]) if proto == "6" else "0"
            pkts = _log_uniform(rng, 1, 60)
            out_pkts = rng.integers(0, 60)
        else:
            proto = "6"
            flags = rng.choice(["16", "18", "24"])
            pkts = _log_uniform(rng, 300, 5000)
            out_pkts = rng.integers(50, 3000)
        in_pkts = int(round(pkts))
        rows.append({
            "IPV4_SRC_ADDR": f"10.0.{rng.integers(0, 4)}.{rng.integers(1, 255)}",
            "IPV4_DST_ADDR": f"192.168.1.{rng.integers(1, 20)}",
            "L4_DST_PORT": str(rng.choice(_PORTS)),
            "PROTOCOL": str(proto),
            "L7_PROTO": str(rng.choice(["7.0", "5.0", "0.0", "91.0"])),
            "IN_BYTES": str(int(in_pkts * rng.uniform(40, 1500))),
            "OUT_BYTES": str(int(out_pkts * rng.uniform(40, 1500))),
            "IN_PKTS": str(in_pkts),
            "OUT_PKTS": str(int(out_pkts)),
            "TCP_FLAGS": str(flags),
            "FLOW_DURATION_MILLISECONDS": str(int(rng.integers(0, 4_000_000))),
            "Label": "attack" if label else "normal",
            "Attack": "DDoS" if label else "Benign",
        })
    return pd.DataFrame(rows)


def rule(df: pd.DataFrame) -> np.ndarray:
    """The labelling rule evaluated directly on raw cells."""
    pkts = df["IN_PKTS"].astype(float).to_numpy()
    non_tcp = df["PROTOCOL"].to_numpy() != "6"
    syn = df["TCP_FLAGS"].to_numpy() == "2"
    return ((pkts >= 200) & (non_tcp | syn)).astype(np.int64)


def stream_windows(
    df: pd.DataFrame,
    window: int,
    mode: str = "one_hot",
    n_top: int = 32,
    train_fraction: float = 0.8,
) -> tuple[WindowSet, WindowSet, object]:
    """Cut the stream in time order, fit on the head, window both parts."""
    table = ingest_frame(df, SPEC, source="synthetic")
    cut = int(np.floor(train_fraction * len(table)))
    train_t, eval_t = table.take(np.arange(cut)), table.take(np.arange(cut, len(table)))
    state = fit(train_t, SPEC, n_top, mode)
    return (
        make_windows(transform(train_t, state), window),
        make_windows(transform(eval_t, state), window),
        state,
    )
