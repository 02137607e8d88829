import itertools

import numpy as np
import pandas as pd
import pytest

from flowguard.autograd import Tensor
from flowguard.dataset import DatasetSpec


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return out


def max_rel_err(a, n, floor=1e-6):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


class FakeClock:
    """Monotonic nanosecond clock advanced only by ``advance`` or per call."""

    def __init__(self, tick_ns: int = 0):
        self.now = 0
        self.tick = tick_ns

    def __call__(self) -> int:
        self.now += self.tick
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += int(round(seconds * 1e9))


@pytest.fixture
def flow_spec():
    return DatasetSpec(
        name="nf-test",
        categorical_fields=("PROTOCOL", "L4_DST_PORT"),
        numerical_fields=("IN_BYTES", "OUT_BYTES"),
        label_column="Label",
        benign_label="normal",
        class_column="Attack",
        dropped_columns=("IPV4_SRC_ADDR",),
    )


@pytest.fixture
def write_csv(tmp_path):
    counter = itertools.count()

    def _write(rows, name=None):
        path = tmp_path / (name or f"flows{next(counter)}.csv")
        pd.DataFrame(rows).to_csv(path, index=False)
        return path

    return _write


# tiny models shared by the model tests and the acceptance suite

TINY_LAYOUT = (3, 2)
TINY_NUMERIC = 2


def tiny_config(encoding="record_projection", head="last_token", block="encoder", **kw):
    from flowguard.model import ModelConfig

    base = dict(
        block_type=block, layers=1, heads=2, d_model=8, d_ff=8, input_encoding=encoding,
        head=head, window=4, embed_dim=2, mlp_hidden=4, seed=0,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_width(encoding):
    if encoding == "categorical_embed_lookup":
        return len(TINY_LAYOUT) + TINY_NUMERIC
    return sum(TINY_LAYOUT) + TINY_NUMERIC


def tiny_batch(encoding, rng, batch=4, window=4):
    """Windows shaped like encoded flows: one-hot or index columns, then numericals."""
    cats = [rng.integers(0, c, size=(batch, window)) for c in TINY_LAYOUT]
    nums = rng.random((batch, window, TINY_NUMERIC))
    if encoding == "categorical_embed_lookup":
        x = np.concatenate([np.stack(cats, axis=-1).astype(float), nums], axis=-1)
    else:
        onehots = [np.eye(c)[idx] for c, idx in zip(TINY_LAYOUT, cats)]
        x = np.concatenate(onehots + [nums], axis=-1)
    y = rng.integers(0, 2, size=batch)
    return x, y


def tiny_model(encoding="record_projection", head="last_token", block="encoder", **kw):
    from flowguard.model import build

    return build(tiny_config(encoding, head, block, **kw), tiny_width(encoding), TINY_LAYOUT)


def model_loss_fn(model, x, y, pads=None):
    from flowguard import autograd as ag

    return lambda: ag.bce_loss(ag.sigmoid(model.logits(x, pads)), y)


# acceptance verdict lines, echoed after the test session

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
