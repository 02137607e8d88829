"""Single-layer LSTM baseline over the same flow windows."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class LSTMConfig:
    hidden: int = 32
    window: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LSTMConfig":
        return cls(**d)


class LSTMBaseline:
    """Gates ordered input, forget, cell, output; the final hidden state feeds
    a dense layer and a sigmoid."""

    arch = "lstm"

    def __init__(self, config: LSTMConfig, feature_width: int, params=None, dtype=np.float64) -> None:
        if config.hidden < 1 or config.window < 1:
            raise ValueError("hidden and window must be >= 1")
        self.config = config
        self.feature_width = int(feature_width)
        self.categorical_layout: tuple[int, ...] = ()
        self.dtype = np.dtype(dtype)
        self.preprocessor_hash: str | None = None
        self.params = params if params is not None else self._init_params()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h, f = self.config.hidden, self.feature_width
        return {
            "lstm.w": (f, 4 * h),
            "lstm.u": (h, 4 * h),
            "lstm.b": (4 * h,),
            "out.w": (h, 1),
            "out.b": (1,),
        }

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 2:
                data = ag.glorot_uniform(rng, shape, shape[0], shape[1], self.dtype)
            else:
                data = np.zeros(shape, dtype=self.dtype)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def cell(self, x_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        n = self.config.hidden
        z = x_t @ p["lstm.w"] + h @ p["lstm.u"] + p["lstm.b"]
        i = ag.sigmoid(z[:, 0:n])
        f = ag.sigmoid(z[:, n : 2 * n])
        g = ag.tanh(z[:, 2 * n : 3 * n])
        o = ag.sigmoid(z[:, 3 * n :])
        c = f * c + i * g
        h = o * ag.tanh(c)
        return h, c

    def logits(self, x: np.ndarray, pad_counts=None, trace=None) -> Tensor:
        if x.shape[-1] != self.feature_width:
            raise ValueError(f"window feature width {x.shape[-1]} != fitted width {self.feature_width}")
        b, t = x.shape[0], x.shape[1]
        zeros = np.zeros((b, self.config.hidden), dtype=self.dtype)
        h, c = Tensor(zeros), Tensor(zeros)
        xs = x.astype(self.dtype, copy=False)
        for step in range(t):
            h, c = self.cell(Tensor(xs[:, step, :]), h, c)
        out = h @ self.params["out.w"] + self.params["out.b"]
        return ag.reshape(out, (b,))

    def predict_proba(self, x: np.ndarray, pad_counts=None) -> np.ndarray:
        return ag.sigmoid(self.logits(x, pad_counts)).data.astype(np.float64)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def lstm_forward(window, model: LSTMBaseline) -> float:
    x = np.asarray(window.features)[None]
    return float(model.predict_proba(x)[0])
