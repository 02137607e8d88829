"""Configurable flow transformer: input encoders, post-norm blocks, heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INPUT_ENCODINGS = ("none", "record_projection", "record_embed_dense", "categorical_embed_lookup")
HEAD_KINDS = (
    "last_token",
    "flatten",
    "global_avg_pool",
    "featurewise_embedding",
    "featurewise_projection",
    "cls_token",
)
BLOCK_TYPES = ("encoder", "decoder")


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    block_type: str = "encoder"
    layers: int = 2
    heads: int = 2
    d_model: int = 128
    d_ff: int = 128
    input_encoding: str = "record_embed_dense"
    head: str = "last_token"
    window: int = 8
    embed_dim: int = 8
    mlp_hidden: int = 64
    seed: int = 0
    mask_padding: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"unknown block_type {self.block_type!r}; expected one of {BLOCK_TYPES}")
        if self.input_encoding not in INPUT_ENCODINGS:
            raise ConfigError(f"unknown input_encoding {self.input_encoding!r}; expected one of {INPUT_ENCODINGS}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")
        for name in ("layers", "heads", "d_model", "d_ff", "window", "embed_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def seq_len(self) -> int:
        """Sequence length seen by the blocks; the CLS head appends one slot."""
        return self.window + (1 if self.head == "cls_token" else 0)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def required_mode(input_encoding: str) -> str:
    """Categorical encoding the preprocessor must use for an input encoding."""
    return "integer" if input_encoding == "categorical_embed_lookup" else "one_hot"


def _layer_param_count(d: int, ff: int) -> int:
    attention = 4 * d * d
    ffn = d * ff + ff + ff * d + d
    norms = 4 * d
    return attention + ffn + norms


def expected_param_count(config: ModelConfig, feature_width: int, categorical_layout=()) -> int:
    """Closed-form trainable-parameter total for a configuration."""
    d, s = config.d_model, config.seq_len
    layout = tuple(categorical_layout)
    enc = {
        "none": 0,
        "record_projection": feature_width * d + d,
        "record_embed_dense": feature_width * d + d + d * d + d,
        "categorical_embed_lookup": sum(layout) * config.embed_dim
        + (len(layout) * config.embed_dim + feature_width - len(layout)) * d
        + d,
    }[config.input_encoding]
    cls = d if config.head == "cls_token" else 0
    pos = s * d
    blocks = config.layers * _layer_param_count(d, config.d_ff)
    head_extra = {"featurewise_projection": s, "featurewise_embedding": s * d}.get(config.head, 0)
    v_dim = s * d if config.head == "flatten" else d
    mlp = v_dim * config.mlp_hidden + config.mlp_hidden + config.mlp_hidden + 1
    return enc + cls + pos + blocks + head_extra + mlp


def _param_shapes(config: ModelConfig, feature_width: int, layout: tuple[int, ...]) -> dict[str, tuple]:
    """Ordered name -> (shape, init, fan_in, fan_out)."""
    d, s, ff = config.d_model, config.seq_len, config.d_ff
    shapes: dict[str, tuple] = {}

    def weight(name, rows, cols):
        shapes[name] = ((rows, cols), "glorot", rows, cols)

    def bias(name, n):
        shapes[name] = ((n,), "zeros", 0, 0)

    enc = config.input_encoding
    if enc == "record_projection":
        weight("enc.w", feature_width, d)
        bias("enc.b", d)
    elif enc == "record_embed_dense":
        weight("enc.w1", feature_width, d)
        bias("enc.b1", d)
        weight("enc.w2", d, d)
        bias("enc.b2", d)
    elif enc == "categorical_embed_lookup":
        for i, card in enumerate(layout):
            weight(f"enc.emb{i}", card, config.embed_dim)
        weight("enc.w", len(layout) * config.embed_dim + feature_width - len(layout), d)
        bias("enc.b", d)
    if config.head == "cls_token":
        shapes["cls"] = ((d,), "normal", 0, 0)
    shapes["pos"] = ((s, d), "normal", 0, 0)
    for l in range(config.layers):
        p = f"layer{l}."
        for w in ("wq", "wk", "wv", "wo"):
            weight(p + w, d, d)
        weight(p + "ff_w1", d, ff)
        bias(p + "ff_b1", ff)
        weight(p + "ff_w2", ff, d)
        bias(p + "ff_b2", d)
        shapes[p + "ln1_g"] = ((d,), "ones", 0, 0)
        bias(p + "ln1_b", d)
        shapes[p + "ln2_g"] = ((d,), "ones", 0, 0)
        bias(p + "ln2_b", d)
    if config.head == "featurewise_projection":
        shapes["head.time_w"] = ((s,), "glorot", s, 1)
    elif config.head == "featurewise_embedding":
        shapes["head.time_w"] = ((s, d), "glorot", s, 1)
    v_dim = s * d if config.head == "flatten" else d
    weight("head.w1", v_dim, config.mlp_hidden)
    bias("head.b1", config.mlp_hidden)
    weight("out.w", config.mlp_hidden, 1)
    bias("out.b", 1)
    return shapes


class Model:
    """Parameters plus the forward pass for one :class:`ModelConfig`."""

    arch = "transformer"

    def __init__(
        self,
        config: ModelConfig,
        feature_width: int,
        categorical_layout=(),
        params: dict[str, Tensor] | None = None,
        dtype=np.float64,
    ) -> None:
        self.config = config
        self.feature_width = int(feature_width)
        self.categorical_layout = tuple(int(c) for c in categorical_layout)
        self.dtype = np.dtype(dtype)
        self.preprocessor_hash: str | None = None
        self._shapes = _param_shapes(config, self.feature_width, self.categorical_layout)
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, (shape, init, fan_in, fan_out) in self._shapes.items():
            if init == "glorot":
                data = ag.glorot_uniform(rng, shape, fan_in, fan_out, self.dtype)
            elif init == "normal":
                data = rng.normal(0.0, 0.02, size=shape).astype(self.dtype)
            elif init == "ones":
                data = np.ones(shape, dtype=self.dtype)
            else:
                data = np.zeros(shape, dtype=self.dtype)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: spec[0] for name, spec in self._shapes.items()}

    # forward pieces -------------------------------------------------------

    def encode_input(self, x: np.ndarray) -> Tensor:
        """(B, T, F) encoded flows -> (B, S, d_model) including positions."""
        cfg, p = self.config, self.params
        if x.shape[-1] != self.feature_width:
            raise ValueError(f"window feature width {x.shape[-1]} != fitted width {self.feature_width}")
        if x.shape[-2] != cfg.window:
            raise ValueError(f"window length {x.shape[-2]} != configured window {cfg.window}")
        xt = Tensor(x.astype(self.dtype, copy=False))
        enc = cfg.input_encoding
        if enc == "none":
            h = ag.pad_last(xt, cfg.d_model)
        elif enc == "record_projection":
            h = xt @ p["enc.w"] + p["enc.b"]
        elif enc == "record_embed_dense":
            h = ag.relu(xt @ p["enc.w1"] + p["enc.b1"]) @ p["enc.w2"] + p["enc.b2"]
        else:
            n_cat = len(self.categorical_layout)
            parts = [
                ag.embedding_lookup(p[f"enc.emb{i}"], np.rint(x[..., i]).astype(np.int64))
                for i in range(n_cat)
            ]
            if self.feature_width > n_cat:
                parts.append(Tensor(x[..., n_cat:].astype(self.dtype, copy=False)))
            h = ag.concat(parts, axis=-1) @ p["enc.w"] + p["enc.b"]
        if cfg.head == "cls_token":
            slot = ag.add(np.zeros(h.shape[:-2] + (1, cfg.d_model), dtype=self.dtype), p["cls"])
            h = ag.concat([h, slot], axis=-2)
        return h + p["pos"]

    def attention_mask(self, batch: int, pad_counts: np.ndarray | None) -> np.ndarray | None:
        """Boolean (B|1, 1, S, S) mask, True where a score is excluded."""
        s = self.config.seq_len
        mask = None
        if self.config.block_type == "decoder":
            mask = np.triu(np.ones((s, s), dtype=bool), k=1)[None, None]
        if self.config.mask_padding and pad_counts is not None:
            keys = np.arange(s)[None, :] < np.asarray(pad_counts)[:, None]
            pad = np.broadcast_to(keys[:, None, None, :], (batch, 1, s, s))
            pad = pad & ~np.eye(s, dtype=bool)
            mask = pad if mask is None else (mask | pad)
        return mask

    def block(self, h: Tensor, layer: int, mask: np.ndarray | None, trace: list | None = None) -> Tensor:
        p = f"layer{layer}."
        w = self.params
        attn = multi_head_attention(
            h, w[p + "wq"], w[p + "wk"], w[p + "wv"], w[p + "wo"], self.config.heads, mask, trace
        )
        y = ag.layer_norm(h + attn, w[p + "ln1_g"], w[p + "ln1_b"], self.config.ln_eps)
        z = feed_forward(y, w[p + "ff_w1"], w[p + "ff_b1"], w[p + "ff_w2"], w[p + "ff_b2"])
        return ag.layer_norm(y + z, w[p + "ln2_g"], w[p + "ln2_b"], self.config.ln_eps)

    def head_vector(self, s: Tensor) -> Tensor:
        return classify_vector(s, self.config.head, self.params)

    def logits(self, x: np.ndarray, pad_counts: np.ndarray | None = None, trace: list | None = None) -> Tensor:
        """Batch of windows (B, T, F) -> logits (B,)."""
        h = self.encode_input(x)
        mask = self.attention_mask(x.shape[0], pad_counts)
        for layer in range(self.config.layers):
            h = self.block(h, layer, mask, trace)
        v = self.head_vector(h)
        return mlp_logit(v, self.params)

    def predict_proba(self, x: np.ndarray, pad_counts: np.ndarray | None = None) -> np.ndarray:
        return ag.sigmoid(self.logits(x, pad_counts)).data.astype(np.float64)

    def param_count(self) -> int:
        return param_count(self)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = ag.softmax_rows(scores, mask)
    if trace is not None:
        trace.append(weights.data)
    return ag.matmul(weights, v)


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
    trace: list | None = None,
) -> Tensor:
    """Project, split into heads, attend, merge and apply the output map.

    ``x`` is (..., S, d); the leading axes are flattened into one batch axis.
    """
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
    lead = x.shape[:-2]
    s = x.shape[-2]
    b = int(np.prod(lead)) if lead else 1
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (b, s, heads, dk)), (0, 2, 1, 3))

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    if mask is not None and mask.ndim == 2:
        mask = mask[None, None]
    out = attention(q, k, v, mask, trace)
    merged = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), lead + (s, d))
    return merged @ wo


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """max(0, x W1 + b1) W2 + b2."""
    return ag.relu(x @ w1 + b1) @ w2 + b2


def classify_vector(s: Tensor, head: str, params: dict[str, Tensor]) -> Tensor:
    """Collapse block output (B, S, d) into the head vector v (B, ·)."""
    if head in ("last_token", "cls_token"):
        return s[:, -1, :]
    if head == "flatten":
        return ag.reshape(s, (s.shape[0], s.shape[1] * s.shape[2]))
    if head == "global_avg_pool":
        return ag.mean(s, axis=1)
    if head == "featurewise_projection":
        w = ag.reshape(params["head.time_w"], (s.shape[1], 1))
        return ag.sum_(s * w, axis=1)
    if head == "featurewise_embedding":
        return ag.sum_(s * params["head.time_w"], axis=1)
    raise ConfigError(f"unknown head {head!r}")


def mlp_logit(v: Tensor, params: dict[str, Tensor]) -> Tensor:
    hidden = ag.relu(v @ params["head.w1"] + params["head.b1"])
    out = hidden @ params["out.w"] + params["out.b"]
    return ag.reshape(out, (out.shape[0],))


def build(config: ModelConfig, feature_width: int, categorical_layout=(), dtype=np.float64) -> Model:
    """Allocate and initialise a model for encoded flows of ``feature_width``.

    Weights are Glorot-uniform, biases zero, positional and CLS vectors
    N(0, 0.02); everything is derived from ``config.seed``.
    """
    config.validate()
    layout = tuple(categorical_layout)
    if config.input_encoding == "none" and feature_width > config.d_model:
        raise ConfigError(
            f"feature_width={feature_width} exceeds d_model={config.d_model} with no input encoding"
        )
    if config.input_encoding == "categorical_embed_lookup" and len(layout) > feature_width:
        raise ConfigError("categorical layout has more fields than the feature vector")
    return Model(config, feature_width, layout, dtype=dtype)


def forward(window, model) -> float:
    """Attack probability for a single :class:`EncodedWindow`."""
    x = np.asarray(window.features)[None]
    pads = np.array([window.pad_count])
    return float(model.predict_proba(x, pads)[0])


def param_count(model) -> int:
    return int(sum(p.size for p in model.params.values()))
