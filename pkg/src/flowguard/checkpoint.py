"""Binary checkpoint format.

Layout (little-endian)::

    b"FSNT" | u32 version | u32 header_len | header JSON (utf-8)
    u32 n_tensors
    per tensor: u32 name_len | name | u32 rank | u64 extents[rank] | f64 values

The header carries the architecture, its config, the feature layout and the
digest of the preprocessor state the model was trained against.
"""

from __future__ import annotations

import json
import struct
import warnings

import numpy as np

from .autograd import Tensor
from .lstm import LSTMBaseline, LSTMConfig
from .model import Model, ModelConfig

MAGIC = b"FSNT"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or disagree with their header."""


class PreprocessorMismatchWarning(UserWarning):
    """Checkpoint was trained against a different preprocessor state."""


def save_checkpoint(model) -> bytes:
    header = {
        "arch": model.arch,
        "config": model.config.to_dict(),
        "feature_width": model.feature_width,
        "categorical_layout": list(model.categorical_layout),
        "dtype": model.dtype.name,
        "preprocessor_hash": model.preprocessor_hash,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = memoryview(blob)
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = bytes(self.blob[self.pos : self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def load_checkpoint(blob: bytes, preprocessor_hash: str | None = None):
    """Rebuild a model from :func:`save_checkpoint` output.

    If ``preprocessor_hash`` is given and differs from the stored digest a
    :class:`PreprocessorMismatchWarning` is issued.
    """
    r = _Reader(blob)
    if r.read(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (head_len,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.read(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        try:
            name = r.read(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name") from None
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for tensor {name!r}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.read(8 * n, f"values of {name!r}"), dtype="<f8")
        tensors[name] = values.reshape(shape)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes after last tensor")

    try:
        dtype = np.dtype(header["dtype"])
        if header["arch"] == "transformer":
            model = Model(ModelConfig.from_dict(header["config"]), header["feature_width"],
                          header["categorical_layout"], params={}, dtype=dtype)
        elif header["arch"] == "lstm":
            model = LSTMBaseline(LSTMConfig.from_dict(header["config"]), header["feature_width"],
                                 params={}, dtype=dtype)
        else:
            raise CheckpointError(f"unknown architecture {header['arch']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid checkpoint header: {exc}") from None

    expected = model.param_shapes()
    if list(expected) != list(tensors):
        raise CheckpointError("checkpoint tensor names disagree with the stored config")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, config implies {tuple(shape)}"
            )
        model.params[name] = Tensor(tensors[name].astype(dtype), requires_grad=True, name=name)
    model.preprocessor_hash = header.get("preprocessor_hash")
    if preprocessor_hash is not None and model.preprocessor_hash != preprocessor_hash:
        warnings.warn(
            f"checkpoint was trained against preprocessor {model.preprocessor_hash}, "
            f"got {preprocessor_hash}",
            PreprocessorMismatchWarning,
            stacklevel=2,
        )
    return model
