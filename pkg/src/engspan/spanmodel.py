"""Span categorizer head: pooling, feed-forward block, logistic output.

Candidate spans are pooled over the token encoding, passed through a
small FFN (maxout, mish, or two parallel mish stacks), and scored with
one sigmoid per label.  Prediction keeps every candidate whose best
label probability clears the threshold and assigns that single label.

Checkpoints use a binary container:

    magic "SPANCKPT1" | uint32 config-JSON length | config JSON
    | uint32 tensor count
    per tensor: uint16 name length | UTF-8 name | uint8 ndim
                | ndim * uint32 dims | float32 little-endian data
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import LABELS, Excerpt, SpanAnnotation
from .encoder import EncoderConfig, encode_excerpt, encoder_param_init
from .suggester import SuggesterConfig, suggest_candidates

POOL_OPS = ("mean", "max", "first", "last")

CKPT_MAGIC = b"SPANCKPT1"

PREDICTED_BY = "model"


class ModelError(Exception):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    hidden_size: int = 128
    depth: int = 1
    activation: str = "maxout"  # maxout | mish | dual_mish
    dropout: float = 0.0
    maxout_pieces: int = 3

    def __post_init__(self):
        if self.activation not in ("maxout", "mish", "dual_mish"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.depth not in (1, 2):
            raise ValueError(f"depth must be 1 or 2, got {self.depth}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_size if self.activation == "dual_mish" else self.hidden_size


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    suggester: SuggesterConfig = field(default_factory=SuggesterConfig)
    pooling: tuple[str, ...] = POOL_OPS
    labels: tuple[str, ...] = LABELS
    threshold: float = 0.5

    def __post_init__(self):
        if not self.pooling:
            raise ValueError("pooling selection must be non-empty")
        for op in self.pooling:
            if op not in POOL_OPS:
                raise ValueError(f"unknown pooling op {op!r}")
        if not self.labels:
            raise ValueError("label list must be non-empty")

    @property
    def pooled_dim(self) -> int:
        return len(self.pooling) * self.encoder.output_dim


# --- parameters -----------------------------------------------------------


def model_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    enc = config.encoder
    shapes: dict[str, tuple[int, ...]] = {}
    if enc.mode in ("hashed", "hashed+lstm", "dual"):
        shapes["embed.table"] = (enc.hash_buckets, enc.embed_dim)
    if enc.mode in ("hashed+lstm", "external+lstm"):
        d_in, H = enc.lstm_input_dim, enc.lstm_hidden
        for side in ("fw", "bw"):
            shapes[f"lstm.{side}.Wx"] = (d_in, 4 * H)
            shapes[f"lstm.{side}.Wh"] = (H, 4 * H)
            shapes[f"lstm.{side}.b"] = (4 * H,)

    clf = config.classifier
    hid = clf.hidden_size
    if clf.activation == "dual_mish":
        for stack in ("a", "b"):
            d = config.pooled_dim
            for layer in range(clf.depth):
                shapes[f"ffn.{stack}.{layer}.w"] = (d, hid)
                shapes[f"ffn.{stack}.{layer}.b"] = (hid,)
                d = hid
    else:
        d = config.pooled_dim
        for layer in range(clf.depth):
            if clf.activation == "maxout":
                for p in range(clf.maxout_pieces):
                    shapes[f"ffn.{layer}.p{p}.w"] = (d, hid)
                    shapes[f"ffn.{layer}.p{p}.b"] = (hid,)
            else:
                shapes[f"ffn.{layer}.w"] = (d, hid)
                shapes[f"ffn.{layer}.b"] = (hid,)
            d = hid
    shapes["out.w"] = (clf.output_dim, len(config.labels))
    shapes["out.b"] = (len(config.labels),)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.tensors[k].data = arr.copy()


def init_model_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = encoder_param_init(config.encoder, rng, dtype=dtype)
    shapes = model_param_shapes(config)
    for name, shape in shapes.items():
        if name in arrays:
            continue
        if name.endswith(".b") or name == "out.b":
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    tensors = {name: Tensor(arrays[name], requires_grad=True) for name in shapes}
    return ModelParams(config=config, tensors=tensors)


# --- pooling ---------------------------------------------------------------


def pool_spans(encoding: Tensor, spans: list[tuple[int, int]], pooling: tuple[str, ...]) -> Tensor:
    """Pool each span's token rows into one vector -> (S x len(pooling)*d)."""
    T, d = encoding.data.shape
    starts = np.empty(len(spans), dtype=np.intp)
    lasts = np.empty(len(spans), dtype=np.intp)
    for k, (s, e) in enumerate(spans):
        if not (0 <= s < e <= T):
            raise ModelError(f"span ({s},{e}) invalid for encoding of length {T}")
        starts[k] = s
        lasts[k] = e - 1

    parts: list[Tensor] = []
    for op in pooling:
        if op == "mean":
            weights = np.zeros((len(spans), T), dtype=encoding.data.dtype)
            for k, (s, e) in enumerate(spans):
                weights[k, s:e] = 1.0 / (e - s)
            parts.append(ad.matmul(Tensor(weights), encoding))
        elif op == "max":
            parts.append(_span_max(encoding, spans))
        elif op == "first":
            parts.append(ad.gather_rows(encoding, starts))
        elif op == "last":
            parts.append(ad.gather_rows(encoding, lasts))
        else:
            raise ModelError(f"unknown pooling op {op!r}")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def _span_max(encoding: Tensor, spans: list[tuple[int, int]]) -> Tensor:
    d = encoding.data.shape[1]
    out = np.empty((len(spans), d), dtype=encoding.data.dtype)
    arg = np.empty((len(spans), d), dtype=np.intp)
    for k, (s, e) in enumerate(spans):
        block = encoding.data[s:e]
        rows = block.argmax(axis=0)
        arg[k] = s + rows
        out[k] = block[rows, np.arange(d)]
    result = Tensor(out, _parents=(encoding,))

    def backward(g):
        if encoding.requires_grad:
            denc = np.zeros_like(encoding.data)
            cols = np.tile(np.arange(d), len(spans))
            np.add.at(denc, (arg.ravel(), cols), g.ravel())
            encoding.accumulate(denc)

    result._backward = backward
    return result


def pool_span(encoding: Tensor, span: tuple[int, int], pooling: tuple[str, ...] = POOL_OPS) -> Tensor:
    """Single-span pooling; rejects empty spans."""
    s, e = span
    if s >= e:
        raise ModelError(f"empty span ({s},{e})")
    return pool_spans(encoding, [span], pooling)


# --- feed-forward block ----------------------------------------------------


def _mish(z: Tensor) -> Tensor:
    return ad.mul(z, ad.tanh(ad.softplus(z)))


def _dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ModelError("training-mode dropout needs an RNG")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    return ad.mul(x, Tensor(mask))


def _ffn_stack(
    x: Tensor,
    tensors: dict[str, Tensor],
    clf: ClassifierConfig,
    prefix: str,
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    for layer in range(clf.depth):
        if clf.activation == "maxout":
            pieces = [
                ad.add(ad.matmul(x, tensors[f"{prefix}{layer}.p{p}.w"]), tensors[f"{prefix}{layer}.p{p}.b"])
                for p in range(clf.maxout_pieces)
            ]
            h = pieces[0]
            for p in pieces[1:]:
                h = ad.maximum(h, p)
        else:
            z = ad.add(ad.matmul(x, tensors[f"{prefix}{layer}.w"]), tensors[f"{prefix}{layer}.b"])
            h = _mish(z)
        x = _dropout(h, clf.dropout, train, rng)
    return x


def ffn_forward(
    pooled: Tensor,
    params: ModelParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """FFN block in the configured activation variant."""
    clf = params.config.classifier
    if clf.activation == "dual_mish":
        a = _ffn_stack(pooled, params.tensors, clf, "ffn.a.", train, rng)
        b = _ffn_stack(pooled, params.tensors, clf, "ffn.b.", train, rng)
        return ad.concat([a, b], axis=1)
    return _ffn_stack(pooled, params.tensors, clf, "ffn.", train, rng)


# --- scoring and prediction -------------------------------------------------


def score_spans(
    encoding: Tensor,
    candidates: list[tuple[int, int]],
    params: ModelParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-candidate label probabilities (S x n_labels), independent sigmoids."""
    n_labels = len(params.config.labels)
    if not candidates:
        return Tensor(np.zeros((0, n_labels), dtype=encoding.data.dtype))
    pooled = pool_spans(encoding, candidates, params.config.pooling)
    h = ffn_forward(pooled, params, train=train, rng=rng)
    logits = ad.add(ad.matmul(h, params.tensors["out.w"]), params.tensors["out.b"])
    return ad.sigmoid(logits)


def decide_spans(
    probs: np.ndarray,
    candidates: list[tuple[int, int]],
    labels: tuple[str, ...],
    threshold: float,
) -> list[SpanAnnotation]:
    """Threshold + argmax decision rule; one label per emitted span."""
    out = []
    for k, (s, e) in enumerate(candidates):
        row = probs[k]
        best = int(np.argmax(row))
        if row[best] >= threshold:
            out.append(SpanAnnotation(start_tok=s, end_tok=e, label=labels[best], annotator=PREDICTED_BY))
    out.sort(key=lambda sp: (sp.start_tok, sp.end_tok))
    return out


def predict(
    excerpt: Excerpt,
    params: ModelParams,
    suggester_config: SuggesterConfig | None = None,
    threshold: float | None = None,
    external: dict[str, np.ndarray] | None = None,
) -> list[SpanAnnotation]:
    """End-to-end prediction: suggest, encode, score, threshold."""
    cfg = params.config
    sug = suggester_config if suggester_config is not None else cfg.suggester
    thr = cfg.threshold if threshold is None else threshold
    candidates = suggest_candidates(excerpt, sug)
    if not candidates:
        return []
    encoding = encode_excerpt(excerpt, params.tensors, cfg.encoder, external=external)
    probs = score_spans(encoding, candidates, params).data
    return decide_spans(probs, candidates, cfg.labels, thr)


# --- checkpoint io -----------------------------------------------------------


def _config_to_json(config: ModelConfig) -> str:
    return json.dumps(
        {
            "encoder": asdict(config.encoder),
            "classifier": asdict(config.classifier),
            "suggester": asdict(config.suggester),
            "pooling": list(config.pooling),
            "labels": list(config.labels),
            "threshold": config.threshold,
        }
    )


def config_from_dict(obj: dict) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(**obj["encoder"]),
        classifier=ClassifierConfig(**obj["classifier"]),
        suggester=SuggesterConfig(**obj["suggester"]),
        pooling=tuple(obj.get("pooling", POOL_OPS)),
        labels=tuple(obj.get("labels", LABELS)),
        threshold=float(obj.get("threshold", 0.5)),
    )


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    cfg = _config_to_json(params.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path, dtype=np.float32) -> ModelParams:
    """Read a checkpoint, validating every tensor shape against its config."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = config_from_dict(json.loads(fh.read(clen).decode("utf-8")))
        (count,) = struct.unpack("<I", fh.read(4))
        expected = model_param_shapes(config)
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(shape)
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            if tuple(shape) != expected[name]:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {tuple(shape)}, config implies {expected[name]}"
                )
            tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return ModelParams(config=config, tensors=tensors)
