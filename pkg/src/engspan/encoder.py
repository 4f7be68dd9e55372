"""Per-token encoders: hashed embedder, Bi-LSTM contextualizer, external
vector loading, and the dual (trainable + frozen) concatenation.

External vectors live in a simple binary container:

    magic "SPVEC1" | uint32 dim | uint32 count
    per excerpt: uint16 id length | UTF-8 id | uint32 token count
                 | token_count * dim float32 little-endian (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from hashlib import blake2b
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Excerpt

MODES = ("hashed", "external", "hashed+lstm", "external+lstm", "dual")

SPVEC_MAGIC = b"SPVEC1"


class EncoderError(Exception):
    pass


class VectorStoreError(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 96
    lstm_hidden: int = 200
    hash_buckets: int = 2**20
    mode: str = "hashed"
    external_dim: int | None = None

    def __post_init__(self):
        if self.embed_dim < 1 or self.lstm_hidden < 1 or self.hash_buckets < 1:
            raise ValueError("encoder dimensions must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown encoder mode {self.mode!r}; expected one of {MODES}")
        if self.mode in ("external", "external+lstm", "dual") and not self.external_dim:
            raise ValueError(f"mode {self.mode!r} requires external_dim")

    @property
    def output_dim(self) -> int:
        if self.mode == "hashed":
            return self.embed_dim
        if self.mode == "external":
            return int(self.external_dim)
        if self.mode in ("hashed+lstm", "external+lstm"):
            return 2 * self.lstm_hidden
        return self.embed_dim + int(self.external_dim)  # dual

    @property
    def lstm_input_dim(self) -> int:
        if self.mode == "hashed+lstm":
            return self.embed_dim
        if self.mode == "external+lstm":
            return int(self.external_dim)
        raise ValueError(f"mode {self.mode!r} has no LSTM stage")


# --- hashed token attributes ---------------------------------------------

ATTRIBUTE_NAMES = ("form", "prefix", "suffix", "shape")


def word_shape(surface: str) -> str:
    """Character-class signature with runs longer than 3 truncated."""
    out: list[str] = []
    run_char = ""
    run_len = 0
    for ch in surface:
        if ch.isupper():
            cls = "X"
        elif ch.islower():
            cls = "x"
        elif ch.isdigit():
            cls = "d"
        else:
            cls = ch
        if cls == run_char:
            run_len += 1
        else:
            run_char, run_len = cls, 1
        if run_len <= 3:
            out.append(cls)
    return "".join(out)


def token_attributes(surface: str) -> tuple[str, str, str, str]:
    low = surface.lower()
    return (low, low[:3], low[-3:], word_shape(surface))


@lru_cache(maxsize=1 << 17)
def _bucket(namespace: str, key: str, buckets: int) -> int:
    digest = blake2b((namespace + "\x1f" + key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def bucket_indices(excerpt: Excerpt, config: EncoderConfig) -> np.ndarray:
    """(T x 4) bucket ids for the four hashed attributes of each token."""
    idx = np.empty((len(excerpt.tokens), len(ATTRIBUTE_NAMES)), dtype=np.intp)
    for t, tok in enumerate(excerpt.tokens):
        for a, (name, attr) in enumerate(zip(ATTRIBUTE_NAMES, token_attributes(tok.surface))):
            idx[t, a] = _bucket(name, attr, config.hash_buckets)
    return idx


def bucket_sum_embed(table: Tensor, idx: np.ndarray) -> Tensor:
    """Sum the table rows for each token's attribute buckets -> (T x d)."""
    n_attr = idx.shape[1]
    out = Tensor(table.data[idx].sum(axis=1), _parents=(table,))

    def backward(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx.ravel(), np.repeat(g, n_attr, axis=0))
            table.accumulate(dt)

    out._backward = backward
    return out


def embed_tokens(
    excerpt: Excerpt,
    params: dict[str, Tensor],
    config: EncoderConfig,
    idx: np.ndarray | None = None,
) -> Tensor:
    """Hashed-bucket embedding of each token (T x embed_dim).

    Deterministic given params; `idx` may carry precomputed bucket ids.
    """
    if idx is None:
        idx = bucket_indices(excerpt, config)
    return bucket_sum_embed(params["embed.table"], idx)


# --- external vector container -------------------------------------------


def write_vectors(path: str | Path, vectors: dict[str, np.ndarray]) -> None:
    items = list(vectors.items())
    if not items:
        raise VectorStoreError("refusing to write an empty vector container")
    dim = items[0][1].shape[1]
    with open(path, "wb") as fh:
        fh.write(SPVEC_MAGIC)
        fh.write(struct.pack("<II", dim, len(items)))
        for eid, mat in items:
            mat = np.ascontiguousarray(mat, dtype="<f4")
            if mat.ndim != 2 or mat.shape[1] != dim:
                raise VectorStoreError(f"excerpt {eid!r}: expected (*, {dim}) matrix, got {mat.shape}")
            idb = eid.encode("utf-8")
            fh.write(struct.pack("<H", len(idb)))
            fh.write(idb)
            fh.write(struct.pack("<I", mat.shape[0]))
            fh.write(mat.tobytes())


def read_vectors(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(SPVEC_MAGIC))
        if magic != SPVEC_MAGIC:
            raise VectorStoreError(f"{path}: bad magic {magic!r}")
        dim, count = struct.unpack("<II", fh.read(8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (idlen,) = struct.unpack("<H", fh.read(2))
            eid = fh.read(idlen).decode("utf-8")
            (tcount,) = struct.unpack("<I", fh.read(4))
            buf = fh.read(tcount * dim * 4)
            if len(buf) != tcount * dim * 4:
                raise VectorStoreError(f"{path}: truncated record for excerpt {eid!r}")
            out[eid] = np.frombuffer(buf, dtype="<f4").reshape(tcount, dim).copy()
    return dim, out


def load_external_vectors(
    path: str | Path, corpus: list[Excerpt], config: EncoderConfig
) -> dict[str, np.ndarray]:
    """Load precomputed per-token vectors covering every excerpt of `corpus`."""
    dim, vectors = read_vectors(path)
    if config.external_dim is not None and dim != config.external_dim:
        raise VectorStoreError(
            f"{path}: container dim {dim} != configured external_dim {config.external_dim}"
        )
    for ex in corpus:
        if ex.id not in vectors:
            raise VectorStoreError(f"{path}: no vectors for excerpt {ex.id!r}")
        if vectors[ex.id].shape[0] != len(ex.tokens):
            raise VectorStoreError(
                f"{path}: excerpt {ex.id!r} has {len(ex.tokens)} tokens but "
                f"{vectors[ex.id].shape[0]} vector rows"
            )
    return vectors


# --- Bi-LSTM --------------------------------------------------------------


def lstm_pass(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over a (T x D) sequence -> (T x H) outputs.

    Fused op: the recurrence and its backward are hand-rolled so a
    sequence costs one tape node.  Gate layout along the 4H axis is
    [input, forget, cell, output]; initial hidden and cell states are
    zero.  Row t of the output is the state at position t regardless of
    direction.
    """
    T, D = x.data.shape
    H = Wh.data.shape[0]
    if Wx.data.shape[0] != D:
        raise EncoderError(f"lstm input dim {D} does not match weights {Wx.data.shape}")
    dtype = x.data.dtype
    if T == 0:
        return Tensor(np.zeros((0, H), dtype=dtype), _parents=(x, Wx, Wh, b))

    order = range(T - 1, -1, -1) if reverse else range(T)
    xw = x.data @ Wx.data  # (T x 4H), the input contribution to every gate

    I = np.empty((T, H), dtype=dtype)
    F = np.empty((T, H), dtype=dtype)
    G = np.empty((T, H), dtype=dtype)
    O = np.empty((T, H), dtype=dtype)
    C = np.empty((T, H), dtype=dtype)
    TC = np.empty((T, H), dtype=dtype)
    HPREV = np.empty((T, H), dtype=dtype)
    CPREV = np.empty((T, H), dtype=dtype)
    out = np.empty((T, H), dtype=dtype)

    h = np.zeros(H, dtype=dtype)
    c = np.zeros(H, dtype=dtype)
    for t in order:
        HPREV[t] = h
        CPREV[t] = c
        z = xw[t] + h @ Wh.data + b.data
        i = 1.0 / (1.0 + np.exp(-z[:H]))
        f = 1.0 / (1.0 + np.exp(-z[H : 2 * H]))
        g = np.tanh(z[2 * H : 3 * H])
        o = 1.0 / (1.0 + np.exp(-z[3 * H :]))
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        I[t], F[t], G[t], O[t], C[t], TC[t] = i, f, g, o, c, tc
        out[t] = h

    result = Tensor(out, _parents=(x, Wx, Wh, b))

    def backward(gout):
        dZ = np.zeros((T, 4 * H), dtype=dtype)
        dWh = np.zeros_like(Wh.data)
        dh_rec = np.zeros(H, dtype=dtype)
        dc = np.zeros(H, dtype=dtype)
        for t in reversed(list(order)):
            dh = gout[t] + dh_rec
            do = dh * TC[t]
            dc = dc + dh * O[t] * (1.0 - TC[t] * TC[t])
            di = dc * G[t]
            df = dc * CPREV[t]
            dg = dc * I[t]
            dz = dZ[t]
            dz[:H] = di * I[t] * (1.0 - I[t])
            dz[H : 2 * H] = df * F[t] * (1.0 - F[t])
            dz[2 * H : 3 * H] = dg * (1.0 - G[t] * G[t])
            dz[3 * H :] = do * O[t] * (1.0 - O[t])
            dWh += np.outer(HPREV[t], dz)
            dh_rec = dz @ Wh.data.T
            dc = dc * F[t]
        if x.requires_grad:
            x.accumulate(dZ @ Wx.data.T)
        if Wx.requires_grad:
            Wx.accumulate(x.data.T @ dZ)
        if Wh.requires_grad:
            Wh.accumulate(dWh)
        if b.requires_grad:
            b.accumulate(dZ.sum(axis=0))

    result._backward = backward
    return result


def bilstm_forward(encoding: Tensor, params: dict[str, Tensor], config: EncoderConfig) -> Tensor:
    """Left-to-right and right-to-left passes concatenated per token (T x 2H)."""
    d = encoding.data.shape[1]
    if params["lstm.fw.Wx"].data.shape[0] != d:
        raise EncoderError(
            f"encoding dim {d} does not match lstm input dim {params['lstm.fw.Wx'].data.shape[0]}"
        )
    fw = lstm_pass(encoding, params["lstm.fw.Wx"], params["lstm.fw.Wh"], params["lstm.fw.b"], reverse=False)
    bw = lstm_pass(encoding, params["lstm.bw.Wx"], params["lstm.bw.Wh"], params["lstm.bw.b"], reverse=True)
    return ad.concat([fw, bw], axis=1)


def dual_encode(
    excerpt: Excerpt,
    params: dict[str, Tensor],
    frozen_vectors: dict[str, np.ndarray],
    config: EncoderConfig,
    idx: np.ndarray | None = None,
) -> Tensor:
    """[trainable hashed branch ; frozen external branch] per token.

    The frozen branch enters the graph as a constant, so no gradient can
    reach its source.
    """
    if excerpt.id not in frozen_vectors:
        raise VectorStoreError(f"no frozen vectors for excerpt {excerpt.id!r}")
    frozen = frozen_vectors[excerpt.id]
    if frozen.shape[0] != len(excerpt.tokens):
        raise VectorStoreError(
            f"excerpt {excerpt.id!r}: frozen vectors cover {frozen.shape[0]} tokens, "
            f"excerpt has {len(excerpt.tokens)}"
        )
    trainable = embed_tokens(excerpt, params, config, idx=idx)
    const = Tensor(np.asarray(frozen, dtype=trainable.data.dtype))
    return ad.concat([trainable, const], axis=1)


def encode_excerpt(
    excerpt: Excerpt,
    params: dict[str, Tensor],
    config: EncoderConfig,
    external: dict[str, np.ndarray] | None = None,
    idx: np.ndarray | None = None,
    dtype=np.float32,
) -> Tensor:
    """Run the configured encoder pipeline for one excerpt."""
    mode = config.mode
    if mode == "hashed":
        return embed_tokens(excerpt, params, config, idx=idx)
    if mode == "dual":
        if external is None:
            raise VectorStoreError("dual mode requires external vectors")
        return dual_encode(excerpt, params, external, config, idx=idx)
    if mode in ("external", "external+lstm"):
        if external is None or excerpt.id not in external:
            raise VectorStoreError(f"no external vectors for excerpt {excerpt.id!r}")
        mat = external[excerpt.id]
        if mat.shape[0] != len(excerpt.tokens):
            raise VectorStoreError(
                f"excerpt {excerpt.id!r}: external vectors cover {mat.shape[0]} tokens, "
                f"excerpt has {len(excerpt.tokens)}"
            )
        base = Tensor(np.asarray(mat, dtype=dtype))
        return base if mode == "external" else bilstm_forward(base, params, config)
    # hashed+lstm
    return bilstm_forward(embed_tokens(excerpt, params, config, idx=idx), params, config)


# --- parameter initialization --------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def encoder_param_init(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh encoder tensors: uniform(+-1/sqrt(fan_in)), forget-gate bias 1."""
    out: dict[str, np.ndarray] = {}
    if config.mode in ("hashed", "hashed+lstm", "dual"):
        out["embed.table"] = _uniform(rng, (config.hash_buckets, config.embed_dim), config.embed_dim, dtype)
    if config.mode in ("hashed+lstm", "external+lstm"):
        d_in = config.lstm_input_dim
        H = config.lstm_hidden
        for side in ("fw", "bw"):
            out[f"lstm.{side}.Wx"] = _uniform(rng, (d_in, 4 * H), d_in, dtype)
            out[f"lstm.{side}.Wh"] = _uniform(rng, (H, 4 * H), H, dtype)
            b = np.zeros(4 * H, dtype=dtype)
            b[H : 2 * H] = 1.0  # forget gate bias
            out[f"lstm.{side}.b"] = b
    return out
