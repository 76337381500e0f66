"""Multi-input embedding-bag classifier written directly in numpy.

Architecture, for every admission in a batch:

    token ids (one list per source)
      -> per-source embedding lookup
      -> concatenation along the token axis
      -> token-level (spatial) dropout, inverted
      -> mean over all tokens (dropped ones still count in the denominator)
      -> L x [dense, relu, inverted dropout]
      -> single sigmoid unit

A single-source model is the same network with ``sources=(CHARTEVENTS,)``.
All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import EncodedBatch, make_batches
from .errors import (
    CorruptFile,
    IdOutOfRange,
    InvalidConfig,
    NonFiniteActivation,
    NonFiniteGradient,
    StaleCache,
    VersionMismatch,
)
from .io import atomic_write_bytes
from .schema import SourceKind
from .vocab import Vocabulary

PROB_CLAMP = 1e-7
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
EMBED_INIT = 0.05

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class ModelConfig:
    sources: tuple[SourceKind, ...]
    embedding_dim: int = 8
    embedding_dropout: float = 0.0
    n_dense: int = 1
    neurons_per_layer: int = 64
    hidden_dropout: float = 0.0
    learning_rate: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(SourceKind(s) if isinstance(s, str) else s for s in self.sources))
        if not self.sources or len(set(self.sources)) != len(self.sources):
            raise InvalidConfig("sources must be a non-empty list without duplicates")
        if self.embedding_dim < 1 or self.n_dense < 1 or self.neurons_per_layer < 1:
            raise InvalidConfig("embedding_dim, n_dense and neurons_per_layer must be positive")
        for name in ("embedding_dropout", "hidden_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1), got {p}")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["sources"] = [s.value for s in self.sources]
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        obj = dict(obj)
        obj["sources"] = tuple(SourceKind(s) for s in obj["sources"])
        return cls(**obj)


def emb_key(source: SourceKind) -> str:
    return f"emb/{source.value}"


class Parameters:
    """Named float64 tensors. ``version`` bumps on every optimizer step."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.tensors.items()})

    def n_layers(self) -> int:
        return sum(1 for k in self.tensors if k.startswith("dense") and k.endswith("/W"))

    @classmethod
    def init(cls, cfg: ModelConfig, table_sizes: Mapping[SourceKind, int], rng: np.random.Generator) -> "Parameters":
        d = cfg.embedding_dim
        tensors: dict[str, np.ndarray] = {}
        for s in cfg.sources:
            E = rng.uniform(-EMBED_INIT, EMBED_INIT, size=(table_sizes[s], d))
            E[0] = 0.0
            tensors[emb_key(s)] = E
        fan_in = d
        for layer in range(cfg.n_dense):
            limit = np.sqrt(6.0 / (fan_in + cfg.neurons_per_layer))
            tensors[f"dense{layer}/W"] = rng.uniform(-limit, limit, size=(fan_in, cfg.neurons_per_layer))
            tensors[f"dense{layer}/b"] = np.zeros(cfg.neurons_per_layer)
            fan_in = cfg.neurons_per_layer
        limit = np.sqrt(6.0 / (fan_in + 1))
        tensors["out/w"] = rng.uniform(-limit, limit, size=fan_in)
        tensors["out/b"] = np.zeros(1)
        return cls(tensors)


def _check_finite(x: np.ndarray, layer: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteActivation(layer)


def _segment_sum(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = np.bincount(segments, weights=values[:, k], minlength=n)
    return out


def forward(
    params: Parameters,
    cfg: ModelConfig,
    batch: EncodedBatch,
    mode: str = EVAL,
    rng: np.random.Generator | None = None,
):
    """Return (probabilities, cache) for a batch."""
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}'")
    train = mode == TRAIN
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    n = len(batch)
    d = cfg.embedding_dim

    flat_ids, segs, vecs = [], [], []
    totals = np.zeros(n, dtype=np.int64)
    for s in cfg.sources:
        E = params[emb_key(s)]
        lists = batch.ids[s]
        lengths = np.fromiter((len(x) for x in lists), dtype=np.int64, count=n)
        ids = np.concatenate(lists).astype(np.int64, copy=False) if lengths.sum() else np.zeros(0, np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
            raise IdOutOfRange(f"{s.value}: token id outside [0, {E.shape[0]})")
        flat_ids.append(ids)
        segs.append(np.repeat(np.arange(n), lengths))
        vecs.append(E[ids])
        totals += lengths
    seg = np.concatenate(segs)
    tok = np.concatenate(vecs) if vecs else np.zeros((0, d))

    # per-token pooling weight: dropout scale / T_total of its document
    weight = np.ones(seg.size)
    p_e = cfg.embedding_dropout
    if train and p_e > 0:
        weight = (rng.random(seg.size) >= p_e) / (1.0 - p_e)
    if seg.size:
        weight = weight / totals[seg]
    pooled = _segment_sum(tok * weight[:, None], seg, n) if seg.size else np.zeros((n, d))
    _check_finite(pooled, "pooling")

    layers = []
    a = pooled
    p_h = cfg.hidden_dropout
    for layer in range(params.n_layers()):
        W, b = params[f"dense{layer}/W"], params[f"dense{layer}/b"]
        z = a @ W + b
        _check_finite(z, f"dense{layer}")
        mask = None
        out = np.maximum(z, 0.0)
        if train and p_h > 0:
            mask = (rng.random(z.shape) >= p_h) / (1.0 - p_h)
            out = out * mask
        layers.append((a, z, mask))
        a = out
    logit = a @ params["out/w"] + params["out/b"][0]
    _check_finite(logit, "output")
    prob = expit(logit)
    cache = {
        "params": params,
        "version": params.version,
        "cfg": cfg,
        "n": n,
        "flat_ids": flat_ids,
        "seg": seg,
        "weight": weight,
        "layers": layers,
        "last": a,
        "prob": prob,
    }
    return prob, cache


def bce_loss(probabilities, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(probabilities, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=float)
    if p.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(cache, labels) -> dict[str, np.ndarray]:
    """Exact gradient of ``bce_loss(forward(...))`` with respect to every tensor."""
    params: Parameters = cache["params"]
    if params.version != cache["version"]:
        raise StaleCache("parameters were updated after this forward pass")
    cfg: ModelConfig = cache["cfg"]
    n = cache["n"]
    p = cache["prob"]
    y = np.asarray(labels, dtype=float)
    # the clamp is flat outside its interior, so no gradient flows there
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dlogit = np.where(inside, (p - y) / n, 0.0)

    grads: dict[str, np.ndarray] = {}
    a_last = cache["last"]
    grads["out/w"] = a_last.T @ dlogit
    grads["out/b"] = np.array([dlogit.sum()])
    da = np.outer(dlogit, params["out/w"])
    for layer in reversed(range(len(cache["layers"]))):
        a_prev, z, mask = cache["layers"][layer]
        if mask is not None:
            da = da * mask
        dz = da * (z > 0)
        grads[f"dense{layer}/W"] = a_prev.T @ dz
        grads[f"dense{layer}/b"] = dz.sum(axis=0)
        da = dz @ params[f"dense{layer}/W"].T

    seg = cache["seg"]
    dtok = da[seg] * cache["weight"][:, None] if seg.size else np.zeros((0, cfg.embedding_dim))
    start = 0
    for s, ids in zip(cfg.sources, cache["flat_ids"]):
        E = params[emb_key(s)]
        g = np.zeros_like(E)
        if ids.size:
            part = dtok[start : start + ids.size]
            for k in range(E.shape[1]):
                g[:, k] = np.bincount(ids, weights=part[:, k], minlength=E.shape[0])
        g[0] = 0.0
        grads[emb_key(s)] = g
        start += ids.size
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in params.items()}, {k: np.zeros_like(x) for k, x in params.items()}, 0)


def adam_step(params: Parameters, grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Embedding pad rows are never touched."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for '{k}'")
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    bc1 = 1.0 - BETA1**state.t
    bc2 = 1.0 - BETA2**state.t
    for k, theta in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if k.startswith("emb/"):
            theta[1:] -= step[1:]
        else:
            theta -= step
    params.version += 1
    return params, state


def predict(params: Parameters, cfg: ModelConfig, docs: Sequence, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode probabilities for encoded documents, in input order."""
    out = []
    for batch in make_batches(docs, batch_size, None, label=None, sources=cfg.sources):
        prob, _ = forward(params, cfg, batch, EVAL)
        out.append(prob)
    return np.concatenate(out)


def batch_loss(params: Parameters, cfg: ModelConfig, batches: Sequence[EncodedBatch]) -> float:
    """Eval-mode BCE averaged over all admissions of ``batches``."""
    total, count = 0.0, 0
    for batch in batches:
        prob, _ = forward(params, cfg, batch, EVAL)
        total += bce_loss(prob, batch.labels) * len(batch)
        count += len(batch)
    return total / count


# --- checkpoint -------------------------------------------------------------

MAGIC = b"EHRBAGCK"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


@dataclass
class Checkpoint:
    params: Parameters
    cfg: ModelConfig
    vocabs: dict[SourceKind, Vocabulary]
    meta: dict = field(default_factory=dict)


def save_model(params: Parameters, cfg: ModelConfig, vocabs: Mapping[SourceKind, Vocabulary], path, meta=None) -> None:
    """Write a checkpoint: magic, length-prefixed JSON header, raw tensors, SHA-256 trailer."""
    names = sorted(params.tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_json(),
        "vocabs": [vocabs[s].to_json() for s in cfg.sources],
        "vocab_digests": {s.value: vocabs[s].digest() for s in cfg.sources},
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(params[k].shape), "dtype": "<f8"} for k in names],
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for k in names:
        buf.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    body = buf.getvalue()
    atomic_write_bytes(path, body + hashlib.sha256(body).digest())


def load_model(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 + _DIGEST_LEN or not data.startswith(MAGIC):
        raise CorruptFile(f"{path}: not a model checkpoint or truncated")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    hstart = len(MAGIC) + 8
    try:
        header = json.loads(data[hstart : hstart + hlen].decode("utf-8"))
        version = int(header["format_version"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    if version > FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    offset = hstart + hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        tensors[spec["name"]] = arr
        offset += count * 8
    if offset != len(body):
        raise CorruptFile(f"{path}: tensor section length mismatch")
    cfg = ModelConfig.from_json(header["config"])
    vocabs = {}
    for obj in header["vocabs"]:
        v = Vocabulary.from_json(obj)
        if v.digest() != header["vocab_digests"][v.source.value]:
            raise CorruptFile(f"{path}: vocabulary digest mismatch for {v.source.value}")
        vocabs[v.source] = v
    return Checkpoint(Parameters(tensors), cfg, vocabs, header.get("meta", {}))
