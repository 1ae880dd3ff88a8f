"""Toy frozen masked language model.

A pre-LayerNorm transformer encoder with learned position embeddings and an
LM head tied to the token embedding matrix.  The forward pass is written over
:mod:`plugtagger.diffcore` tensors so that the same code serves inference,
masked-LM pretraining, and plugin training.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    DataError,
    LengthError,
    ShapeError,
    TruncatedError,
    VersionMismatchError,
    VocabError,
)
from .hashing import fnv1a64

log = logging.getLogger(__name__)

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2000
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 64
    ffn_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden", "layers", "heads", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.max_len < 2:
            raise ContractError("max_len must be >= 2")
        if self.hidden % self.heads:
            raise ContractError("hidden must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def map(self, fn: Callable) -> "LayerWeights":
        return LayerWeights(*(fn(getattr(self, f.name)) for f in fields(self)))

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class ModelWeights:
    """All backbone parameters.

    Fields hold numpy arrays; :meth:`tensors` returns the same structure with
    :class:`Tensor` leaves sharing memory.  The LM head weight is the token
    embedding matrix itself (tied), so it has no field of its own.
    """

    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    lm_bias: np.ndarray
    _fingerprint: int | None = field(default=None, repr=False, compare=False)

    @property
    def lm_head(self) -> np.ndarray:
        return self.tok_emb.T

    def map(self, fn: Callable) -> "ModelWeights":
        return ModelWeights(
            self.config,
            fn(self.tok_emb),
            fn(self.pos_emb),
            [lw.map(fn) for lw in self.layers],
            fn(self.lnf_g),
            fn(self.lnf_b),
            fn(self.lm_bias),
        )

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters in serialization order."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for j, lw in enumerate(self.layers):
            out.extend((f"layers.{j}.{name}", arr) for name, arr in lw.items())
        out += [("lnf_g", self.lnf_g), ("lnf_b", self.lnf_b), ("lm_bias", self.lm_bias)]
        return out

    def tensors(self, requires_grad: bool = False) -> "ModelWeights":
        return self.map(lambda a: Tensor(a, requires_grad=requires_grad))

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda a: np.asarray(a, dtype=dtype).copy())

    def copy(self) -> "ModelWeights":
        return self.map(np.copy)

    def payload(self) -> bytes:
        return b"".join(np.asarray(getattr(a, "data", a), dtype="<f4").tobytes() for _, a in self.named_arrays())

    def content_hash(self) -> int:
        """FNV-1a 64 over the little-endian float32 payload, recomputed on every call."""
        h = None
        for _, arr in self.named_arrays():
            buf = np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f4")
            h = fnv1a64(buf) if h is None else fnv1a64(buf, h)
        return h

    def fingerprint(self) -> int:
        """Memoised :meth:`content_hash`; valid because backbones are never mutated after pretraining."""
        if self._fingerprint is None:
            self._fingerprint = self.content_hash()
        return self._fingerprint

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


def backbone_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count of the backbone for ``config``."""
    h, f = config.hidden, config.ffn_dim
    per_layer = 4 * h * h + 4 * h + 2 * h * f + f + h + 4 * h
    return config.vocab_size * h + config.max_len * h + config.layers * per_layer + 2 * h + config.vocab_size


def init_weights(config: ModelConfig) -> ModelWeights:
    rng = np.random.default_rng(config.seed)
    h, f = config.hidden, config.ffn_dim

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    tok = normal(config.vocab_size, h)
    pos = normal(config.max_len, h)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                ln1_g=ones(h), ln1_b=zeros(h),
                wq=normal(h, h), bq=zeros(h),
                wk=normal(h, h), bk=zeros(h),
                wv=normal(h, h), bv=zeros(h),
                wo=normal(h, h), bo=zeros(h),
                ln2_g=ones(h), ln2_b=zeros(h),
                w1=normal(h, f), b1=zeros(f),
                w2=normal(f, h), b2=zeros(h),
            )
        )
    return ModelWeights(config, tok, pos, layers, ones(h), zeros(h), zeros(config.vocab_size))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def embed(weights: ModelWeights, tokens: Sequence[int], offset: int = 0, table=None) -> Tensor:
    """Token plus position embeddings for one sequence, positions starting at ``offset``."""
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    n = ids.shape[0]
    if n + offset > cfg.max_len:
        raise LengthError(f"sequence of {n} tokens (+{offset}) exceeds max_len {cfg.max_len}")
    if n and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabError(f"token id out of range [0, {cfg.vocab_size})")
    table = _t(weights.tok_emb if table is None else table)
    if n == 0:
        return Tensor(np.zeros((0, cfg.hidden), dtype=table.dtype))
    return dc.add(dc.embedding(table, ids), dc.embedding(_t(weights.pos_emb), np.arange(offset, offset + n)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, m, h = x.shape
    return dc.transpose(dc.reshape(x, (b, m, heads, h // heads)), (0, 2, 1, 3))


def attention(
    x: Tensor,
    layer: LayerWeights,
    heads: int,
    kv_plugin: tuple | None = None,
    bias: np.ndarray | None = None,
) -> Tensor:
    """Multi-head scaled dot-product self-attention.

    ``x`` is (n, d) or (B, n, d).  With ``kv_plugin = (theta_k, theta_v)``,
    each (l_p, d), keys and values become ``[theta_k; K(x)]`` and
    ``[theta_v; V(x)]`` while queries come from ``x`` alone, so the output keeps
    n rows.  ``bias`` is an additive key mask broadcastable to
    (B, heads, n, l_p + n).
    """
    from .plugin import inject_layer_kv

    x = _t(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = dc.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"attention input must be 2-D or 3-D, got {x.shape}")
    d = x.shape[-1]
    if _t(layer.wq).shape != (d, d):
        raise ShapeError(f"attention weights {_t(layer.wq).shape} do not match hidden size {d}")
    q = dc.add(dc.matmul(x, _t(layer.wq)), _t(layer.bq))
    k = dc.add(dc.matmul(x, _t(layer.wk)), _t(layer.bk))
    v = dc.add(dc.matmul(x, _t(layer.wv)), _t(layer.bv))
    if kv_plugin is not None:
        k, v = inject_layer_kv(k, v, _t(kv_plugin[0]), _t(kv_plugin[1]))
    b, n, _ = q.shape
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    dk = d // heads
    scores = dc.mul(dc.matmul(qh, dc.transpose(kh)), 1.0 / math.sqrt(dk))
    if bias is not None:
        scores = dc.add(scores, Tensor(np.asarray(bias, dtype=scores.dtype)))
    probs = dc.softmax(scores, axis=-1)
    ctx = dc.matmul(probs, vh)
    ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = dc.add(dc.matmul(ctx, _t(layer.wo)), _t(layer.bo))
    if squeeze:
        out = dc.reshape(out, (n, d))
    return out


def _block(x: Tensor, layer: LayerWeights, heads: int, bias, kv_plugin) -> Tensor:
    h = dc.layer_norm(x, _t(layer.ln1_g), _t(layer.ln1_b))
    x = dc.add(x, attention(h, layer, heads, kv_plugin, bias))
    h = dc.layer_norm(x, _t(layer.ln2_g), _t(layer.ln2_b))
    ff = dc.gelu(dc.add(dc.matmul(h, _t(layer.w1)), _t(layer.b1)))
    return dc.add(x, dc.add(dc.matmul(ff, _t(layer.w2)), _t(layer.b2)))


def _key_bias(mask: np.ndarray, prefix: int, dtype) -> np.ndarray:
    b = mask.shape[0]
    keys = np.concatenate([np.ones((b, prefix), dtype=bool), mask], axis=1)
    return np.where(keys, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def encode_batch(
    weights: ModelWeights,
    ids: np.ndarray,
    mask: np.ndarray | None = None,
    plugin=None,
    table=None,
) -> Tensor:
    """Final hidden states (B, n, h) for right-padded ``ids`` (B, n).

    ``plugin`` is anything exposing ``mode``, ``l_p`` and ``vectors`` (a
    :class:`~plugtagger.plugin.PluginPack` or a trainable view of one).
    ``table`` overrides the token embedding matrix, e.g. with label-word rows
    patched in.
    """
    from .plugin import EMBEDDING, LAYER, check_compatible, inject_embedding_rows

    cfg = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be (B, n), got {ids.shape}")
    bsz, n = ids.shape
    if mask is None:
        mask = np.ones((bsz, n), dtype=bool)
    mode = None if plugin is None else plugin.mode
    if plugin is not None:
        check_compatible(plugin, weights)
    lp_emb = plugin.l_p if mode == EMBEDDING else 0
    if n + lp_emb > cfg.max_len:
        raise LengthError(f"{n} tokens + {lp_emb} plugin rows exceed max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabError(f"token id out of range [0, {cfg.vocab_size})")

    table = _t(weights.tok_emb if table is None else table)
    pos = _t(weights.pos_emb)
    x = dc.add(dc.embedding(table, ids), dc.embedding(pos, np.arange(lp_emb, lp_emb + n)))
    if mode == EMBEDDING:
        prefix = dc.add(_t(plugin.vectors), dc.embedding(pos, np.arange(lp_emb)))
        x = inject_embedding_rows(x, prefix)
    lp_keys = plugin.l_p if mode in (EMBEDDING, LAYER) else 0
    bias = _key_bias(mask, lp_keys, x.dtype)
    for j, layer in enumerate(weights.layers):
        kv = plugin.vectors[j] if mode == LAYER else None
        x = _block(x, layer, cfg.heads, bias, kv)
    if lp_emb:
        x = dc.slice_(x, (slice(None), slice(lp_emb, None), slice(None)))
    return dc.layer_norm(x, _t(weights.lnf_g), _t(weights.lnf_b))


def encode(weights: ModelWeights, tokens: Sequence[int], plugin=None, table=None) -> Tensor:
    """Hidden states (n, h) for a single unpadded sequence."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    h = encode_batch(weights, ids, plugin=plugin, table=table)
    return dc.reshape(h, h.shape[1:])


def lm_logits(weights: ModelWeights, hidden, table=None, bias=None) -> Tensor:
    """``hidden @ E^T + b`` with the tied embedding matrix ``E``."""
    hidden = _t(hidden)
    table = _t(weights.tok_emb if table is None else table)
    bias = _t(weights.lm_bias if bias is None else bias)
    if hidden.shape[-1] != table.shape[-1]:
        raise ShapeError(f"hidden size {hidden.shape[-1]} != embedding size {table.shape[-1]}")
    return dc.add(dc.matmul(hidden, dc.transpose(table)), bias)


def _rank(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -logit keeps ascending token id among ties
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def predict_topk(weights: ModelWeights, tokens: Sequence[int], position: int, k: int, masked: bool = True) -> list[int]:
    """The ``k`` most probable token ids at ``position``.

    Masked scoring (default) replaces the token at ``position`` by the MASK
    id before reading the logits there.
    """
    tokens = list(tokens)
    if not 0 <= position < len(tokens):
        raise ContractError(f"position {position} outside sequence of length {len(tokens)}")
    if not 1 <= k <= weights.config.vocab_size:
        raise ContractError(f"k must lie in [1, {weights.config.vocab_size}]")
    if masked:
        tokens[position] = MASK_ID
    with dc.no_grad():
        h = encode(weights, tokens)
        logits = lm_logits(weights, dc.slice_(h, slice(position, position + 1))).data[0]
    return [int(i) for i in _rank(logits, k)]


def topk_all_positions(
    weights: ModelWeights,
    sentences: Sequence[Sequence[int]],
    k: int,
    masked: bool = True,
    batch_rows: int = 256,
) -> list[list[list[int]]]:
    """``predict_topk`` at every position of every sentence, batched.

    Returns ``out[s][i]`` = top-k ids at position i of sentence s.
    """
    if not 1 <= k <= weights.config.vocab_size:
        raise ContractError(f"k must lie in [1, {weights.config.vocab_size}]")
    rows: list[tuple[int, int, list[int]]] = []
    for s, sent in enumerate(sentences):
        for i in range(len(sent)):
            toks = list(sent)
            if masked:
                toks[i] = MASK_ID
            rows.append((s, i, toks))
    out: list[list[list[int]]] = [[None] * len(sent) for sent in sentences]  # type: ignore[list-item]
    # group by length so no padding is needed
    rows.sort(key=lambda r: (len(r[2]), r[0], r[1]))
    start = 0
    with dc.no_grad():
        while start < len(rows):
            n = len(rows[start][2])
            stop = start
            while stop < len(rows) and stop - start < batch_rows and len(rows[stop][2]) == n:
                stop += 1
            chunk = rows[start:stop]
            ids = np.array([r[2] for r in chunk], dtype=np.int64)
            h = encode_batch(weights, ids).data
            pos = np.array([r[1] for r in chunk])
            sel = h[np.arange(len(chunk)), pos]
            logits = lm_logits(weights, sel).data
            top = _rank(logits, k)
            for (s, i, _), t in zip(chunk, top):
                out[s][i] = [int(x) for x in t]
            start = stop
    return out


# ---------------------------------------------------------------------------
# optimisation shared with plugin training
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay, linear decay to zero and global-norm clipping."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        total_steps: int = 1,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 1.0,
        warmup_steps: int = 0,
    ):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.total_steps = max(1, total_steps)
        self.warmup_steps = warmup_steps
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        t = self.t
        if self.warmup_steps and t < self.warmup_steps:
            return self.lr * (t + 1) / self.warmup_steps
        return self.lr * max(0.0, 1.0 - t / self.total_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        lr = self.current_lr()
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data *= 1.0 - lr * self.wd
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)
        return norm


# ---------------------------------------------------------------------------
# masked-LM pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainReport:
    steps: int
    final_loss: float
    masked_perplexity: float
    masked_accuracy: float
    losses: list[float] = field(default_factory=list)


def mask_tokens(ids: np.ndarray, valid: np.ndarray, rng: np.random.Generator, vocab_size: int, rate: float = 0.15):
    """BERT-style corruption: of the selected positions 80% MASK, 10% random, 10% kept.

    Returns (corrupted ids, selected-position boolean mask).  At least one
    position per row is selected.
    """
    sel = (rng.random(ids.shape) < rate) & valid
    lengths = valid.sum(axis=1)
    for r in np.nonzero(~sel.any(axis=1) & (lengths > 0))[0]:
        sel[r, rng.integers(lengths[r])] = True
    roll = rng.random(ids.shape)
    out = ids.copy()
    out[sel & (roll < 0.8)] = MASK_ID
    rand_pos = sel & (roll >= 0.8) & (roll < 0.9)
    out[rand_pos] = rng.integers(3, vocab_size, size=int(rand_pos.sum()))
    return out, sel


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    n = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def mlm_loss(weights_t: ModelWeights, ids: np.ndarray, valid: np.ndarray, rng, vocab_size: int):
    corrupted, sel = mask_tokens(ids, valid, rng, vocab_size)
    h = encode_batch(weights_t, corrupted, valid)
    rows = np.nonzero(sel.reshape(-1))[0]
    flat = dc.reshape(h, (-1, h.shape[-1]))
    picked = dc.embedding(flat, rows)
    logits = lm_logits(weights_t, picked)
    targets = ids.reshape(-1)[rows]
    loss = dc.cross_entropy(logits, targets, np.full(len(rows), 1.0 / max(1, len(rows))))
    return loss, logits.data, targets


def pretrain_mlm(
    corpus: Sequence[Sequence[int]],
    config: ModelConfig,
    steps: int,
    batch_size: int = 32,
    lr: float = 2e-3,
    warmup_steps: int = 100,
    weight_decay: float = 0.01,
    seed: int | None = None,
    log_every: int = 0,
    init: ModelWeights | None = None,
) -> tuple[ModelWeights, PretrainReport]:
    """Masked-LM training of a freshly initialised backbone.

    Deterministic given ``config.seed`` (or ``seed``).  The report's
    perplexity and accuracy are measured on masked positions of the last
    ``min(50, steps)`` batches.
    """
    corpus = [list(s) for s in corpus if len(s)]
    if not corpus:
        raise DataError("pretraining corpus is empty")
    weights = init_weights(config) if init is None else init.copy()
    if steps <= 0:
        return weights, PretrainReport(0, float("nan"), float("nan"), float("nan"))
    for s in corpus:
        if len(s) > config.max_len:
            raise LengthError(f"corpus sentence of length {len(s)} exceeds max_len {config.max_len}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tw = weights.tensors(requires_grad=True)
    params = [t for _, t in tw.named_arrays()]
    opt = AdamW(params, lr=lr, total_steps=steps, weight_decay=weight_decay, warmup_steps=warmup_steps)
    order = np.argsort([len(s) for s in corpus], kind="stable")
    n_batches = max(1, len(order) // batch_size)
    buckets = [order[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]
    losses: list[float] = []
    tail_nll: list[float] = []
    tail_hits = tail_total = 0
    tail = min(50, steps)
    for step in range(steps):
        if step % n_batches == 0:
            perm = rng.permutation(n_batches)
        batch = [corpus[i] for i in buckets[perm[step % n_batches]]]
        ids, valid = pad_batch(batch)
        opt.zero_grad()
        loss, logits, targets = mlm_loss(tw, ids, valid, rng, config.vocab_size)
        dc.backward(loss)
        opt.step()
        losses.append(loss.item())
        if step >= steps - tail:
            tail_nll.append(loss.item() * len(targets))
            tail_hits += int((logits.argmax(axis=1) == targets).sum())
            tail_total += len(targets)
        if log_every and (step + 1) % log_every == 0:
            log.info("mlm step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    report = PretrainReport(
        steps=steps,
        final_loss=losses[-1],
        masked_perplexity=float(math.exp(sum(tail_nll) / max(1, tail_total))),
        masked_accuracy=tail_hits / max(1, tail_total),
        losses=losses,
    )
    return weights, report


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"PTMD"
MODEL_VERSION = 1
# magic, version, config block length, content hash, config CRC32, payload length
_MODEL_HEADER = struct.Struct("<4sHIQIQ")


def weight_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter, in serialization order."""
    h, f = config.hidden, config.ffn_dim
    out = [("tok_emb", (config.vocab_size, h)), ("pos_emb", (config.max_len, h))]
    layer = [
        ("ln1_g", (h,)), ("ln1_b", (h,)), ("wq", (h, h)), ("bq", (h,)), ("wk", (h, h)), ("bk", (h,)),
        ("wv", (h, h)), ("bv", (h,)), ("wo", (h, h)), ("bo", (h,)), ("ln2_g", (h,)), ("ln2_b", (h,)),
        ("w1", (h, f)), ("b1", (f,)), ("w2", (f, h)), ("b2", (h,)),
    ]
    for j in range(config.layers):
        out.extend((f"layers.{j}.{n}", s) for n, s in layer)
    out += [("lnf_g", (h,)), ("lnf_b", (h,)), ("lm_bias", (config.vocab_size,))]
    return out


def model_to_bytes(weights: ModelWeights, vocab: Sequence[str] = ()) -> bytes:
    cfg = json.dumps({"config": asdict(weights.config), "vocab": list(vocab)}, ensure_ascii=False).encode("utf-8")
    payload = weights.payload()
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, len(cfg), weights.content_hash(), zlib.crc32(cfg), len(payload)
    )
    return header + cfg + payload


def model_from_bytes(blob: bytes) -> tuple[ModelWeights, list[str]]:
    if len(blob) < _MODEL_HEADER.size:
        raise TruncatedError("model checkpoint shorter than its header")
    magic, version, cfg_len, chash, cfg_crc, payload_len = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"not a model checkpoint (magic {magic!r})")
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model checkpoint version {version}, expected {MODEL_VERSION}")
    body = memoryview(blob)[_MODEL_HEADER.size :]
    if len(body) < cfg_len + payload_len:
        raise TruncatedError("model checkpoint payload truncated")
    if len(body) > cfg_len + payload_len:
        raise DataError("trailing bytes after model checkpoint payload")
    cfg_bytes = bytes(body[:cfg_len])
    if zlib.crc32(cfg_bytes) != cfg_crc:
        raise ChecksumError("model checkpoint config block failed its CRC32 check")
    meta = json.loads(cfg_bytes.decode("utf-8"))
    config = ModelConfig(**meta["config"])
    payload = body[cfg_len:]
    arrays = []
    off = 0
    for _, shape in weight_shapes(config):
        size = math.prod(shape)
        if off + size * 4 > len(payload):
            raise TruncatedError("model checkpoint payload shorter than its config implies")
        arrays.append(np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32))
        off += size * 4
    if off != len(payload):
        raise DataError("model checkpoint payload length does not match its config")
    it = iter(arrays)
    tok, pos = next(it), next(it)
    layers = [LayerWeights(*(next(it) for _ in range(16))) for _ in range(config.layers)]
    weights = ModelWeights(config, tok, pos, layers, next(it), next(it), next(it))
    if weights.content_hash() != chash:
        raise ChecksumError("model checkpoint content hash mismatch (corrupted payload)")
    weights._fingerprint = chash
    return weights, list(meta.get("vocab", []))


def save_model(path, weights: ModelWeights, vocab: Sequence[str] = ()) -> None:
    from .util import atomic_write_bytes

    atomic_write_bytes(Path(path), model_to_bytes(weights, vocab))


def load_model(path) -> tuple[ModelWeights, list[str]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model checkpoint {path}: {exc}") from exc
    return model_from_bytes(blob)
