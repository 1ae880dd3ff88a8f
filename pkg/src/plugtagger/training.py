"""Frozen-backbone training: plugin vectors plus label-word rows, and the classifier baseline.

Only tensors created here take part in gradient computation.  The backbone
arrays are wrapped as constants, so an optimizer step cannot reach them; a
content hash taken before and after training confirms it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .data import O, TaggedSentence, span_f1, to_bio2, token_accuracy
from .diffcore import Tensor
from .errors import ContractError, DataError, LengthError, ShapeError
from .labelwords import BIO2, LabelMap, decode_exact, decode_greedy, infer_schema, relabel_targets
from .model import ModelConfig, ModelWeights, AdamW, backbone_param_count, encode_batch, lm_logits, pad_batch
from .plugin import EMBEDDING, LAYER, PluginMeta, PluginPack, apply_labelword_deltas, init_plugin

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    max_len: int = 128
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    include_o: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.max_len <= 0:
            raise ContractError("lr, batch size and max_len must be positive, epochs non-negative")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    dev_metric: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{self.dev_metric:.6f}\t{self.seconds:.3f}"


class PluginState:
    """Trainable view of a pack: vectors and label-word rows as :class:`Tensor` leaves.

    Quacks like a :class:`PluginPack` for ``encode_batch``.
    """

    def __init__(self, pack: PluginPack, weights: ModelWeights, requires_grad: bool = True, with_deltas: bool = True):
        self.mode = pack.mode
        self.l_p = pack.l_p
        self.hidden = pack.hidden
        self.n_layers = pack.n_layers
        self.meta = pack.meta
        self.label_map = pack.label_map
        if pack.mode == EMBEDDING:
            self.vectors = Tensor(np.array(pack.vectors), requires_grad, "theta")
        else:
            self.vectors = [
                (Tensor(np.array(tk), requires_grad, f"theta_k{j}"), Tensor(np.array(tv), requires_grad, f"theta_v{j}"))
                for j, (tk, tv) in enumerate(pack.vectors)
            ]
        rows = sorted(pack.label_map.entries.values()) if with_deltas else []
        self.delta_ids = np.asarray(rows, dtype=np.int64)
        table = weights.tok_emb
        init = np.stack([pack.deltas[w] if w in pack.deltas else table[w] for w in rows]) if rows else np.zeros((0, self.hidden), table.dtype)
        self.deltas = Tensor(np.array(init, dtype=table.dtype), requires_grad and bool(rows), "deltas")

    def parameters(self) -> list[Tensor]:
        if self.mode == EMBEDDING:
            vec = [self.vectors]
        else:
            vec = [t for pair in self.vectors for t in pair]
        out = vec + ([self.deltas] if len(self.delta_ids) else [])
        return [p for p in out if p.data.size]

    def table(self, weights: ModelWeights):
        """Embedding matrix with the label-word rows replaced (a graph node when trainable)."""
        if not len(self.delta_ids):
            return weights.tok_emb
        return dc.replace_rows(Tensor(weights.tok_emb), self.delta_ids, self.deltas)

    def to_pack(self, include_deltas: bool = True) -> PluginPack:
        if self.mode == EMBEDDING:
            vectors = self.vectors.data.copy()
        else:
            vectors = [(tk.data.copy(), tv.data.copy()) for tk, tv in self.vectors]
        deltas = {}
        if include_deltas:
            deltas = {int(w): self.deltas.data[i].copy() for i, w in enumerate(self.delta_ids)}
        return PluginPack(self.mode, self.l_p, self.hidden, self.n_layers, vectors, self.label_map, deltas, self.meta)


def _state(pack, weights) -> PluginState:
    if isinstance(pack, PluginState):
        return pack
    return PluginState(pack, weights, requires_grad=False, with_deltas=bool(pack.deltas))


def _ids(sentences: Sequence[TaggedSentence]) -> list[list[int]]:
    out = []
    for s in sentences:
        if s.ids is None:
            raise DataError("sentence has no token ids; attach a vocabulary first")
        out.append(list(s.ids))
    return out


def _positions(mask: np.ndarray) -> np.ndarray:
    return np.nonzero(mask.reshape(-1))[0]


def _sentence_weights(mask: np.ndarray) -> np.ndarray:
    """Per-position weight 1/B: summed over a sentence, averaged over the batch."""
    return np.full(int(mask.sum()), 1.0 / mask.shape[0])


def _hidden_rows(weights, ids, mask, plugin, table) -> Tensor:
    h = encode_batch(weights, ids, mask, plugin=plugin, table=table)
    flat = dc.reshape(h, (-1, h.shape[-1]))
    return dc.embedding(flat, _positions(mask))


def compute_loss(
    batch: Sequence[TaggedSentence], weights: ModelWeights, pack, label_map: LabelMap | None = None, include_o: bool = True
) -> Tensor:
    """Mean over the batch of the summed per-token label-word negative log-likelihood.

    ``pack`` is a :class:`PluginPack`, a :class:`PluginState` or ``None``.
    Targets come from :func:`relabel_targets`; padded positions are skipped,
    and so are positions tagged O when ``include_o`` is false.
    """
    if not batch:
        raise DataError("empty batch")
    state = None if pack is None else _state(pack, weights)
    label_map = label_map if label_map is not None else state.label_map
    seqs = _ids(batch)
    targets = np.concatenate([relabel_targets(ids, s.tags, label_map) for ids, s in zip(seqs, batch)])
    ids, mask = pad_batch(seqs)
    table = weights.tok_emb if state is None else state.table(weights)
    rows = _hidden_rows(weights, ids, mask, state, table)
    logits = lm_logits(weights, rows, table=table)
    w = _sentence_weights(mask)
    if not include_o:
        w = w * np.array([label_map.key(t) is not None for s in batch for t in s.tags])
    return dc.cross_entropy(logits, targets, w)


# ---------------------------------------------------------------------------
# classifier baseline
# ---------------------------------------------------------------------------


@dataclass
class ClassifierHead:
    labels: list[str]
    w: np.ndarray  # (h, |L|)
    b: np.ndarray  # (|L|,)

    def __post_init__(self):
        if self.w.shape != (self.w.shape[0], len(self.labels)) or self.b.shape != (len(self.labels),):
            raise ShapeError(f"classifier needs W: h x {len(self.labels)} and b: {len(self.labels)}")


def init_classifier(hidden: int, labels: Sequence[str], seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    labels = list(labels)
    w = rng.normal(0.0, 0.02, size=(hidden, len(labels))).astype(np.float32)
    return ClassifierHead(labels, w, np.zeros(len(labels), np.float32))


def classifier_loss(batch: Sequence[TaggedSentence], weights: ModelWeights, pack, w, b, labels: Sequence[str]) -> Tensor:
    """Token cross-entropy of ``softmax(H W + b)`` over the tag set, plugin injected."""
    if not batch:
        raise DataError("empty batch")
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if w.shape != (weights.config.hidden, len(labels)) or b.shape != (len(labels),):
        raise ShapeError(f"classifier must be {weights.config.hidden} x {len(labels)}, got {w.shape} / {b.shape}")
    index = {t: i for i, t in enumerate(labels)}
    try:
        targets = np.array([index[t] for s in batch for t in s.tags], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"tag {exc.args[0]!r} is not in the classifier label set") from exc
    ids, mask = pad_batch(_ids(batch))
    state = None if pack is None else _state(pack, weights)
    rows = _hidden_rows(weights, ids, mask, state, None)
    logits = dc.add(dc.matmul(rows, w), b)
    return dc.cross_entropy(logits, targets, _sentence_weights(mask))


# ---------------------------------------------------------------------------
# batching and the shared optimisation loop
# ---------------------------------------------------------------------------


def length_buckets(lengths: Sequence[int], batch_size: int) -> list[np.ndarray]:
    """Indices sorted by length (stable) and cut into consecutive batches."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _cap(config: TrainConfig, weights: ModelWeights, mode: str, l_p: int) -> int:
    cap = min(config.max_len, weights.config.max_len)
    return cap - (l_p if mode == EMBEDDING else 0)


def _truncate(data: Sequence[TaggedSentence], cap: int) -> list[TaggedSentence]:
    if cap <= 0:
        raise LengthError("plugin prefix leaves no room for tokens")
    out = []
    for s in data:
        if len(s) > cap:
            s = TaggedSentence(s.tokens[:cap], tuple(to_bio2(s.tags[:cap])) if infer_schema(s.tags) == BIO2 else s.tags[:cap], s.ids[:cap])
        out.append(s)
    return out


def _fit(
    data: list[TaggedSentence],
    params: list[Tensor],
    loss_fn: Callable[[list[TaggedSentence]], Tensor],
    config: TrainConfig,
    rng: np.random.Generator,
    evaluate: Callable[[], float] | None,
    on_epoch: Callable[[EpochStats], None] | None,
) -> list[EpochStats]:
    buckets = length_buckets([len(s) for s in data], config.batch_size)
    opt = AdamW(params, lr=config.lr, total_steps=config.epochs * len(buckets),
                weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for bi in rng.permutation(len(buckets)):
            batch = [data[i] for i in buckets[bi]]
            opt.zero_grad()
            loss = loss_fn(batch)
            dc.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        metric = evaluate() if evaluate is not None else float("nan")
        stats = EpochStats(epoch, total / len(data), metric, time.perf_counter() - start)
        history.append(stats)
        log.info("%s", stats.line())
        if on_epoch is not None:
            on_epoch(stats)
    return history


def _check_frozen(weights: ModelWeights, before: int) -> None:
    if weights.content_hash() != before:
        raise ContractError("backbone weights changed during plugin training")


def train_plugin(
    dataset: Sequence[TaggedSentence],
    weights: ModelWeights,
    label_map: LabelMap,
    config: TrainConfig | None = None,
    mode: str = LAYER,
    l_p: int = 8,
    dev: Sequence[TaggedSentence] | None = None,
    task: str = "",
    history: list[EpochStats] | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> PluginPack:
    """Optimise plugin vectors and the label words' embedding rows; the backbone stays frozen.

    With zero epochs the result is ``init_plugin`` plus the map (no deltas).
    Per-epoch statistics go to ``history`` when given.
    """
    config = config or TrainConfig()
    if not dataset:
        raise DataError("training set is empty")
    if not len(label_map):
        raise ContractError("label map is empty")
    if any(not 0 <= w < weights.config.vocab_size for w in label_map.entries.values()):
        raise ContractError("label map refers to words outside the model vocabulary")
    before = weights.content_hash()
    data = _truncate(dataset, _cap(config, weights, mode, l_p))
    for s in data:  # fail fast on unmapped tags
        relabel_targets(s.ids if s.ids is not None else [0] * len(s), s.tags, label_map)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    pack = init_plugin(weights.config, mode, l_p, seed=int(seeds[0].generate_state(1)[0]), model_hash=weights.fingerprint(), task=task)
    pack.meta = PluginMeta(weights.fingerprint(), task, pack.meta.format_version, config.seed)
    pack.label_map = label_map
    if config.epochs == 0:
        return pack
    state = PluginState(pack, weights)
    evaluate = None
    if dev:
        evaluate = lambda: evaluate_tags(tag_dataset(weights, state.to_pack(), dev), dev)  # noqa: E731
    stats = _fit(data, state.parameters(), lambda b: compute_loss(b, weights, state, include_o=config.include_o), config,
                 np.random.default_rng(seeds[1]), evaluate, on_epoch)
    if history is not None:
        history.extend(stats)
    _check_frozen(weights, before)
    return state.to_pack()


def train_classifier(
    dataset: Sequence[TaggedSentence],
    weights: ModelWeights,
    labels: Sequence[str] | None = None,
    config: TrainConfig | None = None,
    mode: str = LAYER,
    l_p: int = 8,
    dev: Sequence[TaggedSentence] | None = None,
    task: str = "",
    history: list[EpochStats] | None = None,
) -> tuple[PluginPack, ClassifierHead]:
    """Plug-classifier baseline: plugin vectors plus a linear head over the tag set."""
    config = config or TrainConfig()
    if not dataset:
        raise DataError("training set is empty")
    labels = sorted({t for s in dataset for t in s.tags}) if labels is None else list(labels)
    before = weights.content_hash()
    data = _truncate(dataset, _cap(config, weights, mode, l_p))
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    pack = init_plugin(weights.config, mode, l_p, seed=int(seeds[0].generate_state(1)[0]), task=task)
    pack.meta = PluginMeta(weights.fingerprint(), task, pack.meta.format_version, config.seed)
    head = init_classifier(weights.config.hidden, labels, seed=int(seeds[2].generate_state(1)[0]))
    if config.epochs == 0:
        return pack, head
    state = PluginState(pack, weights, with_deltas=False)
    w = Tensor(head.w, True, "W")
    b = Tensor(head.b, True, "b")
    evaluate = None
    if dev:
        evaluate = lambda: evaluate_tags(classify_dataset(weights, state.to_pack(False), ClassifierHead(labels, w.data, b.data), dev), dev)  # noqa: E731
    stats = _fit(data, state.parameters() + [w, b], lambda bt: classifier_loss(bt, weights, state, w, b, labels),
                 config, np.random.default_rng(seeds[1]), evaluate, None)
    if history is not None:
        history.extend(stats)
    _check_frozen(weights, before)
    return state.to_pack(False), ClassifierHead(labels, w.data.copy(), b.data.copy())


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def _batched_hidden(weights, sentences: Sequence[Sequence[int]], plugin, table, batch_size: int):
    """Yield (indices, per-sentence hidden rows) for length-grouped batches."""
    for idx in length_buckets([len(s) for s in sentences], batch_size):
        ids, mask = pad_batch([sentences[i] for i in idx])
        with dc.no_grad():
            h = encode_batch(weights, ids, mask, plugin=plugin, table=table).data
        yield idx, [h[r, : len(sentences[i])] for r, i in enumerate(idx)]


def predict_words(weights: ModelWeights, pack: PluginPack | None, sentences: Sequence[Sequence[int]], batch_size: int = 64) -> list[list[int]]:
    """Arg-max LM word at every position, with the pack's plugin and label-word rows applied."""
    view = weights if pack is None else apply_labelword_deltas(weights, pack)
    out: list[list[int]] = [[] for _ in sentences]
    for idx, hs in _batched_hidden(view, sentences, pack, None, batch_size):
        for i, h in zip(idx, hs):
            with dc.no_grad():
                logits = lm_logits(view, h).data
            out[i] = [int(x) for x in logits.argmax(axis=1)]
    return out


def decode(words: Sequence[int], label_map: LabelMap) -> list[str]:
    return decode_greedy(words, label_map) if label_map.shared_bi else decode_exact(words, label_map)


def tag_dataset(weights: ModelWeights, pack: PluginPack, sentences: Sequence[TaggedSentence], batch_size: int = 64) -> list[list[str]]:
    words = predict_words(weights, pack, _ids(sentences), batch_size)
    return [decode(w, pack.label_map) for w in words]


def classify_dataset(weights: ModelWeights, pack: PluginPack | None, head: ClassifierHead, sentences: Sequence[TaggedSentence], batch_size: int = 64) -> list[list[str]]:
    bio = infer_schema(head.labels) == BIO2
    out: list[list[str]] = [[] for _ in sentences]
    for idx, hs in _batched_hidden(weights, _ids(sentences), pack, None, batch_size):
        for i, h in zip(idx, hs):
            tags = [head.labels[j] for j in (h @ head.w + head.b).argmax(axis=1)]
            out[i] = to_bio2(tags) if bio else tags
    return out


def evaluate_tags(predicted: Sequence[Sequence[str]], gold: Sequence[TaggedSentence]) -> float:
    """Span F1 for BIO tag sets, token accuracy otherwise."""
    gold_tags = [list(s.tags) for s in gold]
    if infer_schema({t for g in gold_tags for t in g} | {O}) == BIO2:
        return span_f1(list(predicted), gold_tags)[2]
    return token_accuracy(list(predicted), gold_tags)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def plugin_param_count(mode: str, l_p: int, hidden: int, layers: int) -> int:
    return l_p * hidden * (2 * layers if mode == LAYER else 1)


def trainable_param_ratio(config: ModelConfig, pack: PluginPack) -> Fraction:
    """(plugin + delta parameters) / backbone parameters, as an exact fraction."""
    return Fraction(pack.vector_param_count() + pack.delta_param_count(), backbone_param_count(config))
