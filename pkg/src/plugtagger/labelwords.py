"""Label words: selection from LM predictions, target relabelling, decoding.

Selection counts, for every tagged position of the training set, the
language model's top-k candidate words under that position's label, filters
words unsuitable as label words, and gives each label its most frequent
unused candidate.  Training targets replace every labelled token by its label
word (O tokens predict themselves), and decoding inverts the map.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .data import O, TaggedSentence, is_bio_tag, split_tag, to_bio2
from .errors import ContractError, DataError, SelectionError

BIO2 = "BIO2"
FLAT = "Flat"

FreqTable = dict[str, Counter]


class UnmappedTagError(ContractError):
    pass


@dataclass
class LabelMap:
    """Label -> token id, values pairwise distinct.

    With ``shared_bi`` the keys are entity categories ("PER") and B-/I- tags
    of a category share one word (GreedyMatch); otherwise B- and I- tags have
    their own words (ExactMatch).  BIO2 maps never carry an entry for O.
    """

    entries: dict[str, int] = field(default_factory=dict)
    schema: str = BIO2
    shared_bi: bool = False

    def __post_init__(self):
        if self.schema not in (BIO2, FLAT):
            raise ContractError(f"unknown label schema {self.schema!r}")
        if self.schema == BIO2 and O in self.entries:
            raise ContractError("a BIO2 label map has no entry for O")
        values = list(self.entries.values())
        if len(set(values)) != len(values):
            raise ContractError("label words must be pairwise distinct")

    def key(self, tag: str) -> str | None:
        """Map key for ``tag``; ``None`` when the tag predicts its own token."""
        if self.schema == FLAT:
            return tag
        if tag == O:
            return None
        if self.shared_bi:
            return split_tag(tag)[1]
        return tag

    def inverse(self) -> dict[int, str]:
        return {w: label for label, w in self.entries.items()}

    def word_ids(self) -> list[int]:
        return sorted(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)


def label_keys(tags: Iterable[str], schema: str = BIO2, shared_bi: bool = False) -> list[str]:
    """Distinct map keys needed for a tag inventory, sorted."""
    probe = LabelMap({}, schema, shared_bi)
    keys = {probe.key(t) for t in tags}
    keys.discard(None)
    return sorted(keys)


def infer_schema(tags: Iterable[str]) -> str:
    tags = set(tags)
    return BIO2 if tags and all(t == O or is_bio_tag(t) for t in tags) else FLAT


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

Predictor = Callable[[Sequence[Sequence[int]], int], Sequence[Sequence[Sequence[int]]]]


def model_predictor(weights, masked: bool = True) -> Predictor:
    from .model import topk_all_positions

    def predict(sentences, k):
        return topk_all_positions(weights, sentences, k, masked=masked)

    return predict


def count_candidates(
    dataset: Sequence[TaggedSentence],
    keys: Sequence[str],
    predictor: Predictor,
    k: int,
    schema: str = BIO2,
    shared_bi: bool = False,
) -> FreqTable:
    """Traverse the training set and count top-k candidates per label."""
    if k < 1:
        raise ContractError("k must be >= 1")
    probe = LabelMap({}, schema, shared_bi)
    tables: FreqTable = {key: Counter() for key in keys}
    sentences = [list(s.ids) for s in dataset]
    predictions = predictor(sentences, k)
    for sent, cands in zip(dataset, predictions):
        for tag, top in zip(sent.tags, cands):
            key = probe.key(tag)
            if key is None:
                continue
            if key not in tables:
                raise DataError(f"tag {tag!r} is not part of the label set")
            tables[key].update(top)
    return tables


def _ranked(table: Mapping[int, int]) -> list[int]:
    return sorted(table, key=lambda w: (-table[w], w))


@dataclass
class FilterConfig:
    """Knobs of the candidate filter.

    ``reserved`` (PAD/MASK/UNK) and ``punctuation`` ids are always dropped;
    ``stopwords`` is an optional explicit list.  A word ranked in the
    ``top_n`` of more than ``generic_share`` of the label tables counts as
    generic and is dropped, provided there are at least ``min_labels`` tables.
    """

    reserved: frozenset[int] = frozenset({0, 1, 2})
    punctuation: frozenset[int] = frozenset()
    stopwords: frozenset[int] = frozenset()
    top_n: int = 20
    generic_share: float = 0.5
    min_labels: int = 3
    use_generic: bool = True


def filter_candidates(tables: FreqTable, config: FilterConfig | None = None) -> FreqTable:
    config = config or FilterConfig()
    drop = set(config.reserved) | set(config.punctuation) | set(config.stopwords)
    out: FreqTable = {key: Counter({w: c for w, c in t.items() if w not in drop and c > 0}) for key, t in tables.items()}
    if config.use_generic and len(out) >= config.min_labels:
        seen = Counter()
        for t in out.values():
            seen.update(_ranked(t)[: config.top_n])
        generic = {w for w, n in seen.items() if n > config.generic_share * len(out)}
        for t in out.values():
            for w in generic:
                t.pop(w, None)
    return out


def assign_label_words(tables: FreqTable, schema: str = BIO2, shared_bi: bool = False) -> LabelMap:
    """Most frequent unused candidate per label.

    Labels are served in order of descending total candidate count, ties by
    label name; within a table ties go to the smaller token id.
    """
    order = sorted(tables, key=lambda key: (-sum(tables[key].values()), key))
    used: set[int] = set()
    entries: dict[str, int] = {}
    for key in order:
        for w in _ranked(tables[key]):
            if w not in used:
                entries[key] = w
                used.add(w)
                break
        else:
            raise SelectionError(key)
    return LabelMap(dict(sorted(entries.items())), schema, shared_bi)


def punctuation_ids(tokens: Sequence[str]) -> frozenset[int]:
    def punct(tok: str) -> bool:
        return bool(tok) and all(unicodedata.category(ch).startswith("P") for ch in tok)

    return frozenset(i for i, t in enumerate(tokens) if punct(t))


def select_label_words(
    train_set: Sequence[TaggedSentence],
    label_set: Iterable[str],
    model,
    k: int,
    filter_config: FilterConfig | None = None,
    schema: str | None = None,
    shared_bi: bool = False,
    return_tables: bool = False,
):
    """Pick one label word per label from the model's top-k predictions.

    ``model`` is either a :class:`~plugtagger.model.ModelWeights` (masked
    scoring) or a predictor callable ``(sentences, k) -> top-k ids per
    position``.  ``label_set`` is the task's tag inventory; O is skipped
    under BIO2.
    """
    label_set = list(label_set)
    schema = schema or infer_schema(label_set)
    keys = label_keys(label_set, schema, shared_bi)
    predictor = model if callable(model) else model_predictor(model)
    tables = count_candidates(train_set, keys, predictor, k, schema, shared_bi)
    filtered = filter_candidates(tables, filter_config)
    label_map = assign_label_words(filtered, schema, shared_bi)
    if return_tables:
        return label_map, filtered
    return label_map


# ---------------------------------------------------------------------------
# targets and decoding
# ---------------------------------------------------------------------------


def relabel_targets(tokens: Sequence[int], tags: Sequence[str], label_map: LabelMap) -> list[int]:
    """Training targets: the label word for tagged positions, the input token itself for O."""
    if len(tokens) != len(tags):
        raise ContractError("tokens and tags differ in length")
    out = []
    for tok, tag in zip(tokens, tags):
        key = label_map.key(tag)
        if key is None:
            out.append(int(tok))
        elif key in label_map.entries:
            out.append(label_map.entries[key])
        else:
            raise UnmappedTagError(f"tag {tag!r} has no label word")
    return out


def first_piece(pred):
    """Word-level prediction from per-piece predictions (first subword wins)."""
    if isinstance(pred, (list, tuple)):
        if not pred:
            raise ContractError("empty prediction for a word")
        return pred[0]
    return pred


def decode_exact(predicted: Sequence, label_map: LabelMap) -> list[str]:
    if label_map.shared_bi:
        raise ContractError("ExactMatch decoding needs separate B/I label words")
    inv = label_map.inverse()
    tags = [inv.get(int(first_piece(p)), O) for p in predicted]
    if label_map.schema == BIO2:
        tags = to_bio2(tags)
    return tags


def decode_greedy(predicted: Sequence, label_map: LabelMap) -> list[str]:
    """Runs of one repeated category word become a single B-X I-X... span."""
    if not label_map.shared_bi:
        raise ContractError("GreedyMatch decoding needs one shared word per category")
    inv = label_map.inverse()
    tags: list[str] = []
    prev = None
    for p in predicted:
        w = int(first_piece(p))
        cat = inv.get(w)
        if cat is None:
            tags.append(O)
            prev = None
            continue
        tags.append(("I-" if w == prev else "B-") + cat)
        prev = w
    return tags


def export_label_map(label_map: LabelMap, tokens: Sequence[str]) -> str:
    """``LABEL<TAB>word<TAB>token_id`` lines sorted by label."""
    lines = [f"{label}\t{tokens[w]}\t{w}" for label, w in sorted(label_map.entries.items())]
    return "".join(line + "\n" for line in lines)


def parse_label_map(text: str, schema: str | None = None, shared_bi: bool = False) -> LabelMap:
    entries: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"label map line {lineno}: expected LABEL<TAB>word<TAB>token_id")
        try:
            entries[parts[0]] = int(parts[2])
        except ValueError as exc:
            raise DataError(f"label map line {lineno}: bad token id {parts[2]!r}") from exc
    if schema is None:
        schema = BIO2 if shared_bi or any(is_bio_tag(k) for k in entries) else FLAT
    return LabelMap(entries, schema, shared_bi)
