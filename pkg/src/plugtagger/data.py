"""Corpora, tag schemes, vocabulary, synthetic tasks and metrics."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError

O = "O"
PAD, MASK, UNK = "<pad>", "<mask>", "<unk>"
RESERVED = (PAD, MASK, UNK)

_BIO_RE = re.compile(r"^([BI])-(\S+)$")


@dataclass(frozen=True)
class TaggedSentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ContractError("tokens and tags differ in length")
        if self.ids is not None and len(self.ids) != len(self.tokens):
            raise ContractError("ids and tokens differ in length")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    type: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ContractError(f"invalid span [{self.start}, {self.end})")


def is_bio_tag(tag: str) -> bool:
    return tag == O or _BIO_RE.match(tag) is not None


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == O:
        return O, None
    m = _BIO_RE.match(tag)
    if not m:
        raise DataError(f"not a BIO tag: {tag!r}")
    return m.group(1), m.group(2)


def to_bio2(tags: Sequence[str]) -> list[str]:
    """Normalise IOB1 (or repair invalid BIO2) to BIO2.

    An I-X that does not continue an X chunk starts a new one as B-X.
    """
    out: list[str] = []
    prev_type = None
    for tag in tags:
        prefix, typ = split_tag(tag)
        if prefix == "I" and prev_type != typ:
            tag = f"B-{typ}"
        out.append(tag)
        prev_type = typ
    return out


def is_valid_bio2(tags: Sequence[str]) -> bool:
    prev = None
    for tag in tags:
        prefix, typ = split_tag(tag)
        if prefix == "I" and prev != typ:
            return False
        prev = typ
    return True


# ---------------------------------------------------------------------------
# CoNLL column files
# ---------------------------------------------------------------------------


def parse_conll(path, token_col: int = 0, tag_col: int = -1, normalize: str = "auto") -> list[TaggedSentence]:
    """Read a whitespace-separated column file; blank lines end sentences.

    ``normalize``: ``"auto"`` converts tags to BIO2 when every tag is
    BIO-shaped, ``"bio2"`` always does (erroring on other tags), ``"none"``
    keeps them verbatim.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_conll_text(text, token_col, tag_col, normalize, source=str(path))


def parse_conll_text(text: str, token_col: int = 0, tag_col: int = -1, normalize: str = "auto", source: str = "<text>") -> list[TaggedSentence]:
    sentences: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    width = None

    def flush():
        nonlocal tokens, tags, width
        if tokens:
            sentences.append(TaggedSentence(tuple(tokens), tuple(tags)))
        tokens, tags, width = [], [], None

    for lineno, line in enumerate(text.splitlines(), 1):
        cols = line.split()
        if not cols:
            flush()
            continue
        if cols[0] == "-DOCSTART-":
            continue
        if width is None:
            width = len(cols)
        elif len(cols) != width:
            raise DataError(f"{source}:{lineno}: ragged columns ({len(cols)} vs {width})")
        try:
            tokens.append(cols[token_col])
            tags.append(cols[tag_col])
        except IndexError:
            raise DataError(f"{source}:{lineno}: missing column in {line!r}") from None
    flush()

    if normalize == "bio2" or (normalize == "auto" and sentences and all(is_bio_tag(t) for s in sentences for t in s.tags)):
        sentences = [replace(s, tags=tuple(to_bio2(s.tags))) for s in sentences]
    return sentences


def format_conll(sentences: Iterable[TaggedSentence]) -> str:
    blocks = []
    for s in sentences:
        blocks.append("".join(f"{tok}\t{tag}\n" for tok, tag in zip(s.tokens, s.tags)))
    return "\n".join(blocks)


def write_conll(path, sentences: Iterable[TaggedSentence]) -> None:
    from .util import atomic_write_text

    atomic_write_text(Path(path), format_conll(sentences))


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved PAD, MASK, UNK tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, 2)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, 2) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def attach(self, sentences: Iterable[TaggedSentence]) -> list[TaggedSentence]:
        return [replace(s, ids=tuple(self.encode(s.tokens))) for s in sentences]


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Reserved tokens first, then words by descending frequency, ties alphabetical."""
    counts = Counter()
    for sent in corpus:
        counts.update(sent)
    for r in RESERVED:
        counts.pop(r, None)
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab(list(RESERVED) + words)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def extract_spans(tags: Sequence[str]) -> list[Span]:
    """Maximal ``B-X (I-X)*`` runs; a stray I-X opens a span."""
    spans = []
    start = typ = None
    for i, tag in enumerate(list(tags) + [O]):
        prefix, t = split_tag(tag)
        if typ is not None and (prefix != "I" or t != typ):
            spans.append(Span(start, i, typ))
            start = typ = None
        if prefix == "B" or (prefix == "I" and typ is None):
            start, typ = i, t
    return spans


def _as_corpus(seqs):
    if len(seqs) and isinstance(seqs[0], str):
        return [seqs]
    return seqs


def span_f1(predicted, gold) -> tuple[float, float, float]:
    """Micro-averaged span precision, recall and F1 (one sequence or a corpus)."""
    predicted, gold = _as_corpus(list(predicted)), _as_corpus(list(gold))
    if len(predicted) != len(gold):
        raise ContractError("prediction and gold corpora differ in size")
    tp = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        if len(p) != len(g):
            raise ContractError("prediction and gold differ in length")
        ps, gs = set(extract_spans(p)), set(extract_spans(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def token_accuracy(predicted, gold) -> float:
    predicted, gold = _as_corpus(list(predicted)), _as_corpus(list(gold))
    if len(predicted) != len(gold):
        raise ContractError("prediction and gold corpora differ in size")
    hits = total = 0
    for p, g in zip(predicted, gold):
        if len(p) != len(g):
            raise ContractError("prediction and gold differ in length")
        hits += sum(a == b for a, b in zip(p, g))
        total += len(g)
    return hits / total if total else 1.0


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

TASKS = ("ner", "pos", "chunk")

FIRST_NAMES = (
    "Olivia John Mary James Emma Liam Sophia Noah Ava William Isabella Lucas Mia Henry Amelia "
    "Oliver Harper Elijah Evelyn Daniel Abigail Michael Emily Samuel Ella David Grace Joseph Chloe "
    "Lily Jack Zoe Ryan Nora Adam Clara Leo Alice Victor Xavier Hannah Peter Laura Simon Julia "
    "Martin Sarah Oscar Anna"
).split()
LAST_NAMES = (
    "Smith Johnson Williams Brown Jones Garcia Miller Davis Wilson Moore Taylor Anderson Jackson "
    "White Harris Martinez Thompson Clark Lewis Walker Hall Allen Young King Wright Scott Green "
    "Baker Adams Nelson Hill Campbell Mitchell Roberts Carter Phillips Evans Turner Torres Parker "
    "Collins Edwards Stewart Morris Murphy Cook Rogers Morgan Cooper Reed"
).split()
CITIES = (
    "Paris London Berlin Madrid Rome Vienna Prague Dublin Lisbon Oslo Helsinki Warsaw Athens Cairo "
    "Tokyo Seoul Beijing Delhi Sydney Toronto Boston Chicago Denver Houston Seattle Miami Atlanta "
    "Dallas Phoenix Austin Geneva Zurich Munich Hamburg Milan Naples Kyoto Osaka Lima Quito"
).split()
LOC_SUFFIXES = "City Heights Springs Harbor Valley".split()
ORG_STEMS = (
    "Acme Globex Initech Umbrella Hooli Stark Wayne Wonka Cyberdyne Soylent Tyrell Vandelay Oscorp "
    "Gringotts Monarch Nakatomi Aperture Massive Dunder Prestige Sterling Pied Vought Kramerica Duff"
).split()
ORG_SUFFIXES = "Corp Inc Group Bank Labs Systems Holdings".split()
DETERMINERS = "the a this that every some".split()
PREPOSITIONS = "in on at with from for near under over about after before".split()
CONJUNCTIONS = "and or but".split()
PRONOUNS = "he she they it we".split()
REAL_NOUNS = "apple book letter car house idea report song plan gift".split()
REAL_ADJECTIVES = "red big old new happy quiet bright small warm strange".split()
REAL_VERBS = "like love want need visit call help watch".split()
DITRANSITIVE = "give send show tell offer hand lend bring".split()

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo ga ge go gu ka ke ki ko ku la le li lo lu ma me mi "
    "mo mu na ne ni no nu pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu va ve vi vo "
    "za ze zi zo"
).split()


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _pseudo(rng, suffix: str, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        w = _pick(rng, _SYLLABLES) + _pick(rng, _SYLLABLES) + suffix
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class Lexicon:
    nouns: tuple[str, ...]
    adjectives: tuple[str, ...]
    verbs: tuple[str, ...]
    ditransitive: tuple[str, ...]
    adverbs: tuple[str, ...]

    @staticmethod
    def build(seed: int = 1234) -> "Lexicon":
        """Fixed word inventory; every task seed shares it."""
        rng = np.random.default_rng(seed)
        taken = set(w.lower() for w in FIRST_NAMES + LAST_NAMES + CITIES + ORG_STEMS)
        taken |= set(REAL_NOUNS + REAL_ADJECTIVES + REAL_VERBS + DITRANSITIVE + DETERMINERS + PREPOSITIONS)
        nouns = list(REAL_NOUNS)
        for suf in ("tion", "ment", "ness", "er"):
            nouns += _pseudo(rng, suf, 85, taken)
        adjs = list(REAL_ADJECTIVES)
        for suf in ("ous", "ful", "ive", "al"):
            adjs += _pseudo(rng, suf, 35, taken)
        verbs = list(REAL_VERBS)
        for suf in ("ize", "ate", "ify"):
            verbs += _pseudo(rng, suf, 34, taken)
        ditr = list(DITRANSITIVE) + _pseudo(rng, "ise", 12, taken)
        advs = _pseudo(rng, "ly", 80, taken)
        return Lexicon(tuple(nouns), tuple(adjs), tuple(verbs), tuple(ditr), tuple(advs))

    def plural(self, noun: str) -> str:
        return noun + "s"

    def third_person(self, verb: str) -> str:
        return verb + "s"

    def past(self, verb: str) -> str:
        return verb + "d" if verb.endswith("e") else verb + "ed"

    def word_classes(self) -> dict[str, str]:
        """Surface word -> fine class used by the rule oracles."""
        classes: dict[str, str] = {}
        for w in FIRST_NAMES:
            classes[w] = "FIRST"
        for w in LAST_NAMES:
            classes[w] = "LAST"
        for w in CITIES:
            classes[w] = "CITY"
        for w in LOC_SUFFIXES:
            classes[w] = "LOCSUF"
        for w in ORG_STEMS:
            classes[w] = "ORG"
        for w in ORG_SUFFIXES:
            classes[w] = "ORGSUF"
        for w in DETERMINERS:
            classes[w] = "DT"
        for w in PREPOSITIONS:
            classes[w] = "IN"
        for w in CONJUNCTIONS:
            classes[w] = "CC"
        for w in PRONOUNS:
            classes[w] = "PRP"
        for n in self.nouns:
            classes[n] = "NN"
            classes[self.plural(n)] = "NNS"
        for a in self.adjectives:
            classes[a] = "JJ"
        for v in self.verbs + self.ditransitive:
            classes[self.third_person(v)] = "VBZ"
            classes[self.past(v)] = "VBD"
        for r in self.adverbs:
            classes[r] = "RB"
        classes["."] = "."
        classes[","] = ","
        return classes


_NER_OF_CLASS = {"FIRST": "B-PER", "LAST": "I-PER", "CITY": "B-LOC", "LOCSUF": "I-LOC", "ORG": "B-ORG", "ORGSUF": "I-ORG"}
_NNP = {"FIRST", "LAST", "CITY", "LOCSUF", "ORG", "ORGSUF"}


class SyntheticGrammar:
    """Template grammar emitting sentences with NER, POS and chunk layers.

    Every tag is a deterministic function of the surface string (see
    :meth:`rule_tags`): entity tags from lexicon membership, POS from the
    word's class, chunks from class plus immediate neighbours.
    """

    def __init__(self, lexicon: Lexicon | None = None):
        self.lex = lexicon or Lexicon.build()
        self.classes = self.lex.word_classes()

    # each generator returns a list of (word, ner, pos, chunk)
    def _np(self, rng, subject: bool = False):
        r = rng.random()
        lex = self.lex
        if r < 0.25:
            first = _pick(rng, FIRST_NAMES)
            out = [(first, "B-PER", "NNP", "B-NP")]
            if rng.random() < 0.6:
                out.append((_pick(rng, LAST_NAMES), "I-PER", "NNP", "I-NP"))
            return out
        if r < 0.35:
            out = [(_pick(rng, CITIES), "B-LOC", "NNP", "B-NP")]
            if rng.random() < 0.3:
                out.append((_pick(rng, LOC_SUFFIXES), "I-LOC", "NNP", "I-NP"))
            return out
        if r < 0.47:
            return [(_pick(rng, ORG_STEMS), "B-ORG", "NNP", "B-NP"), (_pick(rng, ORG_SUFFIXES), "I-ORG", "NNP", "I-NP")]
        if subject and r < 0.55:
            return [(_pick(rng, PRONOUNS), "O", "PRP", "B-NP")]
        if r < 0.82:
            out = [(_pick(rng, DETERMINERS), "O", "DT", "B-NP")]
            for _ in range(rng.choice([0, 0, 1, 1, 2])):
                out.append((_pick(rng, lex.adjectives), "O", "JJ", "I-NP"))
            out.append((_pick(rng, lex.nouns), "O", "NN", "I-NP"))
            return out
        out = []
        if rng.random() < 0.4:
            out.append((_pick(rng, lex.adjectives), "O", "JJ", "B-NP"))
        out.append((lex.plural(_pick(rng, lex.nouns)), "O", "NNS", "I-NP" if out else "B-NP"))
        return out

    def _verb(self, rng, stems):
        stem = _pick(rng, stems)
        if rng.random() < 0.5:
            return self.lex.third_person(stem), "VBZ"
        return self.lex.past(stem), "VBD"

    def _clause(self, rng):
        out = self._np(rng, subject=True)
        vp = []
        if rng.random() < 0.2:
            vp.append((_pick(rng, self.lex.adverbs), "O", "RB", "B-VP"))
        ditr = rng.random() < 0.2
        verb, pos = self._verb(rng, self.lex.ditransitive if ditr else self.lex.verbs)
        vp.append((verb, "O", pos, "I-VP" if vp else "B-VP"))
        out += vp
        out += self._np(rng)
        if ditr:
            out += self._np(rng)
        for _ in range(rng.choice([0, 0, 1, 1, 2])):
            out.append((_pick(rng, PREPOSITIONS), "O", "IN", "B-PP"))
            out += self._np(rng)
        if rng.random() < 0.15:
            out.append((_pick(rng, self.lex.adverbs), "O", "RB", "B-ADVP"))
        return out

    def sentence(self, rng):
        rows = self._clause(rng)
        if rng.random() < 0.2:
            rows.append((",", "O", ",", "O"))
            rows.append((_pick(rng, CONJUNCTIONS), "O", "CC", "O"))
            rows += self._clause(rng)
        rows.append((".", "O", ".", "O"))
        words = tuple(r[0] for r in rows)
        return words, {"ner": tuple(r[1] for r in rows), "pos": tuple(r[2] for r in rows), "chunk": tuple(r[3] for r in rows)}

    def rule_tags(self, words: Sequence[str], task: str) -> list[str]:
        """Recompute a task's tags from the surface string alone."""
        cls = [self.classes[w] for w in words]
        if task == "ner":
            return [_NER_OF_CLASS.get(c, O) for c in cls]
        if task == "pos":
            return ["NNP" if c in _NNP else c for c in cls]
        if task != "chunk":
            raise ContractError(f"unknown task {task!r}")
        tags = []
        for i, c in enumerate(cls):
            prev = cls[i - 1] if i else None
            nxt = cls[i + 1] if i + 1 < len(cls) else None
            if c in ("DT", "PRP", "FIRST", "CITY", "ORG"):
                tags.append("B-NP")
            elif c in ("LAST", "LOCSUF", "ORGSUF", "NN"):
                tags.append("I-NP")
            elif c == "JJ":
                tags.append("I-NP" if prev in ("DT", "JJ") else "B-NP")
            elif c == "NNS":
                tags.append("I-NP" if prev == "JJ" else "B-NP")
            elif c == "RB":
                tags.append("B-VP" if nxt in ("VBZ", "VBD") else "B-ADVP")
            elif c in ("VBZ", "VBD"):
                tags.append("I-VP" if prev == "RB" else "B-VP")
            elif c == "IN":
                tags.append("B-PP")
            else:
                tags.append(O)
        return tags


@dataclass
class TaskSplits:
    train: list[TaggedSentence]
    dev: list[TaggedSentence]
    test: list[TaggedSentence]


def gen_synthetic_tasks(seed: int = 0, sizes: tuple[int, int, int] = (2000, 400, 400), grammar: SyntheticGrammar | None = None) -> dict[str, TaskSplits]:
    """NER-, POS- and chunking-like datasets over one shared sentence pool.

    As in CoNLL-2003 the three tasks annotate the same sentences.  Splits
    are disjoint at the sentence level.
    """
    grammar = grammar or SyntheticGrammar()
    rng = np.random.default_rng(seed)
    total = sum(sizes)
    seen: set[tuple[str, ...]] = set()
    pool = []
    attempts = 0
    while len(pool) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise DataError("could not generate enough distinct sentences")
        words, layers = grammar.sentence(rng)
        if words in seen:
            continue
        seen.add(words)
        pool.append((words, layers))
    bounds = np.cumsum((0,) + tuple(sizes))
    out = {}
    for task in TASKS:
        parts = [
            [TaggedSentence(w, layers[task]) for w, layers in pool[lo:hi]]
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        out[task] = TaskSplits(*parts)
    return out


def gen_corpus(seed: int, n: int, exclude: Iterable[Sequence[str]] = (), grammar: SyntheticGrammar | None = None) -> list[tuple[str, ...]]:
    """Unlabelled pretraining sentences from the same grammar, skipping ``exclude``."""
    grammar = grammar or SyntheticGrammar()
    rng = np.random.default_rng(seed)
    banned = {tuple(s) for s in exclude}
    out = []
    while len(out) < n:
        words, _ = grammar.sentence(rng)
        if words not in banned:
            out.append(words)
    return out


def unk_rate(sentences: Iterable[TaggedSentence], vocab: Vocab) -> float:
    total = unk = 0
    for s in sentences:
        total += len(s.tokens)
        unk += sum(w not in vocab for w in s.tokens)
    return unk / total if total else 0.0
