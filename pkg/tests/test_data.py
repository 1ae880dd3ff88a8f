import itertools
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from plugtagger.data import (
    O, TASKS, Span, SyntheticGrammar, TaggedSentence, build_vocab, extract_spans, format_conll, gen_corpus,
    gen_synthetic_tasks, is_valid_bio2, parse_conll, parse_conll_text, span_f1, to_bio2, token_accuracy, unk_rate,
    write_conll,
)
from plugtagger.errors import ContractError, DataError

TAGS = [O, "B-X", "I-X", "B-Y", "I-Y"]


# --- CoNLL ------------------------------------------------------------------


def test_empty_file(tmp_path):
    p = tmp_path / "e.conll"
    p.write_text("")
    assert parse_conll(p) == []


def test_two_sentences_and_docstart():
    text = "-DOCSTART- -X- O\n\nJohn B-PER\nruns O\n\nParis B-LOC\n"
    out = parse_conll_text(text)
    assert [s.tokens for s in out] == [("John", "runs"), ("Paris",)]


def test_iob1_file_is_normalised():
    text = "Olivia I-PER\nSmith I-PER\nmet O\nJohn I-PER\nin O\nRome I-LOC\n"
    # worked by hand: every entity opening after O or another type becomes B-
    assert parse_conll_text(text)[0].tags == ("B-PER", "I-PER", "O", "B-PER", "O", "B-LOC")


def test_ragged_columns_name_the_line():
    with pytest.raises(DataError, match=":2:"):
        parse_conll_text("a NN O\nb O\n")


def test_missing_file():
    with pytest.raises(DataError):
        parse_conll("/nonexistent/file.conll")


def test_explicit_columns():
    text = "EU NNP B-NP B-ORG\nrejects VBZ B-VP O\n"
    s = parse_conll_text(text, token_col=0, tag_col=2)[0]
    assert s.tags == ("B-NP", "B-VP")


def test_format_round_trip_is_a_fixed_point(tmp_path):
    tasks = gen_synthetic_tasks(3, (20, 5, 5))
    sents = tasks["ner"].train
    p = tmp_path / "x.conll"
    write_conll(p, sents)
    again = parse_conll(p)
    assert [(s.tokens, s.tags) for s in again] == [(s.tokens, s.tags) for s in sents]
    assert format_conll(again) == p.read_text()


# --- BIO2 -------------------------------------------------------------------


def test_to_bio2_leading_inside():
    assert to_bio2(["I-PER", "I-PER"]) == ["B-PER", "I-PER"]


def test_to_bio2_keeps_valid_input():
    tags = ["B-PER", "I-PER", "O", "B-LOC", "B-LOC"]
    assert to_bio2(tags) == tags


def test_to_bio2_type_change():
    assert to_bio2(["B-PER", "I-LOC"]) == ["B-PER", "B-LOC"]


def test_to_bio2_unknown_syntax():
    with pytest.raises(DataError):
        to_bio2(["X-PER"])


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_to_bio2_exhaustive(n):
    for seq in itertools.product(TAGS, repeat=n):
        out = to_bio2(seq)
        assert is_valid_bio2(out)
        assert to_bio2(out) == out
        assert [t == O for t in out] == [t == O for t in seq]


# --- vocabulary ---------------------------------------------------------------


def test_vocab_order():
    v = build_vocab([["a", "a", "b"]])
    assert v.tokens == ["<pad>", "<mask>", "<unk>", "a", "b"]


def test_vocab_min_freq():
    v = build_vocab([["a", "a", "b"]], min_freq=2)
    assert v.id("b") == 2


def test_vocab_matches_counting_oracle():
    corpus = gen_corpus(5, 1000)
    counts = Counter(w for s in corpus for w in s)
    expected = sorted(counts, key=lambda w: (-counts[w], w))
    assert build_vocab(corpus).tokens[3:] == expected


# --- metrics ----------------------------------------------------------------


def test_span_f1_identity():
    tags = ["B-PER", "I-PER", "O", "B-LOC"]
    assert span_f1(tags, tags) == (1.0, 1.0, 1.0)


def test_span_f1_no_prediction():
    assert span_f1([O, O], ["B-PER", O]) == (0.0, 0.0, 0.0)


def test_span_f1_no_spans_anywhere():
    assert span_f1([O], [O]) == (1.0, 1.0, 1.0)


def test_span_f1_hand_counted_boundary_error():
    gold = ["B-PER", "I-PER", "O", "O", "B-LOC", "O", "B-ORG", "I-ORG", "I-ORG", "O"]
    pred = ["B-PER", "I-PER", "O", "O", "B-LOC", "O", "B-ORG", "I-ORG", "O", "O"]
    # 3 predicted, 3 gold, 2 exact matches
    p, r, f = span_f1(pred, gold)
    assert (p, r) == pytest.approx((2 / 3, 2 / 3))
    assert f == pytest.approx(2 / 3)


def test_span_f1_length_mismatch():
    with pytest.raises(ContractError):
        span_f1([O], [O, O])


def test_extract_spans():
    assert extract_spans(["B-X", "I-X", "B-X", O, "I-Y"]) == [Span(0, 2, "X"), Span(2, 3, "X"), Span(4, 5, "Y")]


def test_token_accuracy_cases():
    assert token_accuracy(list("abc"), list("abc")) == 1.0
    assert token_accuracy(list("abc"), list("xyz")) == 0.0
    assert token_accuracy(list("abcdefghij"), list("abcdefgxyz")) == pytest.approx(0.7)
    with pytest.raises(ContractError):
        token_accuracy(["a"], ["a", "b"])


@given(st.lists(st.sampled_from(TAGS), max_size=12))
def test_span_f1_self_is_perfect(tags):
    tags = to_bio2(tags)
    assert span_f1(tags, tags) == (1.0, 1.0, 1.0)


# --- synthetic tasks --------------------------------------------------------


@pytest.fixture(scope="module")
def tasks():
    return gen_synthetic_tasks(0)


def test_same_seed_same_data(tasks):
    again = gen_synthetic_tasks(0)
    for t in TASKS:
        assert again[t].train == tasks[t].train and again[t].test == tasks[t].test


def test_tags_follow_surface_rules(tasks):
    g = SyntheticGrammar()
    for t in TASKS:
        for s in tasks[t].train[:500] + tasks[t].test:
            assert tuple(g.rule_tags(s.tokens, t)) == s.tags


def test_splits_are_disjoint(tasks):
    sets = [{s.tokens for s in getattr(tasks["ner"], split)} for split in ("train", "dev", "test")]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])


def test_sizes(tasks):
    assert [len(tasks["pos"].train), len(tasks["pos"].dev), len(tasks["pos"].test)] == [2000, 400, 400]


def test_majority_baseline_is_weak_on_ner(tasks):
    test = tasks["ner"].test
    counts = Counter(t for s in tasks["ner"].train for t in s.tags)
    majority = counts.most_common(1)[0][0]
    assert majority == O
    pred = [[majority] * len(s) for s in test]
    assert span_f1(pred, [list(s.tags) for s in test])[2] < 0.5
    assert span_f1([list(s.tags) for s in test], [list(s.tags) for s in test])[2] == 1.0


def test_ner_tags_are_valid_bio2(tasks):
    assert all(is_valid_bio2(s.tags) for t in ("ner", "chunk") for s in tasks[t].train)


def test_unknown_word_rate_is_low(tasks):
    held = [s.tokens for t in tasks.values() for s in t.dev + t.test]
    corpus = gen_corpus(1, 20000, exclude=held)
    vocab = build_vocab(list(corpus) + [s.tokens for s in tasks["ner"].train])
    assert unk_rate(tasks["ner"].dev, vocab) < 0.05
    assert not {s.tokens for s in tasks["ner"].test} & set(corpus)


def test_tagged_sentence_lengths_checked():
    with pytest.raises(ContractError):
        TaggedSentence(("a",), ())
