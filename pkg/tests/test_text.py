import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regent.text import (
    CONTINUATION,
    SPECIAL_TOKENS,
    UNK,
    AnalyzerTerm,
    Vocabulary,
    analyze,
    build_vocab,
    default_stopwords,
    query_stems,
    tokenize_pair,
    tokenize_subwords,
)

LETTERS = string.ascii_lowercase


def small_vocab(*words):
    tokens = list(SPECIAL_TOKENS) + list(LETTERS) + [CONTINUATION + c for c in LETTERS]
    return Vocabulary(tokens + list(words))


def test_analyze_drops_stopwords_and_stems():
    assert analyze("The boys are playing") == [
        AnalyzerTerm("The", "", 0),
        AnalyzerTerm("boys", "boy", 1),
        AnalyzerTerm("are", "", 2),
        AnalyzerTerm("playing", "play", 3),
    ]


def test_analyze_empty():
    assert analyze("") == []


def test_inflections_share_a_stem():
    # hand-applied Porter steps: -ing (1b), -ed (1b), -s (1a)
    assert [t.stem for t in analyze("Playing PLAYED plays")] == ["play"] * 3


def test_punctuation_is_a_word_with_empty_stem():
    terms = analyze("Hello, world!")
    assert [t.surface for t in terms] == ["Hello", ",", "world", "!"]
    assert [t.stem for t in terms] == ["hello", "", "world", ""]


def test_shipped_stopword_list():
    stops = default_stopwords()
    assert len(stops) == 33
    assert {"the", "are", "with", "will"} <= stops


def test_custom_stopwords_override_default():
    assert [t.stem for t in analyze("the cat", stopword_list={"cat"})] == ["the", ""]


def test_query_stems_are_distinct():
    assert query_stems("cats cat CATS play") == ["cat", "play"]


def test_subword_split_and_alignment():
    vocab = small_vocab("play", "##ing", "cat")
    doc = tokenize_subwords(analyze("cat playing"), vocab, max_len=8)
    assert doc.pieces[:5] == ["[CLS]", "cat", "play", "##ing", "[SEP]"]
    assert [(a.word_index, a.start, a.end) for a in doc.alignments] == [(0, 1, 1), (1, 2, 3)]
    assert len(doc.subwords) == 8
    assert doc.mask == [True] * 5 + [False] * 3


def test_segmentation_uses_surface_form():
    # the stem of "playing" is "play", but the surface word is what gets split
    vocab = small_vocab("play", "##ing")
    doc = tokenize_subwords(analyze("playing"), vocab, 6)
    assert doc.pieces[1:3] == ["play", "##ing"]


def test_unknown_word_becomes_one_unk():
    vocab = small_vocab()
    doc = tokenize_subwords(analyze("café"), vocab, 6)
    assert doc.pieces[1] == UNK
    assert doc.alignments[0].start == doc.alignments[0].end == 1


@pytest.mark.parametrize(
    "text, max_len, kept",
    [
        # max_len 6: [CLS] + 4 word slots + [SEP]
        ("cat playing cat", 6, [(0, 1, 1), (1, 2, 3), (2, 4, 4)]),
        ("cat cat cat playing", 6, [(0, 1, 1), (1, 2, 2), (2, 3, 3)]),
        ("cat cat playing", 5, [(0, 1, 1), (1, 2, 2)]),
        ("playing cat", 3, []),
        ("cat playing", 3, [(0, 1, 1)]),
        ("playing", 2, []),
    ],
)
def test_truncation_drops_whole_words(text, max_len, kept):
    vocab = small_vocab("play", "##ing", "cat")
    doc = tokenize_subwords(analyze(text), vocab, max_len)
    assert [(a.word_index, a.start, a.end) for a in doc.alignments] == kept
    assert len(doc.subwords) == max_len
    assert len(doc.terms) == len(doc.alignments)


def test_max_len_below_two_rejected():
    with pytest.raises(ValueError):
        tokenize_subwords([], small_vocab(), 1)


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["Cats play", "dogs play"])
    vocab.save(tmp_path / "vocab.txt")
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.tokens == vocab.tokens
    assert again.index["play"] == vocab.index["play"]


def test_pair_layout():
    vocab = small_vocab("cat")
    ids = tokenize_pair("cat", "a b", vocab, 10)
    pieces = [vocab.tokens[i] for i in ids]
    assert pieces == ["[CLS]", "cat", "[SEP]", "a", "b", "[SEP]", "[PAD]", "[PAD]", "[PAD]", "[PAD]"]


words = st.text(alphabet=LETTERS + "é", min_size=1, max_size=9)
sentences = st.lists(words, min_size=0, max_size=12).map(" ".join)
VOCAB = small_vocab("play", "##ing", "##ed", "cat", "ca", "ab", "##ab", "##ba")


@settings(max_examples=200, deadline=None)
@given(sentences, st.integers(2, 40))
def test_round_trip_and_span_invariants(text, max_len):
    doc = tokenize_subwords(analyze(text), VOCAB, max_len)
    assert len(doc.subwords) == max_len
    prev_end = 0
    for a, term in zip(doc.alignments, doc.terms):
        assert 0 < a.start <= a.end < max_len - 1
        assert a.start > prev_end or a.start == 1
        prev_end = a.end
        pieces = doc.pieces[a.start : a.end + 1]
        if pieces != [UNK]:
            assert "".join(p.removeprefix(CONTINUATION) for p in pieces) == term.surface.lower()
    idx = [a.word_index for a in doc.alignments]
    assert idx == list(range(len(idx)))


@settings(max_examples=200, deadline=None)
@given(sentences, st.integers(2, 30), st.integers(0, 10))
def test_truncation_monotone(text, max_len, extra):
    terms = analyze(text)
    short = tokenize_subwords(terms, VOCAB, max_len)
    long = tokenize_subwords(terms, VOCAB, max_len + extra)
    assert set(short.alignments) <= set(long.alignments)


@settings(max_examples=100, deadline=None)
@given(sentences)
def test_analyze_is_deterministic_and_lowercase(text):
    a, b = analyze(text), analyze(text)
    assert a == b
    assert [t.word_index for t in a] == list(range(len(a)))
    for t in a:
        assert t.stem == t.stem.lower() and not any(c.isspace() for c in t.stem)
