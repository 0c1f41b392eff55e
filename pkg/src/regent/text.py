"""Text analysis and subword tokenization with word alignment.

Documents are analyzed twice: once IR-style (lowercase, stopwords, Porter
stems) to obtain the terms BM25 is computed over, and once with a greedy
longest-match subword tokenizer over the original surface words. The two
views are tied together by one :class:`AlignmentTuple` per word, which is
what lets a word-level BM25 score be copied onto every subword it produced.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from nltk.stem.porter import PorterStemmer

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_WORD_CHARS = 100

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_stemmer = PorterStemmer(mode=PorterStemmer.NLTK_EXTENSIONS)


@dataclass(frozen=True)
class AnalyzerTerm:
    surface: str
    stem: str
    word_index: int


@dataclass(frozen=True)
class AlignmentTuple:
    word_index: int
    start: int
    end: int  # inclusive


@dataclass
class AnalyzedDocument:
    doc_id: str
    subwords: list[int]
    alignments: list[AlignmentTuple]
    terms: list[AnalyzerTerm]
    pieces: list[str] = field(default_factory=list)

    @property
    def mask(self) -> list[bool]:
        """True for every non-padding position."""
        return [tok != 0 for tok in self.subwords]

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "subwords": self.subwords,
            "alignments": [[a.word_index, a.start, a.end] for a in self.alignments],
            "terms": [[t.surface, t.stem, t.word_index] for t in self.terms],
            "pieces": self.pieces,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnalyzedDocument":
        return cls(
            doc_id=obj["doc_id"],
            subwords=list(obj["subwords"]),
            alignments=[AlignmentTuple(*a) for a in obj["alignments"]],
            terms=[AnalyzerTerm(*t) for t in obj["terms"]],
            pieces=list(obj.get("pieces", [])),
        )


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    text = resources.files("regent").joinpath("data/stopwords_en.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def load_stopwords(path: str | Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word.lower())


def analyze(text: str, stopword_list: Iterable[str] | None = None) -> list[AnalyzerTerm]:
    """Split ``text`` into words and map each to its post-analysis stem.

    Stopwords and punctuation keep their slot (so word indices stay
    contiguous) but get an empty stem.
    """
    stops = default_stopwords() if stopword_list is None else frozenset(stopword_list)
    terms = []
    for i, word in enumerate(split_words(text)):
        lowered = word.lower()
        if lowered in stops or not any(ch.isalnum() for ch in word):
            s = ""
        else:
            s = stem(lowered)
        terms.append(AnalyzerTerm(word, s, i))
    return terms


def query_stems(text: str, stopword_list: Iterable[str] | None = None) -> list[str]:
    """Distinct non-empty stems of a query, in first-occurrence order."""
    seen: dict[str, None] = {}
    for term in analyze(text, stopword_list):
        if term.stem:
            seen.setdefault(term.stem, None)
    return list(seen)


class Vocabulary:
    """Subword vocabulary; token id is the position in ``tokens``."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        missing = [t for t in SPECIAL_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"vocabulary is missing special tokens: {missing}")
        if self.index[PAD] != 0:
            raise ValueError(f"{PAD} must have id 0")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    def segment(self, word: str) -> list[str] | None:
        """Greedy longest-match segmentation; None if the word cannot be covered."""
        word = word.lower()
        if len(word) > MAX_WORD_CHARS:
            return None
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            piece = None
            while end > start:
                cand = word[start:end]
                if start > 0:
                    cand = CONTINUATION + cand
                if cand in self.index:
                    piece = cand
                    break
                end -= 1
            if piece is None:
                return None
            pieces.append(piece)
            start = end
        return pieces


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary of special tokens, every seen character (plain and continued)
    and every lowercased word occurring at least ``min_count`` times."""
    chars: set[str] = set()
    counts: Counter[str] = Counter()
    for text in texts:
        for word in split_words(text):
            w = word.lower()
            counts[w] += 1
            chars.update(w)
    tokens = list(SPECIAL_TOKENS)
    tokens += sorted(chars)
    tokens += sorted(CONTINUATION + c for c in chars)
    have = set(tokens)
    tokens += sorted(w for w, c in counts.items() if c >= min_count and w not in have)
    return Vocabulary(tokens)


def _encode_words(words: Sequence[str], vocab: Vocabulary) -> list[tuple[list[int], list[str]]]:
    out = []
    for word in words:
        pieces = vocab.segment(word)
        if pieces is None:
            out.append(([vocab.unk_id], [UNK]))
        else:
            out.append(([vocab.index[p] for p in pieces], pieces))
    return out


def tokenize_subwords(
    terms: Sequence[AnalyzerTerm],
    vocab: Vocabulary,
    max_len: int = 512,
    doc_id: str = "",
) -> AnalyzedDocument:
    """Lay out ``[CLS] w_0 ... w_k [SEP] [PAD]...`` in exactly ``max_len`` slots.

    A word whose pieces do not all fit before the closing separator is
    dropped together with every word after it, so spans are never clipped.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [vocab.cls_id]
    pieces = [CLS]
    alignments = []
    kept_terms = []
    budget = max_len - 1  # reserve the final separator
    for term, (word_ids, word_pieces) in zip(terms, _encode_words([t.surface for t in terms], vocab)):
        if len(ids) + len(word_ids) > budget:
            break
        start = len(ids)
        ids.extend(word_ids)
        pieces.extend(word_pieces)
        alignments.append(AlignmentTuple(term.word_index, start, len(ids) - 1))
        kept_terms.append(term)
    ids.append(vocab.sep_id)
    pieces.append(SEP)
    pad = max_len - len(ids)
    ids.extend([vocab.pad_id] * pad)
    pieces.extend([PAD] * pad)
    return AnalyzedDocument(doc_id, ids, alignments, kept_terms, pieces)


def tokenize_pair(first: str, second: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """``[CLS] first [SEP] second [SEP]`` padded/truncated to ``max_len``.

    Used by the entity cross scorer; no alignment is tracked.
    """
    a = [i for ids, _ in _encode_words(split_words(first), vocab) for i in ids]
    b = [i for ids, _ in _encode_words(split_words(second), vocab) for i in ids]
    room = max_len - 3
    if room < 0:
        raise ValueError("max_len must be at least 3 for a pair")
    # trim the longer side first so the entity name survives long queries
    while len(a) + len(b) > room:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = [vocab.cls_id, *a, vocab.sep_id, *b, vocab.sep_id]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def analyze_document(
    doc_id: str,
    text: str,
    vocab: Vocabulary,
    max_len: int = 512,
    stopword_list: Iterable[str] | None = None,
) -> AnalyzedDocument:
    return tokenize_subwords(analyze(text, stopword_list), vocab, max_len, doc_id=doc_id)
