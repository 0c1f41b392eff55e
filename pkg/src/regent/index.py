"""Inverted index, Okapi BM25 and the per-subword relevance vector."""
from __future__ import annotations

import math
import struct
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .text import AnalyzedDocument, analyze, query_stems
from .trec import RankedRun

K1 = 1.2
B = 0.75
_MAGIC = b"RGNTIDX1"


class InvertedIndex:
    """Postings ``stem -> [(doc_id, tf), ...]`` plus length statistics.

    Immutable once built; use :func:`build_index` to construct.
    """

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_lengths: dict[str, int],
        k1: float = K1,
        b: float = B,
    ):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.k1 = k1
        self.b = b
        self.doc_count = len(doc_lengths)
        self.avg_doc_length = (
            sum(doc_lengths.values()) / self.doc_count if self.doc_count else 0.0
        )
        self._tf = {
            stem: {doc_id: tf for doc_id, tf in plist} for stem, plist in postings.items()
        }

    def df(self, stem: str) -> int:
        return len(self.postings.get(stem, ()))

    def idf(self, stem: str) -> float:
        df = self.df(stem)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def tf(self, stem: str, doc_id: str) -> int:
        return self._tf.get(stem, {}).get(doc_id, 0)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.doc_lengths

    # persistence: fixed field order, little-endian
    def save(self, path: str | Path) -> None:
        doc_ids = list(self.doc_lengths)
        pos = {d: i for i, d in enumerate(doc_ids)}
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<dd", self.k1, self.b))
            fh.write(struct.pack("<I", len(doc_ids)))
            for d in doc_ids:
                _write_str(fh, d)
                fh.write(struct.pack("<I", self.doc_lengths[d]))
            fh.write(struct.pack("<I", len(self.postings)))
            for stem in sorted(self.postings):
                plist = self.postings[stem]
                _write_str(fh, stem)
                fh.write(struct.pack("<I", len(plist)))
                for d, tf in plist:
                    fh.write(struct.pack("<II", pos[d], tf))

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise ValueError(f"{path} is not a regent index file")
            k1, b = struct.unpack("<dd", fh.read(16))
            (n_docs,) = struct.unpack("<I", fh.read(4))
            doc_ids, lengths = [], {}
            for _ in range(n_docs):
                d = _read_str(fh)
                (lengths[d],) = struct.unpack("<I", fh.read(4))
                doc_ids.append(d)
            (n_terms,) = struct.unpack("<I", fh.read(4))
            postings = {}
            for _ in range(n_terms):
                stem = _read_str(fh)
                (n_post,) = struct.unpack("<I", fh.read(4))
                plist = []
                for _ in range(n_post):
                    i, tf = struct.unpack("<II", fh.read(8))
                    plist.append((doc_ids[i], tf))
                postings[stem] = plist
        return cls(postings, lengths, k1, b)


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def build_index(
    corpus: Iterable[tuple[str, str]],
    stopword_list: Iterable[str] | None = None,
    k1: float = K1,
    b: float = B,
) -> InvertedIndex:
    stops = None if stopword_list is None else frozenset(stopword_list)
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc_id, text in corpus:
        if doc_id in lengths:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        stems = [t.stem for t in analyze(text, stops) if t.stem]
        lengths[doc_id] = len(stems)
        for stem, tf in Counter(stems).items():
            postings.setdefault(stem, []).append((doc_id, tf))
    return InvertedIndex(postings, lengths, k1, b)


def bm25_term_score(index: InvertedIndex, stem: str, doc_id: str) -> float:
    if doc_id not in index.doc_lengths:
        raise KeyError(f"document {doc_id!r} is not indexed")
    tf = index.tf(stem, doc_id)
    if tf == 0:
        return 0.0
    norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[doc_id] / index.avg_doc_length)
    return index.idf(stem) * tf * (index.k1 + 1.0) / (tf + norm)


def bm25_doc_score(
    index: InvertedIndex, query_text: str, doc_id: str, stopword_list: Iterable[str] | None = None
) -> float:
    return sum(bm25_term_score(index, s, doc_id) for s in query_stems(query_text, stopword_list))


def score_all(
    index: InvertedIndex, query_text: str, stopword_list: Iterable[str] | None = None
) -> dict[str, float]:
    """BM25 score of every document matching at least one query stem."""
    scores: dict[str, float] = {}
    for stem in query_stems(query_text, stopword_list):
        for doc_id, _ in index.postings.get(stem, ()):
            scores[doc_id] = scores.get(doc_id, 0.0) + bm25_term_score(index, stem, doc_id)
    return scores


def retrieve(
    index: InvertedIndex,
    query_text: str,
    k: int = 1000,
    stopword_list: Iterable[str] | None = None,
) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_all(index, query_text, stopword_list)
    ranked = sorted(scores.items(), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def retrieve_run(
    index: InvertedIndex,
    queries: dict[str, str],
    k: int = 1000,
    stopword_list: Iterable[str] | None = None,
    tag: str = "bm25",
) -> RankedRun:
    run = RankedRun(tag)
    for qid, text in queries.items():
        run.add(qid, retrieve(index, text, k, stopword_list))
    return run


def token_relevance_vector(
    index: InvertedIndex,
    query_text: str,
    doc: AnalyzedDocument,
    stopword_list: Iterable[str] | None = None,
) -> np.ndarray:
    """The vector r: each matched word's BM25 score copied to all its subwords."""
    wanted = set(query_stems(query_text, stopword_list))
    r = np.zeros(len(doc.subwords), dtype=np.float64)
    if not wanted:
        return r
    by_word = {t.word_index: t for t in doc.terms}
    cache: dict[str, float] = {}
    for span in doc.alignments:
        stem = by_word[span.word_index].stem
        if stem in wanted:
            if stem not in cache:
                cache[stem] = bm25_term_score(index, stem, doc.doc_id)
            r[span.start : span.end + 1] = cache[stem]
    return r


def iter_matched_spans(
    doc: AnalyzedDocument, stems: Iterable[str]
) -> Iterator[tuple[str, int, int]]:
    wanted = set(stems)
    by_word = {t.word_index: t for t in doc.terms}
    for span in doc.alignments:
        s = by_word[span.word_index].stem
        if s in wanted:
            yield s, span.start, span.end
