"""Per (query, document) model inputs and batching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .embeddings import DTYPE, EntityEmbeddingTable
from .entities import EntityLinks, ScoredEntitySet, document_entity_set
from .index import InvertedIndex, bm25_doc_score, token_relevance_vector
from .text import AnalyzedDocument, Vocabulary, analyze, analyze_document, tokenize_subwords


@dataclass
class PairFeatures:
    query_id: str
    doc_id: str
    query_tokens: np.ndarray
    doc_tokens: np.ndarray
    relevance: np.ndarray
    query_entities: np.ndarray  # [n_q, d_e], already score-scaled
    doc_entities: np.ndarray  # [n_d, d_e]
    bm25: float
    query_entity_ids: tuple[str, ...] = ()
    doc_entity_ids: tuple[str, ...] = ()


class FeatureBuilder:
    """Caches analyzed documents and builds :class:`PairFeatures` on demand."""

    def __init__(
        self,
        index: InvertedIndex,
        vocab: Vocabulary,
        corpus: Mapping[str, str],
        queries: Mapping[str, str],
        links: EntityLinks,
        entity_sets: Mapping[str, tuple[ScoredEntitySet, ScoredEntitySet]],
        entity_dim: int,
        max_len: int = 512,
        query_max_len: int = 64,
        stopword_list=None,
    ):
        self.index = index
        self.vocab = vocab
        self.corpus = corpus
        self.queries = queries
        self.links = links
        self.entity_sets = entity_sets
        self.entity_dim = entity_dim
        self.max_len = max_len
        self.query_max_len = query_max_len
        self.stops = stopword_list
        self._docs: dict[str, AnalyzedDocument] = {}
        self._queries: dict[str, np.ndarray] = {}

    def document(self, doc_id: str) -> AnalyzedDocument:
        if doc_id not in self._docs:
            if doc_id not in self.corpus:
                raise KeyError(f"document {doc_id!r} is not in the corpus")
            self._docs[doc_id] = analyze_document(doc_id, self.corpus[doc_id], self.vocab, self.max_len, self.stops)
        return self._docs[doc_id]

    def query_tokens(self, query_id: str) -> np.ndarray:
        if query_id not in self._queries:
            doc = tokenize_subwords(analyze(self.queries[query_id], self.stops), self.vocab, self.query_max_len)
            self._queries[query_id] = np.asarray(doc.subwords, dtype=np.int64)
        return self._queries[query_id]

    def __call__(self, query_id: str, doc_id: str) -> PairFeatures:
        doc = self.document(doc_id)
        text = self.queries[query_id]
        empty = ScoredEntitySet([], np.zeros(0), np.zeros((0, self.entity_dim)))
        relevant, q_set = self.entity_sets.get(query_id, (empty, empty))
        d_set = document_entity_set(doc_id, self.links, relevant)
        return PairFeatures(
            query_id,
            doc_id,
            self.query_tokens(query_id),
            np.asarray(doc.subwords, dtype=np.int64),
            token_relevance_vector(self.index, text, doc, self.stops),
            np.asarray(q_set.scaled_embeddings, dtype=np.float64).reshape(-1, self.entity_dim),
            np.asarray(d_set.scaled_embeddings, dtype=np.float64).reshape(-1, self.entity_dim),
            bm25_doc_score(self.index, text, doc_id, self.stops),
            tuple(q_set.entity_ids),
            tuple(d_set.entity_ids),
        )


def _trim(rows: Sequence[np.ndarray]) -> int:
    """Longest non-padding prefix over a batch (padding id is 0)."""
    n = 1
    for r in rows:
        nz = np.flatnonzero(r)
        if nz.size:
            n = max(n, int(nz[-1]) + 1)
    return n


def _pad_entities(mats: Sequence[np.ndarray], dim: int):
    n = max((m.shape[0] for m in mats), default=0)
    out = np.zeros((len(mats), n, dim))
    mask = np.zeros((len(mats), n), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return torch.as_tensor(out, dtype=DTYPE), torch.as_tensor(mask)


def collate(pairs: Sequence[PairFeatures], entity_dim: int) -> dict[str, torch.Tensor]:
    """Stack pairs into the batch dict the model consumes.

    Trailing padding shared by every row is dropped; masked positions do not
    influence scores, so this only saves work.
    """
    nq = _trim([p.query_tokens for p in pairs])
    nd = _trim([p.doc_tokens for p in pairs])
    qt = np.zeros((len(pairs), nq), dtype=np.int64)
    dt = np.zeros((len(pairs), nd), dtype=np.int64)
    rel = np.zeros((len(pairs), nd))
    for i, p in enumerate(pairs):
        q = p.query_tokens[:nq]
        qt[i, : len(q)] = q
        d = p.doc_tokens[:nd]
        dt[i, : len(d)] = d
        rel[i, : len(d)] = p.relevance[:nd]
    eq, eq_mask = _pad_entities([p.query_entities for p in pairs], entity_dim)
    ed, ed_mask = _pad_entities([p.doc_entities for p in pairs], entity_dim)
    return {
        "query_tokens": torch.as_tensor(qt),
        "doc_tokens": torch.as_tensor(dt),
        "relevance": torch.as_tensor(rel, dtype=DTYPE),
        "query_entities": eq,
        "query_entity_mask": eq_mask,
        "doc_entities": ed,
        "doc_entity_mask": ed_mask,
        "doc_bm25": torch.as_tensor([p.bm25 for p in pairs], dtype=DTYPE),
    }
