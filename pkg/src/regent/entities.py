"""Query-specific entity sets.

Pipeline per query: pool the entities linked in the top BM25 documents,
score every candidate with one of five scorers, keep the top 20, and for each
candidate document intersect its links with that set. Embeddings are scaled
by the entity's score before they reach the model.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .embeddings import DTYPE, Encoder, EncoderConfig, EntityEmbeddingTable, Linear
from .index import InvertedIndex, build_index, score_all
from .text import Vocabulary, tokenize_pair
from .trec import iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

SCORER_KINDS = ("supervised_cross", "bm25_descriptions", "max_sim", "centroid_sim", "logistic_regression")
SUPERVISED_KINDS = ("supervised_cross", "logistic_regression")


class NoQueryEntitiesError(ValueError):
    pass


@dataclass
class EntityLinks:
    docs: dict[str, list[str]] = field(default_factory=dict)
    queries: dict[str, list[str]] = field(default_factory=dict)

    @staticmethod
    def read(path: str | Path) -> dict[str, list[str]]:
        out = {}
        for obj in iter_jsonl(path, ("id", "entities")):
            out[str(obj["id"])] = [str(e) for e in obj["entities"]]
        return out

    @classmethod
    def load(cls, doc_path, query_path=None) -> "EntityLinks":
        return cls(cls.read(doc_path), cls.read(query_path) if query_path else {})

    def resolve(self, table: EntityEmbeddingTable) -> list[str]:
        """Drop ids without an embedding; returns the sorted unresolvable ids."""
        bad = set()
        for mapping in (self.docs, self.queries):
            for key, ents in mapping.items():
                keep = [e for e in ents if e in table]
                bad.update(e for e in ents if e not in table)
                mapping[key] = keep
        return sorted(bad)


@dataclass
class ScoredEntitySet:
    entity_ids: list[str]
    scores: np.ndarray
    scaled_embeddings: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(set(self.entity_ids)) != len(self.entity_ids):
            raise ValueError("entity ids must be distinct")
        if not (len(self.entity_ids) == len(self.scores) == len(self.scaled_embeddings)):
            raise ValueError("entity ids, scores and embeddings must align")

    def __len__(self) -> int:
        return len(self.entity_ids)

    @classmethod
    def build(cls, ids: Sequence[str], scores: Sequence[float], table: EntityEmbeddingTable) -> "ScoredEntitySet":
        ids = list(ids)
        s = np.asarray(scores, dtype=np.float64)
        emb = table.matrix(ids) if ids else np.zeros((0, table.dim))
        return cls(ids, s, emb * s[:, None])

    def score_of(self, entity_id: str) -> float:
        return float(self.scores[self.entity_ids.index(entity_id)])

    def to_records(self) -> list[dict]:
        return [{"id": e, "score": float(s)} for e, s in zip(self.entity_ids, self.scores)]


def candidate_pool(ranked_doc_ids: Sequence[str], links: EntityLinks, depth: int = 1000) -> set[str]:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    pool: set[str] = set()
    for doc_id in list(ranked_doc_ids)[:depth]:
        pool.update(links.docs.get(doc_id, ()))
    return pool


def pool_frequency(ranked_doc_ids: Sequence[str], links: EntityLinks, depth: int = 1000) -> dict[str, float]:
    """Fraction of the top-``depth`` documents linking each entity."""
    top = list(ranked_doc_ids)[:depth]
    counts = Counter(e for d in top for e in set(links.docs.get(d, ())))
    return {e: c / max(len(top), 1) for e, c in counts.items()}


def _cos01(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of rows of ``a`` against rows of ``b`` mapped to [0, 1]."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    cos = (a @ b.T) / np.maximum(na * nb.T, 1e-12)
    return (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0


def max_sim_scores(candidates: Sequence[str], query_entities: Sequence[str], table: EntityEmbeddingTable) -> dict[str, float]:
    if not query_entities:
        raise NoQueryEntitiesError(
            "max_sim needs entities linked to the query; use the supervised scorer "
            "or bm25_descriptions for queries without links"
        )
    cands = sorted(candidates)
    if not cands:
        return {}
    sims = _cos01(table.matrix(cands), table.matrix(list(query_entities))).max(axis=1)
    return dict(zip(cands, sims.tolist()))


def centroid_sim_scores(candidates: Sequence[str], query_entities: Sequence[str], table: EntityEmbeddingTable) -> dict[str, float]:
    if not query_entities:
        raise NoQueryEntitiesError(
            "centroid_sim needs entities linked to the query; use the supervised scorer "
            "or bm25_descriptions for queries without links"
        )
    cands = sorted(candidates)
    if not cands:
        return {}
    centroid = table.matrix(list(query_entities)).mean(axis=0, keepdims=True)
    return dict(zip(cands, _cos01(table.matrix(cands), centroid)[:, 0].tolist()))


def description_index(descriptions: Mapping[str, str]) -> InvertedIndex:
    return build_index(descriptions.items())


def bm25_description_scores(query_text: str, candidates: Sequence[str], desc_index: InvertedIndex) -> dict[str, float]:
    """BM25 of the query against each candidate's description, min-max scaled."""
    cands = sorted(candidates)
    raw = score_all(desc_index, query_text)
    vals = np.array([raw.get(e, 0.0) for e in cands])
    if not cands:
        return {}
    lo, hi = vals.min(), vals.max()
    norm = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    return dict(zip(cands, norm.tolist()))


# ---------------------------------------------------------------------------
# supervised scorers


def entity_name(entity_id: str) -> str:
    return entity_id.replace("_", " ")


class CrossEntityRanker(ClassifierMixin, BaseEstimator):
    """Text-pair scorer over ``[CLS] query [SEP] entity name [SEP]``.

    A small transformer encoder; the sequence-start state goes through a
    linear layer and a sigmoid.
    """

    def __init__(self, vocab=None, hidden_dim=32, num_layers=1, num_heads=2, max_len=32,
                 lr=1e-3, epochs=20, batch_size=16, dropout=0.0, seed=0):
        self.vocab = vocab
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.max_len = max_len
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.seed = seed

    def _tokens(self, pairs):
        ids = [tokenize_pair(q, entity_name(e), self.vocab, self.max_len) for q, e in pairs]
        return torch.as_tensor(ids, dtype=torch.long)

    def _logits(self, tokens):
        return self.head_(self.encoder_(tokens)[:, 0, :]).squeeze(-1)

    def fit(self, pairs: Sequence[tuple[str, str]], y, max_steps: int | None = None):
        if self.vocab is None:
            raise ValueError("CrossEntityRanker needs a vocabulary")
        y = np.asarray(y)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.classes_ = np.array([0, 1])
        cfg = EncoderConfig(len(self.vocab), self.hidden_dim, self.num_layers, self.num_heads,
                            self.max_len, dropout=self.dropout)
        g = torch.Generator().manual_seed(self.seed)
        self.encoder_ = Encoder(cfg)
        self.encoder_.reset_parameters(g)
        self.head_ = Linear(self.hidden_dim, 1)
        self.head_.reset_parameters(g)
        params = list(self.encoder_.parameters()) + list(self.head_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        X = self._tokens(pairs)
        target = torch.as_tensor(y, dtype=DTYPE)
        rng = np.random.default_rng(self.seed)
        step = 0
        self.encoder_.train()
        for _ in range(self.epochs):
            order = rng.permutation(len(target))
            for start in range(0, len(order), self.batch_size):
                idx = torch.as_tensor(order[start:start + self.batch_size])
                loss = torch.nn.functional.binary_cross_entropy_with_logits(self._logits(X[idx]), target[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
        self.n_steps_ = step
        self.encoder_.eval()
        return self

    def predict_proba(self, pairs):
        check_is_fitted(self, "encoder_")
        if len(pairs) == 0:
            return np.zeros((0, 2))
        with torch.no_grad():
            p = torch.sigmoid(self._logits(self._tokens(pairs))).numpy()
        return np.stack([1 - p, p], axis=1)

    def predict(self, pairs):
        return (self.predict_proba(pairs)[:, 1] >= 0.5).astype(int)

    def save(self, path):
        check_is_fitted(self, "encoder_")
        state = {f"encoder.{k}": v for k, v in self.encoder_.state_dict().items()}
        state.update({f"head.{k}": v for k, v in self.head_.state_dict().items()})
        arrays = {k: v.numpy() for k, v in state.items()}
        params = {k: v for k, v in self.get_params().items() if k != "vocab"}
        import json
        arrays["__meta__"] = np.frombuffer(json.dumps(params, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "CrossEntityRanker":
        import json
        with np.load(path) as data:
            params = json.loads(bytes(data["__meta__"]).decode())
            est = cls(vocab=vocab, **params)
            cfg = EncoderConfig(len(vocab), est.hidden_dim, est.num_layers, est.num_heads,
                                est.max_len, dropout=est.dropout)
            est.encoder_ = Encoder(cfg)
            est.head_ = Linear(est.hidden_dim, 1)
            est.encoder_.load_state_dict({k[8:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("encoder.")})
            est.head_.load_state_dict({k[5:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("head.")})
        est.encoder_.eval()
        est.classes_ = np.array([0, 1])
        return est


@dataclass
class EntityResources:
    """Everything the scorers may need; unused fields may stay None."""

    table: EntityEmbeddingTable
    links: EntityLinks
    desc_index: InvertedIndex | None = None
    cross_rankers: dict[int, CrossEntityRanker] | None = None
    logreg_models: dict[int, LogisticRegression] | None = None
    fold_of: dict[str, int] | None = None


@dataclass
class QueryRecord:
    query_id: str
    text: str
    entities: list[str] = field(default_factory=list)
    pool_frequency: dict[str, float] = field(default_factory=dict)


def logistic_features(query: QueryRecord, candidates: Sequence[str], res: EntityResources) -> np.ndarray:
    """Per candidate: [max_sim, centroid_sim, description BM25, pool frequency]."""
    cands = sorted(candidates)
    if query.entities:
        ms = max_sim_scores(cands, query.entities, res.table)
        cs = centroid_sim_scores(cands, query.entities, res.table)
    else:
        ms = cs = dict.fromkeys(cands, 0.5)
    if res.desc_index is not None:
        bd = bm25_description_scores(query.text, cands, res.desc_index)
    else:
        bd = dict.fromkeys(cands, 0.0)
    rows = [[ms[e], cs[e], bd[e], query.pool_frequency.get(e, 0.0)] for e in cands]
    return np.asarray(rows, dtype=np.float64).reshape(len(cands), 4)


def _fold_model(models, res: EntityResources, query_id: str, what: str):
    if not models:
        raise ValueError(f"scorer requires trained {what} weights; run train-entity-ranker first")
    fold = (res.fold_of or {}).get(query_id)
    if fold is None or fold not in models:
        # query was never held out (not part of the fold plan): any fold model is leakage-free
        fold = min(models)
    return models[fold]


def score_entities(kind: str, query: QueryRecord, candidates: Iterable[str], res: EntityResources) -> dict[str, float]:
    cands = sorted(set(candidates))
    missing = [e for e in cands if e not in res.table]
    if missing:
        raise KeyError(f"no embedding for entities: {missing}")
    if kind == "max_sim":
        return max_sim_scores(cands, query.entities, res.table)
    if kind == "centroid_sim":
        return centroid_sim_scores(cands, query.entities, res.table)
    if kind == "bm25_descriptions":
        if res.desc_index is None:
            raise ValueError("bm25_descriptions needs an entity description corpus")
        return bm25_description_scores(query.text, cands, res.desc_index)
    if kind == "supervised_cross":
        model = _fold_model(res.cross_rankers, res, query.query_id, "cross-encoder ranker")
        p = model.predict_proba([(query.text, e) for e in cands])[:, 1] if cands else []
        return dict(zip(cands, map(float, p)))
    if kind == "logistic_regression":
        model = _fold_model(res.logreg_models, res, query.query_id, "logistic regression")
        if not cands:
            return {}
        p = model.predict_proba(logistic_features(query, cands, res))[:, 1]
        return dict(zip(cands, map(float, p)))
    raise ValueError(f"unknown scorer kind {kind!r}; choose from {SCORER_KINDS}")


def select_top_k(scores: Mapping[str, float], k: int, table: EntityEmbeddingTable) -> ScoredEntitySet:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(scores.items(), key=lambda x: (-x[1], x[0]))[:k]
    return ScoredEntitySet.build([e for e, _ in ranked], [s for _, s in ranked], table)


def document_entity_set(doc_id: str, links: EntityLinks, query_set: ScoredEntitySet) -> ScoredEntitySet:
    doc_ents = set(links.docs.get(doc_id, ()))
    keep = [i for i, e in enumerate(query_set.entity_ids) if e in doc_ents]
    return ScoredEntitySet(
        [query_set.entity_ids[i] for i in keep],
        query_set.scores[keep],
        query_set.scaled_embeddings[keep] if keep else query_set.scaled_embeddings[:0],
    )


def build_query_entity_sets(
    kind: str,
    query: QueryRecord,
    ranked_doc_ids: Sequence[str],
    res: EntityResources,
    depth: int = 1000,
    k: int = 20,
    fallback_k: int = 5,
) -> tuple[ScoredEntitySet, ScoredEntitySet]:
    """Returns ``(query-relevant set, query-side set E_q)``."""
    pool = candidate_pool(ranked_doc_ids, res.links, depth)
    query.pool_frequency = pool_frequency(ranked_doc_ids, res.links, depth)
    own = [e for e in dict.fromkeys(query.entities) if e in res.table]
    scores = score_entities(kind, query, pool | set(own), res)
    relevant = select_top_k({e: scores[e] for e in pool}, k, res.table) if pool else ScoredEntitySet.build([], [], res.table)
    if own:
        q_set = ScoredEntitySet.build(own, [scores[e] for e in own], res.table)
    else:
        n = min(fallback_k, len(relevant))
        q_set = ScoredEntitySet(relevant.entity_ids[:n], relevant.scores[:n], relevant.scaled_embeddings[:n])
    return relevant, q_set


def entity_training_pairs(
    queries: Mapping[str, str],
    runs,
    links: EntityLinks,
    qrels: Mapping[str, Mapping[str, int]],
    depth: int = 1000,
) -> list[tuple[str, str, int]]:
    """(query_id, entity_id, label): label 1 iff the entity is linked in a relevant document."""
    pairs = []
    for qid in queries:
        pool = candidate_pool(runs.doc_ids(qid), links, depth) if qid in runs else set()
        positive = set()
        for doc_id, grade in qrels.get(qid, {}).items():
            if grade >= 1:
                positive.update(links.docs.get(doc_id, ()))
        pairs.extend((qid, e, int(e in positive)) for e in sorted(pool))
    return pairs


def train_entity_ranker(
    pairs: Sequence[tuple[str, str, int]],
    folds,
    fit_fold,
) -> dict[int, object]:
    """Train one scorer per fold on the queries outside that fold.

    ``fit_fold(train_pairs)`` returns a fitted scorer; ``folds`` is a
    :class:`regent.training.FoldPlan`.
    """
    for _, _, label in pairs:
        if label not in (0, 1):
            raise ValueError(f"label {label!r} is not 0 or 1")
    models = {}
    for fold in range(folds.n_folds):
        held_out = set(folds.queries_in(fold))
        train = [p for p in pairs if p[0] not in held_out]
        if not any(label for _, _, label in train):
            raise ValueError(f"fold {fold}: training queries have no positive entities")
        models[fold] = fit_fold(train)
    return models


def write_entity_sets(rows: Iterable[tuple[str, ScoredEntitySet, ScoredEntitySet]], path) -> None:
    write_jsonl(
        ({"query_id": qid, "entities": rel.to_records(), "query_entities": qs.to_records()} for qid, rel, qs in rows),
        path,
    )


def read_entity_sets(path, table: EntityEmbeddingTable) -> dict[str, tuple[ScoredEntitySet, ScoredEntitySet]]:
    out = {}
    for obj in iter_jsonl(path, ("query_id", "entities")):
        rel = ScoredEntitySet.build([e["id"] for e in obj["entities"]], [e["score"] for e in obj["entities"]], table)
        qe = obj.get("query_entities", [])
        qs = ScoredEntitySet.build([e["id"] for e in qe], [e["score"] for e in qe], table)
        out[str(obj["query_id"])] = (rel, qs)
    return out
