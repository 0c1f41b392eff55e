"""In-memory end-to-end wiring shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from .embeddings import EntityEmbeddingTable
from .entities import (
    CrossEntityRanker,
    EntityLinks,
    EntityResources,
    QueryRecord,
    ScoredEntitySet,
    build_query_entity_sets,
    description_index,
    entity_training_pairs,
    logistic_features,
    pool_frequency,
    train_entity_ranker,
)
from .features import FeatureBuilder
from .index import InvertedIndex, build_index, retrieve_run
from .model import AblationFlags, RegentConfig
from .text import Vocabulary, build_vocab
from .training import FoldPlan, TrainConfig, sub_seed
from .trec import RankedRun

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    index: InvertedIndex
    vocab: Vocabulary
    candidates: RankedRun
    entity_sets: dict[str, tuple[ScoredEntitySet, ScoredEntitySet]]
    builder: FeatureBuilder
    unresolved: list[str] = field(default_factory=list)


def collection_vocab(corpus: Mapping[str, str], queries: Mapping[str, str], extra: Sequence[str] = ()) -> Vocabulary:
    return build_vocab([*corpus.values(), *queries.values(), *extra])


def train_supervised_scorers(
    kind: str,
    queries: Mapping[str, str],
    candidates: RankedRun,
    res: EntityResources,
    qrels,
    plan: FoldPlan,
    vocab: Vocabulary,
    depth: int = 1000,
    seed: int = 0,
    epochs: int = 20,
):
    """Per-fold entity scorers; fills ``res`` in place and returns the models."""
    pairs = entity_training_pairs(queries, candidates, res.links, qrels, depth)
    res.fold_of = dict(plan.assignments)
    if kind == "supervised_cross":
        def fit(train):
            ranker = CrossEntityRanker(vocab=vocab, epochs=epochs, seed=sub_seed(seed, "entity_ranker"))
            return ranker.fit([(queries[q], e) for q, e, _ in train], [y for _, _, y in train])

        res.cross_rankers = train_entity_ranker(pairs, plan, fit)
        return res.cross_rankers
    if kind == "logistic_regression":
        records = {}
        for qid, text in queries.items():
            rec = QueryRecord(qid, text, list(res.links.queries.get(qid, [])))
            rec.pool_frequency = pool_frequency(candidates.doc_ids(qid), res.links, depth)
            records[qid] = rec

        def fit(train):
            X, y = [], []
            for q, e, label in train:
                X.append(logistic_features(records[q], [e], res)[0])
                y.append(label)
            return LogisticRegression(random_state=0).fit(np.asarray(X), np.asarray(y))

        res.logreg_models = train_entity_ranker(pairs, plan, fit)
        return res.logreg_models
    raise ValueError(f"{kind} is not a trained scorer")


def prepare(
    corpus: Mapping[str, str],
    queries: Mapping[str, str],
    links: EntityLinks,
    table: EntityEmbeddingTable,
    scorer: str = "max_sim",
    descriptions: Mapping[str, str] | None = None,
    vocab: Vocabulary | None = None,
    stopword_list=None,
    depth: int = 1000,
    top_k_entities: int = 20,
    max_len: int = 512,
    query_max_len: int = 64,
    resources: EntityResources | None = None,
    index: InvertedIndex | None = None,
) -> Prepared:
    unresolved = links.resolve(table)
    if unresolved:
        log.warning("%d linked entities have no embedding and are ignored", len(unresolved))
    index = index or build_index(corpus.items(), stopword_list)
    candidates = retrieve_run(index, dict(queries), depth, stopword_list)
    vocab = vocab or collection_vocab(corpus, queries, [e.replace("_", " ") for e in table.entries])
    res = resources or EntityResources(table, links)
    if scorer == "bm25_descriptions" and res.desc_index is None:
        if descriptions is None:
            raise ValueError("bm25_descriptions needs an entity description corpus")
        res.desc_index = description_index(descriptions)
    entity_sets = {}
    for qid, text in queries.items():
        rec = QueryRecord(qid, text, list(links.queries.get(qid, [])))
        entity_sets[qid] = build_query_entity_sets(scorer, rec, candidates.doc_ids(qid), res, depth, top_k_entities)
    builder = FeatureBuilder(
        index, vocab, corpus, queries, links, entity_sets, table.dim, max_len, query_max_len, stopword_list
    )
    return Prepared(index, vocab, candidates, entity_sets, builder, unresolved)


def synthetic_model_config(vocab_size: int, entity_dim: int, fusion: str = "learned_sigmoid",
                           variant: str = "full", **overrides) -> RegentConfig:
    """Desk-scale model used on synthetic collections."""
    kw = dict(
        vocab_size=vocab_size,
        entity_dim=entity_dim,
        hidden_dim=32,
        num_heads=4,
        encoder_layers=1,
        cross_layers=2,
        max_len=32,
        query_max_len=8,
        dropout=0.1,
        fusion=fusion,
        flags=AblationFlags.variant(variant),
    )
    kw.update(overrides)
    return RegentConfig(**kw)


SYNTHETIC_TRAIN = TrainConfig(lr=3e-3, warmup_steps=10, batch_size=8, epochs=10, patience=3, seed=0)
