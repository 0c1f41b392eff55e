"""Small synthetic retrieval collections with planted relevance signal.

Every query has an *anchor* word contained once in each of its documents (so
BM25 retrieves exactly those documents) and a *focus* word. Signals:

* lexical: relevant documents repeat the focus word, others never use it;
* entity: relevant documents link entities from a cluster around the query's
  centre vector, others link entities from the opposite direction.

``signal`` picks ``"mixed"`` (both), ``"lexical"`` or ``"entity"``. All
documents of a collection have the same length, so a missing lexical signal
leaves BM25 scores tied.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EntityEmbeddingTable
from .entities import EntityLinks
from .text import stem
from .trec import RankedRun, write_jsonl, write_qrels

SIGNALS = ("mixed", "lexical", "entity")


@dataclass
class SyntheticCollection:
    corpus: dict[str, str]
    queries: dict[str, str]
    qrels: dict[str, dict[str, int]]
    links: EntityLinks
    table: EntityEmbeddingTable
    descriptions: dict[str, str]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": d / "corpus.jsonl",
            "queries": d / "queries.jsonl",
            "qrels": d / "qrels.txt",
            "doc_links": d / "doc_links.jsonl",
            "query_links": d / "query_links.jsonl",
            "embeddings": d / "entity_embeddings.txt",
            "descriptions": d / "entity_descriptions.jsonl",
        }
        write_jsonl(({"doc_id": k, "text": v} for k, v in self.corpus.items()), paths["corpus"])
        write_jsonl(({"query_id": k, "text": v} for k, v in self.queries.items()), paths["queries"])
        write_qrels(self.qrels, paths["qrels"])
        write_jsonl(({"id": k, "entities": v} for k, v in self.links.docs.items()), paths["doc_links"])
        write_jsonl(({"id": k, "entities": v} for k, v in self.links.queries.items()), paths["query_links"])
        self.table.save(paths["embeddings"])
        write_jsonl(({"doc_id": k, "text": v} for k, v in self.descriptions.items()), paths["descriptions"])
        return paths


def pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` distinct pronounceable words with distinct stems that are not stopwords."""
    cons, vows = "bdfgklmnprtvz", "aiou"
    syll = [c + v for c in cons for v in vows]
    pool = ["".join(p) for p in itertools.product(syll, repeat=3)]
    picked = rng.permutation(len(pool))
    out, stems = [], set()
    for i in picked:
        w = pool[i]
        s = stem(w)
        if s in stems:
            continue
        stems.add(s)
        out.append(w)
        if len(out) == n:
            return out
    raise ValueError("not enough pseudo words")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_collection(
    n_queries: int = 8,
    docs_per_query: int = 20,
    relevant_per_query: int = 5,
    signal: str = "mixed",
    doc_length: int = 14,
    entity_dim: int = 16,
    cluster_size: int = 6,
    noise_entities: int = 8,
    topic_spread: float = 1.0,
    seed: int = 0,
    split_at: int | None = None,
) -> SyntheticCollection:
    if signal not in SIGNALS:
        raise ValueError(f"signal must be one of {SIGNALS}")
    if not 1 <= relevant_per_query < docs_per_query:
        raise ValueError("need at least one relevant and one non-relevant document per query")
    rng = np.random.default_rng(seed)
    words = pseudo_words(2 * n_queries + 60, rng)
    anchors, focus, filler = words[:n_queries], words[n_queries : 2 * n_queries], words[2 * n_queries :]
    corpus, queries, qrels = {}, {}, {}
    doc_links, query_links, vectors, descriptions = {}, {}, {}, {}
    lexical = signal in ("mixed", "lexical")
    entity = signal in ("mixed", "entity")
    # topic centres share a common direction, so "links near the query's topic"
    # is a signal that transfers across queries
    shared = _unit(rng.normal(size=entity_dim))
    for qi in range(n_queries):
        qid = f"q{qi + 1:02d}"
        queries[qid] = f"{anchors[qi]} {focus[qi]}"
        centre = _unit(shared + topic_spread * _unit(rng.normal(size=entity_dim)))
        cluster = [f"Topic_{qi + 1:02d}_{j}" for j in range(cluster_size)]
        noise = [f"Other_{qi + 1:02d}_{j}" for j in range(noise_entities)]
        for e in cluster:
            vectors[e] = _unit(centre + 0.3 * rng.normal(size=entity_dim))
            descriptions[e] = f"{focus[qi]} " + " ".join(rng.choice(filler, 4))
        for e in noise:
            vectors[e] = _unit(-centre + 0.3 * rng.normal(size=entity_dim))
            descriptions[e] = " ".join(rng.choice(filler, 5))
        query_links[qid] = sorted(rng.choice(cluster, 2, replace=False).tolist())
        relevant = set(rng.choice(docs_per_query, relevant_per_query, replace=False).tolist())
        qrels[qid] = {}
        for j in range(docs_per_query):
            did = f"{qid}_d{j:02d}"
            is_rel = j in relevant
            body = [anchors[qi]]
            if lexical and is_rel:
                body += [focus[qi]] * int(rng.integers(2, 4))
            body += rng.choice(filler, doc_length - len(body)).tolist()
            rng.shuffle(body)
            corpus[did] = " ".join(body)
            if entity:
                source = cluster if is_rel else noise
            else:
                source = cluster + noise
            doc_links[did] = sorted(rng.choice(source, 2, replace=False).tolist())
            qrels[qid][did] = 1 if is_rel else 0
    ids = list(queries)
    cut = split_at if split_at is not None else len(ids) // 2
    return SyntheticCollection(
        corpus,
        queries,
        qrels,
        EntityLinks(doc_links, query_links),
        EntityEmbeddingTable(vectors),
        descriptions,
        {"train": ids[:cut], "heldout": ids[cut:]},
    )


def oracle_run(collection: SyntheticCollection) -> RankedRun:
    """Perfect ranking, handy for checking evaluation plumbing."""
    run = RankedRun("oracle")
    for qid, judged in collection.qrels.items():
        run.add(qid, ((d, float(g)) for d, g in judged.items()))
    return run
