"""trec_eval-style metrics, difficulty analyses and evaluation reports.

Relevance for MAP and P@k is grade >= 1. nDCG uses the raw grade as gain.
Queries are averaged over every judged query that has a relevant document,
whether or not the run contains it (the ``-c`` convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .index import InvertedIndex, score_all
from .text import query_stems
from .trec import RankedRun

BIN_EDGES = (0.0, 5.0, 25.0, 75.0, 95.0, 100.0)
BIN_LABELS = ("0-5", "5-25", "25-75", "75-95", "95-100")
METRICS = ("map", "ndcg_cut_20", "P_20")


def _ranked(run_for_query) -> list[str]:
    return [d if isinstance(d, str) else d[0] for d in run_for_query]


def average_precision(ranking: Sequence, judged: Mapping[str, int]) -> float:
    n_rel = sum(1 for g in judged.values() if g >= 1)
    if n_rel == 0:
        return 0.0
    hits, total = 0, 0.0
    for i, doc_id in enumerate(_ranked(ranking), start=1):
        if judged.get(doc_id, 0) >= 1:
            hits += 1
            total += hits / i
    return total / n_rel


def ndcg_at_k(ranking: Sequence, judged: Mapping[str, int], k: int = 20) -> float:
    dcg = sum(
        judged.get(d, 0) / math.log2(i + 1)
        for i, d in enumerate(_ranked(ranking)[:k], start=1)
        if judged.get(d, 0) > 0
    )
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


def precision_at_k(ranking: Sequence, judged: Mapping[str, int], k: int = 20) -> float:
    return sum(1 for d in _ranked(ranking)[:k] if judged.get(d, 0) >= 1) / k


def evaluable_queries(qrels: Mapping[str, Mapping[str, int]]) -> list[str]:
    return sorted(q for q, j in qrels.items() if any(g >= 1 for g in j.values()))


def per_query_metrics(run: RankedRun, qrels, k: int = 20) -> dict[str, dict[str, float]]:
    out = {}
    for qid in evaluable_queries(qrels):
        ranking = run[qid]
        out[qid] = {
            "map": average_precision(ranking, qrels[qid]),
            f"ndcg_cut_{k}": ndcg_at_k(ranking, qrels[qid], k),
            f"P_{k}": precision_at_k(ranking, qrels[qid], k),
        }
    return out


def aggregate(per_query: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    if not per_query:
        return {}
    names = next(iter(per_query.values())).keys()
    return {m: float(np.mean([v[m] for v in per_query.values()])) for m in names}


def mean_average_precision(run: RankedRun, qrels) -> float:
    qids = evaluable_queries(qrels)
    if not qids:
        return 0.0
    return float(np.mean([average_precision(run[q], qrels[q]) for q in qids]))


# ---------------------------------------------------------------------------
# difficulty


@dataclass
class DifficultyBins:
    percentiles: dict[str, float]
    assignments: dict[str, str]

    def members(self, label: str) -> list[str]:
        return sorted(q for q, b in self.assignments.items() if b == label)


def _bin_of(p: float) -> str:
    for lo, hi, label in zip(BIN_EDGES, BIN_EDGES[1:], BIN_LABELS):
        if lo <= p < hi:
            return label
    return BIN_LABELS[-1]


def difficulty_bins(baseline_run: RankedRun, qrels, k: int = 20) -> DifficultyBins:
    """Bin queries by the percentile of their baseline nDCG@k."""
    qids = evaluable_queries(qrels)
    if len(qids) < 5:
        raise ValueError(f"difficulty binning needs at least 5 queries, got {len(qids)}")
    scores = {q: ndcg_at_k(baseline_run[q], qrels[q], k) for q in qids}
    order = sorted(qids, key=lambda q: (scores[q], q))
    n = len(order)
    pct: dict[str, float] = {}
    first_pos: dict[float, int] = {}
    for pos, q in enumerate(order):
        first = first_pos.setdefault(scores[q], pos)
        pct[q] = 100.0 * first / n
    return DifficultyBins(pct, {q: _bin_of(p) for q, p in pct.items()})


def wig(query_text: str, index: InvertedIndex, top_k: int = 5, stopword_list=None) -> float:
    """Weighted information gain of the top-``top_k`` BM25 scores over the corpus mean."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    stems = query_stems(query_text, stopword_list)
    scores = score_all(index, query_text, stopword_list)
    if not scores:
        raise ValueError(f"query {query_text!r} matches no documents; WIG is undefined")
    mean = sum(scores.values()) / len(scores)
    top = sorted(scores.values(), reverse=True)[:top_k]
    return sum((s - mean) / len(stems) for s in top) / len(top)


def wig_terciles(values: Mapping[str, float]) -> dict[str, str]:
    """Lowest third -> hard, middle -> medium, top third -> easy."""
    order = sorted(values, key=lambda q: (values[q], q))
    n = len(order)
    out = {}
    for i, q in enumerate(order):
        out[q] = "hard" if 3 * i < n else ("medium" if 3 * i < 2 * n else "easy")
    return out


def rank_distribution(run: RankedRun, qrels, grade: int) -> dict:
    """Rank statistics of all documents judged with exactly ``grade``."""
    if grade < 1:
        raise ValueError("grade must be >= 1")
    ranks = []
    for qid, judged in qrels.items():
        positions = {d: i for i, d in enumerate(run.doc_ids(qid), start=1)}
        miss = len(positions) + 1
        ranks.extend(positions.get(d, miss) for d, g in judged.items() if g == grade)
    if not ranks:
        return {"empty": True, "count": 0, "mean_rank": None, "top_10": 0, "top_50": 0}
    arr = np.asarray(ranks)
    return {
        "empty": False,
        "count": int(arr.size),
        "mean_rank": float(arr.mean()),
        "top_10": int((arr <= 10).sum()),
        "top_50": int((arr <= 50).sum()),
    }


def evaluation_report(
    run: RankedRun,
    qrels,
    baseline_run: RankedRun | None = None,
    index: InvertedIndex | None = None,
    queries: Mapping[str, str] | None = None,
    k: int = 20,
    wig_top_k: int = 5,
    stopword_list=None,
) -> dict:
    per_query = per_query_metrics(run, qrels, k)
    report = {"per_query": per_query, "aggregate": aggregate(per_query), "bins": {}}
    grades = sorted({g for j in qrels.values() for g in j.values() if g >= 1})
    report["rank_distribution"] = {str(g): rank_distribution(run, qrels, g) for g in grades}
    if baseline_run is not None and len(per_query) >= 5:
        bins = difficulty_bins(baseline_run, qrels, k)
        report["bins"]["bm25_ndcg"] = {
            label: {"queries": bins.members(label), **aggregate({q: per_query[q] for q in bins.members(label)})}
            for label in BIN_LABELS
        }
    if index is not None and queries is not None:
        values = {}
        for q in per_query:
            try:
                values[q] = wig(queries[q], index, wig_top_k, stopword_list)
            except (KeyError, ValueError):
                continue
        if values:
            terciles = wig_terciles(values)
            report["bins"]["wig"] = {
                label: {
                    "queries": sorted(q for q, b in terciles.items() if b == label),
                    **aggregate({q: per_query[q] for q, b in terciles.items() if b == label}),
                }
                for label in ("easy", "medium", "hard")
            }
            for q, v in values.items():
                per_query[q]["wig"] = v
    return report
