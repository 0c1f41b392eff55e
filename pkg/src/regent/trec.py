"""TREC run/qrels file formats and JSON-lines ingestion helpers."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Mapping

Qrels = dict[str, dict[str, int]]


class FormatError(ValueError):
    """A malformed input line; carries the 1-based line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class RankedRun:
    """Per-query ranked lists of ``(doc_id, score)``.

    Lists are kept in rank order; :meth:`add` sorts by descending score with
    ascending doc id as the tie-break, which is also the order written out.
    """

    def __init__(self, tag: str = "regent"):
        self.tag = tag
        self.rankings: dict[str, list[tuple[str, float]]] = {}

    def add(self, query_id: str, scored: Iterable[tuple[str, float]]) -> None:
        items = [(d, float(s)) for d, s in scored]
        if len({d for d, _ in items}) != len(items):
            raise ValueError(f"duplicate doc ids in ranking for query {query_id}")
        items.sort(key=lambda x: (-x[1], x[0]))
        self.rankings[query_id] = items

    def __getitem__(self, query_id: str) -> list[tuple[str, float]]:
        return self.rankings.get(query_id, [])

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.rankings

    def __iter__(self) -> Iterator[str]:
        return iter(self.rankings)

    def __len__(self) -> int:
        return len(self.rankings)

    def doc_ids(self, query_id: str) -> list[str]:
        return [d for d, _ in self[query_id]]

    def query_ids(self) -> list[str]:
        return sorted(self.rankings)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def to_text(self) -> str:
        lines = []
        for qid in self.query_ids():
            for rank, (doc_id, score) in enumerate(self.rankings[qid], start=1):
                lines.append(f"{qid} Q0 {doc_id} {rank} {score:.10g} {self.tag}")
        return "".join(line + "\n" for line in lines)

    @classmethod
    def read(cls, path: str | Path) -> "RankedRun":
        per_query: dict[str, list[tuple[int, str, float]]] = {}
        tag = "run"
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 6:
                    raise FormatError(path, lineno, "expected 'qid Q0 docid rank score tag'")
                qid, _, doc_id, rank, score, tag = parts
                try:
                    per_query.setdefault(qid, []).append((int(rank), doc_id, float(score)))
                except ValueError as exc:
                    raise FormatError(path, lineno, str(exc)) from None
        run = cls(tag)
        for qid, rows in per_query.items():
            rows.sort()
            run.rankings[qid] = [(d, s) for _, d, s in rows]
        return run


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(path, lineno, "expected 'qid 0 docid grade'")
            qid, _, doc_id, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise FormatError(path, lineno, f"grade {grade!r} is not an integer") from None
            if g < 0:
                raise FormatError(path, lineno, "grades must be non-negative")
            judged = qrels.setdefault(qid, {})
            if doc_id in judged:
                raise FormatError(path, lineno, f"duplicate judgment for ({qid}, {doc_id})")
            judged[doc_id] = g
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc_id} {qrels[qid][doc_id]}\n")


def iter_jsonl(path: str | Path, required: tuple[str, ...] = ()) -> Iterator[dict]:
    for _, obj in iter_jsonl_numbered(path, required):
        yield obj


def iter_jsonl_numbered(path: str | Path, required: tuple[str, ...] = ()) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(path, lineno, "expected a JSON object")
            missing = [k for k in required if k not in obj]
            if missing:
                raise FormatError(path, lineno, f"missing field(s) {missing}")
            yield lineno, obj


def read_corpus(path: str | Path) -> dict[str, str]:
    """``{"doc_id", "text"}`` JSON-lines into an ordered dict."""
    corpus: dict[str, str] = {}
    for lineno, obj in iter_jsonl_numbered(path, ("doc_id", "text")):
        doc_id = str(obj["doc_id"])
        if doc_id in corpus:
            raise FormatError(path, lineno, f"duplicate doc_id {doc_id!r}")
        corpus[doc_id] = str(obj["text"])
    return corpus


def read_queries(path: str | Path) -> dict[str, str]:
    """``{"query_id", "text"}`` JSON-lines into an ordered dict."""
    return {str(o["query_id"]): str(o["text"]) for o in iter_jsonl(path, ("query_id", "text"))}


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
