"""Acceptance suite: one test per primary criterion, one PASS/FAIL line each.

Lines are printed as they are decided and repeated in the pytest terminal
summary. ``python3 tests/test_acceptance.py`` runs the suite on its own.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from corpora import QUERIES, TEN_DOCS, piece_vocab
from entity_cases import check_laws, scorer_ranges
from oracles import finite_difference, forward_oracle, relative_error
from regent.evaluation import per_query_metrics
from regent.index import bm25_term_score, build_index, query_stems, retrieve, token_relevance_vector
from regent.model import FUSION_KINDS, backward
from regent.text import analyze_document
from regent.trec import RankedRun, read_qrels
from synth import fit, prepared, split_map
from tiny import ALL_CASES, tiny_batch, tiny_model
from workbench import make_workspace, pipeline

DATA = Path(__file__).parent / "data"
RESULTS: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_gradient_correctness():
    torch.set_num_threads(1)
    start = time.perf_counter()
    worst, where = 0.0, None
    upstream = torch.tensor([1.0, -0.7], dtype=torch.float64)
    for fusion, flags in ALL_CASES:
        model, batch = tiny_model(fusion, flags), tiny_batch()
        grads = backward(model, batch, upstream)
        fd = finite_difference(model, batch, upstream, h=1e-4)
        for name, g in grads.items():
            err = relative_error(g, fd[name])
            if err > worst:
                worst, where = err, f"{fusion}/{flags}/{name}"
    elapsed = time.perf_counter() - start
    verdict(
        "gradient correctness",
        worst <= 1e-4 and elapsed < 60,
        f"{len(ALL_CASES)} cases, worst relative error {worst:.2e} ({where}), {elapsed:.1f}s",
    )


def test_forward_oracle():
    worst = 0.0
    for fusion, flags in ALL_CASES:
        model, batch = tiny_model(fusion, flags), tiny_batch()
        with torch.no_grad():
            got = model.score(batch).numpy()
        worst = max(worst, float(np.abs(got - forward_oracle(model, batch)).max()))
    verdict("forward oracle", worst <= 1e-10, f"max abs difference {worst:.2e} over {len(ALL_CASES)} cases")


def test_bm25_propagation():
    idx = build_index(TEN_DOCS.items())
    vocab = piece_vocab()
    problems = []
    checked = 0
    for q in QUERIES.values():
        stems = query_stems(q)
        scores = dict(retrieve(idx, q, 1000))
        for d, text in TEN_DOCS.items():
            doc = analyze_document(d, text, vocab, 64)
            r = token_relevance_vector(idx, q, doc)
            covered = np.zeros(len(r), dtype=bool)
            by_word = {t.word_index: t for t in doc.terms}
            for a in doc.alignments:
                stem = by_word[a.word_index].stem
                if stem in stems:
                    covered[a.start : a.end + 1] = True
                    expected = bm25_term_score(idx, stem, d)
                    if not np.all(r[a.start : a.end + 1] == expected):
                        problems.append(f"{d}/{stem}: subword scores differ")
            if np.any(r[~covered] != 0):
                problems.append(f"{d}: score outside matched words")
            matched = {by_word[a.word_index].stem for a in doc.alignments if covered[a.start]}
            total = 0.0
            for s in stems:
                if s in matched:
                    total += bm25_term_score(idx, s, d)
            if total != scores.get(d, 0.0):
                problems.append(f"{d}: sum {total!r} != retrieve {scores.get(d, 0.0)!r}")
            checked += 1
    verdict("BM25 propagation", not problems, f"{checked} (query, doc) pairs; " + ("; ".join(problems[:3]) or "exact"))


def test_metric_parity():
    run = RankedRun.read(DATA / "metric_run.txt")
    qrels = read_qrels(DATA / "metric_qrels.txt")
    reference = json.loads((DATA / "metric_trec_eval.json").read_text())
    got = per_query_metrics(run, qrels)
    bad = [
        f"{q}/{m}" for q, ms in reference.items() for m, v in ms.items() if round(got[q][m], 4) != round(v, 4)
    ]
    verdict("metric parity", not bad, f"{len(reference)} queries x 3 metrics" + (f"; mismatched {bad}" if bad else ""))


def test_overfit_smoke():
    start = time.perf_counter()
    c, p = prepared(n_queries=4, signal="mixed")
    result = fit(c, p, "learned_sigmoid", "full")
    elapsed = time.perf_counter() - start
    first = next((h["epoch"] for h in result.history if h["train_map"] == 1.0), None)
    heldout = result.history[-1]["heldout_map"]
    verdict(
        "overfit smoke test",
        first is not None and heldout >= 0.9 and elapsed < 300,
        f"train MAP 1.000 at epoch {first}, held-out MAP {heldout:.3f}, {elapsed:.1f}s",
    )


def _heldout(signal, variant, fusion="learned_sigmoid"):
    c, p = prepared(n_queries=8, signal=signal)
    model = fit(c, p, fusion, variant, track=False).model
    return split_map(model, c, p, c.splits["heldout"])


def test_ablation_direction():
    ent_full, ent_ablated = _heldout("entity", "full"), _heldout("entity", "no_entities")
    lex_full, lex_ablated = _heldout("lexical", "full"), _heldout("lexical", "no_bm25")
    ok = ent_full - ent_ablated >= 0.3 and lex_full - lex_ablated >= 0.3
    verdict(
        "ablation direction",
        ok,
        f"entity-only {ent_full:.3f} vs no_entities {ent_ablated:.3f}; "
        f"lexical-only {lex_full:.3f} vs no_bm25 {lex_ablated:.3f}",
    )


def test_fusion_robustness():
    maps = {f: _heldout("mixed", "full", f) for f in FUSION_KINDS}
    span = max(maps.values()) - min(maps.values())
    verdict("fusion robustness", span <= 0.10, f"span {span:.3f}; " + ", ".join(f"{k} {v:.3f}" for k, v in maps.items()))


def test_entity_pipeline_laws():
    broken = [(s, p) for s in range(1000) for p in check_laws(s)]
    ranges = scorer_ranges()
    out_of_range = [k for k, (lo, hi, n) in ranges.items() if not (n and 0.0 <= lo <= hi <= 1.0)]
    verdict(
        "entity pipeline",
        not broken and not out_of_range and len(ranges) == 5,
        f"1000 randomized cases, {len(broken)} violations; scorer ranges "
        + ", ".join(f"{k} [{lo:.3f}, {hi:.3f}]" for k, (lo, hi, _) in ranges.items()),
    )


def test_determinism(tmp_path, capsys):
    digests = []
    for name in ("first", "second"):
        cfg = make_workspace(tmp_path / name)
        pipeline(capsys, cfg)
        digests.append((tmp_path / name / "out" / "regent.run").read_bytes())
    verdict("determinism", digests[0] == digests[1] and len(digests[0]) > 0, f"{len(digests[0])} bytes per run file")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
