import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from regent.estimator import RegentReranker
from synth import prepared


@pytest.fixture(scope="module")
def data():
    c, p = prepared(n_queries=4)
    pairs, labels = [], []
    for q in c.queries:
        for d in p.candidates.doc_ids(q):
            pairs.append((q, d))
            labels.append(c.qrels[q].get(d, 0))
    return c, p, pairs, np.array(labels)


def small(p, **kw):
    base = dict(hidden_dim=16, num_heads=2, encoder_layers=1, cross_layers=1, max_len=32, query_max_len=8,
                lr=3e-3, warmup_steps=5, epochs=2, variant="no_bm25", seed=1)
    base.update(kw)
    return RegentReranker(p.builder, **base)


def test_fit_predict_save_load(data, tmp_path):
    c, p, pairs, y = data
    est = small(p).fit(pairs, y)
    scores = est.predict(pairs)
    assert scores.shape == (len(pairs),) and np.all(np.isfinite(scores))
    assert 0.0 <= est.score(pairs, y) <= 1.0
    est.save(tmp_path / "m.npz")
    back = RegentReranker.load(tmp_path / "m.npz", p.builder)
    assert back.variant == "no_bm25" and back.hidden_dim == 16
    np.testing.assert_array_equal(back.predict(pairs), scores)


def test_rank_keeps_pairs(data):
    c, p, pairs, y = data
    run = small(p, epochs=1).fit(pairs, y).rank(pairs)
    assert sorted(run.query_ids()) == sorted(c.queries)
    assert sum(len(run.doc_ids(q)) for q in run.query_ids()) == len(pairs)


def test_eval_set_drives_early_stopping(data):
    c, p, pairs, y = data
    tr = [i for i, (q, _) in enumerate(pairs) if q in c.splits["train"]]
    va = [i for i in range(len(pairs)) if i not in tr]
    est = small(p, epochs=2).fit([pairs[i] for i in tr], y[tr], eval_set=([pairs[i] for i in va], y[va]))
    assert all("val_map" in h for h in est.history_)
    assert est.best_epoch_ in (1, 2)


def test_validation_and_clone(data):
    c, p, pairs, y = data
    with pytest.raises(NotFittedError):
        small(p).predict(pairs)
    with pytest.raises(ValueError, match="0 or 1"):
        small(p).fit(pairs, np.full(len(pairs), 2))
    with pytest.raises(ValueError, match="labels"):
        small(p).fit(pairs, y[:-1])
    with pytest.raises(ValueError, match="featurizer"):
        RegentReranker().fit(pairs, y)
    assert clone(small(p)).get_params()["variant"] == "no_bm25"
