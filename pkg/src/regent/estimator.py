"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import mean_average_precision
from .features import FeatureBuilder
from .model import AblationFlags, RegentConfig, RegentModel
from .training import TrainConfig, score_pairs, train_model
from .trec import RankedRun


def _check_pairs(X) -> list[tuple[str, str]]:
    pairs = [tuple(map(str, p)) for p in X]
    if any(len(p) != 2 for p in pairs):
        raise ValueError("X must be a sequence of (query_id, doc_id) pairs")
    return pairs


def _variant_name(flags: AblationFlags) -> str:
    for name in ("full", "no_entities", "no_bm25", "document_level_bm25"):
        if AblationFlags.variant(name) == flags:
            return name
    raise ValueError(f"checkpoint flags {flags} match no named variant")


class RegentReranker(BaseEstimator):
    """Re-ranker over ``(query_id, doc_id)`` pairs.

    ``featurizer`` turns a pair into model inputs. ``fit`` treats every pair
    with label 1 as a positive and samples balanced negatives from the other
    pairs of the same query each epoch.
    """

    def __init__(self, featurizer: FeatureBuilder | None = None, hidden_dim=64, num_heads=4,
                 encoder_layers=2, cross_layers=2, max_len=512, query_max_len=64, d_ff=None,
                 dropout=0.1, encoder_mode="trainable_transformer", fusion="learned_sigmoid",
                 variant="full", lr=2e-5, warmup_steps=1000, batch_size=8, epochs=10,
                 patience=3, clip_norm=1.0, seed=0):
        self.featurizer = featurizer
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.encoder_layers = encoder_layers
        self.cross_layers = cross_layers
        self.max_len = max_len
        self.query_max_len = query_max_len
        self.d_ff = d_ff
        self.dropout = dropout
        self.encoder_mode = encoder_mode
        self.fusion = fusion
        self.variant = variant
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.seed = seed

    def _model_config(self) -> RegentConfig:
        fb = self.featurizer
        return RegentConfig(
            vocab_size=len(fb.vocab), entity_dim=fb.entity_dim, hidden_dim=self.hidden_dim,
            num_heads=self.num_heads, encoder_layers=self.encoder_layers,
            cross_layers=self.cross_layers, max_len=self.max_len, query_max_len=self.query_max_len,
            d_ff=self.d_ff, dropout=self.dropout, encoder_mode=self.encoder_mode,
            fusion=self.fusion, flags=AblationFlags.variant(self.variant),
        )

    @staticmethod
    def _grouped(pairs, y):
        qrels: dict[str, dict[str, int]] = defaultdict(dict)
        run = RankedRun("candidates")
        per_query: dict[str, list[str]] = defaultdict(list)
        for (q, d), label in zip(pairs, y):
            qrels[q][d] = int(label)
            per_query[q].append(d)
        for q, docs in per_query.items():
            run.add(q, ((d, -i) for i, d in enumerate(docs)))
        return dict(qrels), run

    def fit(self, X, y, eval_set: tuple | None = None):
        if self.featurizer is None:
            raise ValueError("RegentReranker needs a featurizer")
        pairs = _check_pairs(X)
        y = np.asarray(y)
        if len(y) != len(pairs):
            raise ValueError(f"X has {len(pairs)} pairs but y has {len(y)} labels")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        qrels, candidates = self._grouped(pairs, y)
        val = None
        if eval_set is not None:
            vq, vc = self._grouped(_check_pairs(eval_set[0]), eval_set[1])
            qrels.update(vq)
            for q in vc:
                candidates.add(q, vc[q])
            val = sorted(vq)
        tc = TrainConfig(self.lr, self.warmup_steps, self.batch_size, self.epochs,
                         self.patience, self.clip_norm, self.seed)
        result = train_model(self._model_config(), self.featurizer, qrels, candidates,
                             sorted({q for q, _ in pairs}), tc, val)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.asarray(score_pairs(self.model_, self.featurizer, _check_pairs(X)))

    def rank(self, X) -> RankedRun:
        pairs = _check_pairs(X)
        run = RankedRun("regent")
        by_q: dict[str, list] = defaultdict(list)
        for (q, d), s in zip(pairs, self.predict(pairs)):
            by_q[q].append((d, float(s)))
        for q, items in by_q.items():
            run.add(q, items)
        return run

    def score(self, X, y) -> float:
        """Mean average precision of the predicted ranking."""
        pairs = _check_pairs(X)
        qrels, _ = self._grouped(pairs, y)
        return mean_average_precision(self.rank(pairs), qrels)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        self.model_.save(path, {"best_epoch": self.best_epoch_})

    @classmethod
    def load(cls, path, featurizer: FeatureBuilder) -> "RegentReranker":
        model, extra = RegentModel.load(path)
        c = model.config
        est = cls(featurizer, hidden_dim=c.hidden_dim, num_heads=c.num_heads,
                  encoder_layers=c.encoder_layers, cross_layers=c.cross_layers, max_len=c.max_len,
                  query_max_len=c.query_max_len, d_ff=c.d_ff, dropout=c.dropout,
                  encoder_mode=c.encoder_mode, fusion=c.fusion, variant=_variant_name(c.flags))
        est.model_ = model
        est.best_epoch_ = extra.get("best_epoch")
        return est
