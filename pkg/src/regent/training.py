"""Example construction, the optimisation loop and query-level cross-validation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .evaluation import mean_average_precision
from .features import FeatureBuilder, collate
from .model import RegentConfig, RegentModel
from .trec import RankedRun

log = logging.getLogger(__name__)


def sub_seed(seed: int, name: str) -> int:
    """Stable named child seed, so each random consumer has its own stream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    doc_id: str
    label: int
    source: str  # "qrels_positive" | "bm25_negative"


class FoldPlan:
    """Query-level assignment to ``n_folds`` folds."""

    def __init__(self, assignments: Mapping[str, int], n_folds: int = 5):
        self.assignments = dict(assignments)
        self.n_folds = n_folds
        for f in range(n_folds):
            if not self.queries_in(f):
                raise ValueError(f"fold {f} has no queries")
        bad = {q: f for q, f in self.assignments.items() if not 0 <= f < n_folds}
        if bad:
            raise ValueError(f"fold indices out of range: {bad}")

    @classmethod
    def create(cls, query_ids: Iterable[str], n_folds: int = 5, seed: int = 0) -> "FoldPlan":
        qids = sorted(set(query_ids))
        if len(qids) < n_folds:
            raise ValueError(f"{len(qids)} queries cannot fill {n_folds} folds")
        order = np.random.default_rng(seed).permutation(len(qids))
        return cls({qids[i]: pos % n_folds for pos, i in enumerate(order)}, n_folds)

    def queries_in(self, fold: int) -> list[str]:
        return sorted(q for q, f in self.assignments.items() if f == fold)

    def validation_fold(self, fold: int) -> int:
        return (fold + 1) % self.n_folds

    def split(self, fold: int) -> tuple[list[str], list[str], list[str]]:
        """``(train, validation, test)`` query ids for one outer fold."""
        val = self.validation_fold(fold)
        train = sorted(q for q, f in self.assignments.items() if f not in (fold, val))
        return train, self.queries_in(val), self.queries_in(fold)

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "assignments": dict(sorted(self.assignments.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldPlan":
        return cls(d["assignments"], d["n_folds"])


def build_examples(
    qrels: Mapping[str, Mapping[str, int]],
    runs: RankedRun,
    seed: int,
    query_ids: Iterable[str] | None = None,
    warnings: list | None = None,
) -> list[TrainingExample]:
    """All positives plus an equal number of uniformly sampled BM25 negatives."""
    rng = np.random.default_rng(seed)
    out = []
    qids = sorted(query_ids) if query_ids is not None else sorted(qrels)
    for qid in qids:
        judged = qrels.get(qid, {})
        positives = sorted(d for d, g in judged.items() if g >= 1)
        if not positives:
            msg = f"query {qid} has no relevant documents; excluded"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        eligible = [d for d in runs.doc_ids(qid) if judged.get(d, 0) < 1]
        n_neg = len(positives)
        if len(eligible) < n_neg:
            msg = f"query {qid}: only {len(eligible)} negatives for {n_neg} positives"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            negatives = eligible
        else:
            negatives = [eligible[i] for i in sorted(rng.choice(len(eligible), n_neg, replace=False))]
        out.extend(TrainingExample(qid, d, 1, "qrels_positive") for d in positives)
        out.extend(TrainingExample(qid, d, 0, "bm25_negative") for d in negatives)
    return out


@dataclass
class OptimizerState:
    base_lr: float = 2e-5
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)


def lr_schedule(state: OptimizerState, step: int | None = None) -> float:
    step = state.step if step is None else step
    if step < 1:
        raise ValueError("lr_schedule is defined for step >= 1")
    if state.warmup_steps <= 0:
        return state.base_lr
    return state.base_lr * min(1.0, step / state.warmup_steps)


class NonFiniteLossError(RuntimeError):
    pass


def bce_with_logits(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.binary_cross_entropy_with_logits(scores, labels, reduction="mean")


def clip_gradients(grads: Mapping[str, torch.Tensor], clip_norm: float) -> float:
    """Scale gradients in place to global norm ``clip_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > clip_norm:
        scale = clip_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


def adam_update(model: RegentModel, grads: Mapping[str, torch.Tensor], state: OptimizerState) -> float:
    state.step += 1
    lr = lr_schedule(state)
    b1, b2 = state.beta1, state.beta2
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, g in grads.items():
            m = state.first_moment.setdefault(name, torch.zeros_like(g))
            v = state.second_moment.setdefault(name, torch.zeros_like(g))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**state.step)
            v_hat = v / (1 - b2**state.step)
            params[name].sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return lr


def train_step(
    model: RegentModel,
    batch: Mapping[str, torch.Tensor],
    labels,
    state: OptimizerState,
    examples: Sequence | None = None,
) -> dict:
    """One BCE step; returns ``{step, lr, loss, grad_norm}``."""
    model.train()
    labels = torch.as_tensor(labels, dtype=torch.float64)
    model.zero_grad(set_to_none=True)
    loss = bce_with_logits(model(batch), labels)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} on examples {list(examples or [])}")
    loss.backward()
    grads = {
        n: (p.grad if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
        if p.requires_grad
    }
    norm = clip_gradients(grads, state.clip_norm)
    lr = adam_update(model, grads, state)
    return {"step": state.step, "lr": lr, "loss": loss.item(), "grad_norm": norm}


def score_pairs(
    model: RegentModel, builder: FeatureBuilder, pairs: Sequence[tuple[str, str]], batch_size: int = 32
) -> list[float]:
    model.eval()
    out: list[float] = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = [builder(q, d) for q, d in pairs[i : i + batch_size]]
            out.extend(model.score(collate(chunk, builder.entity_dim)).tolist())
    return out


def rerank(
    model: RegentModel,
    builder: FeatureBuilder,
    candidates: RankedRun,
    query_ids: Iterable[str] | None = None,
    tag: str = "regent",
    batch_size: int = 32,
    into: RankedRun | None = None,
) -> RankedRun:
    """Rescore each query's candidate list; the document set is unchanged."""
    run = into if into is not None else RankedRun(tag)
    for qid in sorted(query_ids) if query_ids is not None else candidates.query_ids():
        docs = candidates.doc_ids(qid)
        scores = score_pairs(model, builder, [(qid, d) for d in docs], batch_size)
        run.add(qid, zip(docs, scores))
    return run


@dataclass
class TrainConfig:
    lr: float = 2e-5
    warmup_steps: int = 1000
    batch_size: int = 8
    epochs: int = 10
    patience: int = 3
    clip_norm: float = 1.0
    seed: int = 0


class EarlyStopping:
    """Tracks the best validation value; ``update`` returns True when it is time to stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    model: RegentModel
    history: list[dict]
    best_epoch: int
    log: list[dict]


def train_model(
    config: RegentConfig,
    builder: FeatureBuilder,
    qrels,
    candidates: RankedRun,
    train_queries: Sequence[str],
    tc: TrainConfig,
    val_queries: Sequence[str] | None = None,
    on_epoch: Callable[[int, RegentModel], dict] | None = None,
) -> TrainResult:
    """Fit one model.

    Negatives are resampled every epoch from the candidate list. With
    validation queries the checkpoint with the best validation MAP is kept
    and training stops after ``patience`` epochs without strict improvement;
    without them the final weights are returned.
    """
    torch.manual_seed(sub_seed(tc.seed, "dropout"))
    model = RegentModel(config, seed=sub_seed(tc.seed, "init"))
    state = OptimizerState(tc.lr, tc.warmup_steps, tc.clip_norm)
    order_rng = np.random.default_rng(sub_seed(tc.seed, "order"))
    stopper = EarlyStopping(tc.patience)
    best_state = None
    history, step_log = [], []
    for epoch in range(1, tc.epochs + 1):
        examples = build_examples(qrels, candidates, sub_seed(tc.seed, f"negatives:{epoch}"), train_queries)
        if not examples:
            raise ValueError("no training examples: every training query lacks relevant documents")
        perm = order_rng.permutation(len(examples))
        for i in range(0, len(perm), tc.batch_size):
            chunk = [examples[j] for j in perm[i : i + tc.batch_size]]
            batch = collate([builder(e.query_id, e.doc_id) for e in chunk], builder.entity_dim)
            step_log.append(train_step(model, batch, [e.label for e in chunk], state, chunk))
        entry = {"epoch": epoch, "loss": float(np.mean([s["loss"] for s in step_log[-math.ceil(len(perm) / tc.batch_size):]]))}
        if on_epoch is not None:
            entry.update(on_epoch(epoch, model))
        if val_queries:
            val_run = rerank(model, builder, candidates, val_queries)
            entry["val_map"] = mean_average_precision(val_run, {q: qrels.get(q, {}) for q in val_queries})
            stop = stopper.update(epoch, entry["val_map"])
            if stopper.best_epoch == epoch:
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            history.append(entry)
            log.info("epoch %d loss %.4f val MAP %.4f", epoch, entry["loss"], entry["val_map"])
            if stop:
                break
        else:
            history.append(entry)
            log.info("epoch %d loss %.4f", epoch, entry["loss"])
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    best_epoch = stopper.best_epoch if val_queries else history[-1]["epoch"]
    return TrainResult(model, history, best_epoch, step_log)


@dataclass
class CrossValidationResult:
    plan: FoldPlan
    models: dict[int, RegentModel]
    histories: dict[int, list[dict]]
    run: RankedRun
    logs: dict[int, list[dict]]


def cross_validate(
    config: RegentConfig,
    builder: FeatureBuilder,
    qrels,
    candidates: RankedRun,
    plan: FoldPlan,
    tc: TrainConfig,
    tag: str = "regent",
) -> CrossValidationResult:
    models, histories, logs = {}, {}, {}
    run = RankedRun(tag)
    for fold in range(plan.n_folds):
        train_q, val_q, test_q = plan.split(fold)
        fold_tc = TrainConfig(**{**tc.__dict__, "seed": sub_seed(tc.seed, f"fold:{fold}")})
        result = train_model(config, builder, qrels, candidates, train_q, fold_tc, val_q)
        models[fold], histories[fold], logs[fold] = result.model, result.history, result.log
        rerank(result.model, builder, candidates, [q for q in test_q if q in candidates], into=run)
    return CrossValidationResult(plan, models, histories, run, logs)


def write_training_log(entries: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({k: e[k] for k in ("step", "lr", "loss", "grad_norm")}) + "\n")
