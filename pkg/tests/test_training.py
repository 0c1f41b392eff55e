import json
import math

import pytest
import torch

from regent import training
from regent.features import collate
from regent.pipeline import SYNTHETIC_TRAIN, synthetic_model_config
from regent.training import (
    EarlyStopping,
    FoldPlan,
    NonFiniteLossError,
    OptimizerState,
    TrainConfig,
    adam_update,
    bce_with_logits,
    build_examples,
    clip_gradients,
    cross_validate,
    lr_schedule,
    sub_seed,
    train_step,
    write_training_log,
)
from regent.trec import RankedRun
from synth import fit, prepared
from tiny import tiny_batch, tiny_model


def test_sub_seed_is_stable_and_named():
    assert sub_seed(0, "init") == sub_seed(0, "init")
    assert len({sub_seed(0, "init"), sub_seed(0, "order"), sub_seed(1, "init")}) == 3
    assert 0 <= sub_seed(123, "x") < 2**31


def test_fold_plan_ten_queries_five_folds():
    plan = FoldPlan.create([f"q{i}" for i in range(10)], 5, seed=0)
    tests = []
    for f in range(5):
        train, val, test = plan.split(f)
        # the 8 non-test queries are divided into training and early-stopping validation
        assert len(test) == 2 and len(val) == 2 and len(train) == 6
        assert not (set(train) | set(val)) & set(test)
        assert not set(train) & set(val)
        tests += test
    assert sorted(tests) == sorted(f"q{i}" for i in range(10))
    assert FoldPlan.from_dict(json.loads(json.dumps(plan.to_dict()))).assignments == plan.assignments
    with pytest.raises(ValueError):
        FoldPlan.create(["a", "b"], 5)


def candidates_for(qid, n):
    run = RankedRun()
    run.add(qid, ((f"c{i:03d}", float(n - i)) for i in range(n)))
    return run


def test_build_examples_balanced():
    qrels = {"q": {"c000": 1, "c001": 1, "c050": 2, "c002": 0}}
    run = candidates_for("q", 103)
    ex = build_examples(qrels, run, seed=0)
    pos = [e for e in ex if e.label == 1]
    neg = [e for e in ex if e.label == 0]
    assert len(pos) == 3 and len(neg) == 3
    assert {e.source for e in pos} == {"qrels_positive"} and {e.source for e in neg} == {"bm25_negative"}
    # negatives come from the candidate list, judged non-relevant or unjudged
    assert all(e.doc_id in run.doc_ids("q") and qrels["q"].get(e.doc_id, 0) < 1 for e in neg)
    assert build_examples(qrels, run, seed=0) == ex


def test_build_examples_shortfall_and_no_positives():
    qrels = {"q": {"c000": 1, "c001": 1, "c002": 1}, "z": {"c000": 0}}
    run = candidates_for("q", 5)
    warnings = []
    ex = build_examples(qrels, run, seed=0, warnings=warnings)
    assert sum(e.label == 0 for e in ex) == 2
    assert sum(e.label == 1 for e in ex) == 3
    assert all(e.query_id == "q" for e in ex)
    assert any("only 2 negatives" in w for w in warnings)
    assert any("query z" in w for w in warnings)


def test_lr_schedule_examples():
    s = OptimizerState(base_lr=2e-5, warmup_steps=1000)
    assert lr_schedule(s, 500) == pytest.approx(1e-5)
    assert lr_schedule(s, 1000) == pytest.approx(2e-5)
    assert lr_schedule(s, 5000) == pytest.approx(2e-5)
    assert lr_schedule(s, 1) == pytest.approx(2e-8)
    with pytest.raises(ValueError):
        lr_schedule(s, 0)


def test_bce_zero_score_is_ln2():
    loss = bce_with_logits(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_zero_gradient_leaves_parameters_but_advances_step():
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    state = OptimizerState()
    adam_update(model, {n: torch.zeros_like(p) for n, p in model.named_parameters()}, state)
    assert state.step == 1
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_clipping_bounds_global_norm():
    g = {"a": torch.full((3,), 4.0, dtype=torch.float64), "b": torch.full((2,), -3.0, dtype=torch.float64)}
    pre = clip_gradients(g, 1.0)
    assert pre == pytest.approx(math.sqrt(48 + 18))
    post = math.sqrt(sum(float((v * v).sum()) for v in g.values()))
    assert post <= 1.0 + 1e-6
    small = {"a": torch.tensor([0.1], dtype=torch.float64)}
    clip_gradients(small, 1.0)
    assert small["a"].item() == 0.1


def test_train_step_reports_clipped_norm_and_lr():
    model = tiny_model(dropout=0.0)
    state = OptimizerState(base_lr=1e-3, warmup_steps=0, clip_norm=1e-3)
    out = train_step(model, tiny_batch(), [1.0, 0.0], state)
    assert set(out) == {"step", "lr", "loss", "grad_norm"}
    assert out["step"] == 1 and out["lr"] == 1e-3 and out["grad_norm"] > 1e-3


def test_repeated_example_loss_strictly_decreases():
    torch.manual_seed(0)
    model = tiny_model(dropout=0.0)
    state = OptimizerState(base_lr=1e-3, warmup_steps=0)
    batch = tiny_batch()
    losses = [train_step(model, batch, [1.0, 0.0], state)["loss"] for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_loss_names_examples():
    model = tiny_model()
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="q-bad"):
        train_step(model, tiny_batch(), [1.0, 0.0], OptimizerState(), ["q-bad/d1", "q-bad/d2"])


def test_early_stopping_sequence():
    stop = EarlyStopping(patience=2)
    decisions = [stop.update(e, v) for e, v in enumerate([0.2, 0.3, 0.3, 0.25], start=1)]
    assert decisions == [False, False, False, True]
    assert stop.best_epoch == 2 and stop.best == 0.3


def test_training_log_format(tmp_path):
    entries = [{"step": 1, "lr": 1e-3, "loss": 0.7, "grad_norm": 2.0, "extra": 1}]
    write_training_log(entries, tmp_path / "log.jsonl")
    line = json.loads((tmp_path / "log.jsonl").read_text())
    assert line == {"step": 1, "lr": 1e-3, "loss": 0.7, "grad_norm": 2.0}


SMALL = TrainConfig(lr=3e-3, warmup_steps=5, batch_size=8, epochs=2, patience=3, seed=4)


def test_training_is_reproducible():
    c, p = prepared(n_queries=4)
    a = fit(c, p, tc=SMALL, track=False)
    b = fit(c, p, tc=SMALL, track=False)
    assert [s["loss"] for s in a.log] == [s["loss"] for s in b.log]
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    assert a.best_epoch == 2 and [h["epoch"] for h in a.history] == [1, 2]


def test_cross_validation_out_of_fold_and_leak_free(monkeypatch):
    torch.set_num_threads(1)
    c, p = prepared(n_queries=10)
    plan = FoldPlan.create(c.queries, 5, seed=1)
    seen = []
    real = training.build_examples

    def spy(qrels, runs, seed, query_ids=None, warnings=None):
        seen.append(sorted(query_ids))
        return real(qrels, runs, seed, query_ids, warnings)

    monkeypatch.setattr(training, "build_examples", spy)
    cfg = synthetic_model_config(len(p.vocab), c.table.dim, hidden_dim=16)
    tc = TrainConfig(lr=3e-3, warmup_steps=5, batch_size=8, epochs=1, patience=3, seed=0)
    cv = cross_validate(cfg, p.builder, c.qrels, p.candidates, plan, tc)
    assert sorted(cv.run.query_ids()) == sorted(c.queries)
    for qid in c.queries:
        assert sorted(cv.run.doc_ids(qid)) == sorted(p.candidates.doc_ids(qid))
    # one epoch per fold: the f-th call trains fold f on queries outside its test and validation folds
    assert len(seen) == 5
    for fold, qids in enumerate(seen):
        train, val, test = plan.split(fold)
        assert qids == train
        assert not set(qids) & (set(test) | set(val))
    assert set(cv.models) == set(range(5)) and all("val_map" in h[0] for h in cv.histories.values())


def test_no_training_examples_is_an_error():
    c, p = prepared(n_queries=4)
    empty = {q: {d: 0 for d in j} for q, j in c.qrels.items()}
    cfg = synthetic_model_config(len(p.vocab), c.table.dim)
    with pytest.raises(ValueError, match="no training examples"):
        training.train_model(cfg, p.builder, empty, p.candidates, c.splits["train"], SMALL)


def test_collated_batch_matches_feature_builder():
    c, p = prepared(n_queries=4)
    qid = c.splits["train"][0]
    docs = p.candidates.doc_ids(qid)[:3]
    batch = collate([p.builder(qid, d) for d in docs], c.table.dim)
    assert batch["doc_tokens"].shape[0] == 3
    assert batch["relevance"].dtype == torch.float64
