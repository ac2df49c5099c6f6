import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kala import numerics as nx
from kala.config import FINE_TUNE, POINTWISE, RELATIONAL, TrainConfig
from kala.errors import ContractError, DimensionError, DivergenceError, GradCheckError
from kala.layers import Linear, Module
from kala.numerics import Tensor
from kala.trainer import (AdamW, GradCheckReport, bio_spans, breakdown, build_model, decode_span,
                          entity_f1, evaluate, exact_match, grad_check, linear_schedule,
                          make_optimizers, predict, score_predictions, span_loss, tag_loss,
                          token_f1, train)

from conftest import tiny_model


def perturbed(model, seed=0, std=0.05):
    r = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data += r.normal(0.0, std, size=p.shape)
    model.after_backward()
    return model


def first_batch(data, n=2, max_len=48):
    return next(data.batches(data.splits["train"][:n], n, max_len))[1]


# -- losses ---------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 7, 30])
def test_span_loss_uniform(n):
    assert math.isclose(span_loss(np.zeros(n), np.zeros(n), 0, n - 1).item(), 2 * math.log(n),
                        rel_tol=1e-14)


def test_span_loss_vanishes_with_gap():
    losses = []
    for gap in (1.0, 10.0, 40.0):
        logits = np.zeros(5)
        logits[2] = gap
        losses.append(span_loss(logits, logits, 2, 2).item())
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-15


def test_span_loss_gradient(rng):
    s, e = Tensor(rng.normal(size=6), requires_grad=True), Tensor(rng.normal(size=6), requires_grad=True)
    valid = np.array([0, 1, 1, 1, 1, 0], dtype=bool)
    f = lambda: span_loss(s, e, 1, 3, valid)
    nx.backward(f())
    with nx.no_grad():
        numeric = nx.finite_difference_gradient(lambda: f().item(), [s, e])
    assert max(nx.relative_error(p.grad, g) for p, g in zip((s, e), numeric)) < 1e-4


def test_span_loss_checks():
    with pytest.raises(ContractError):
        span_loss(np.zeros(3), np.zeros(3), 0, 3)
    with pytest.raises(DimensionError):
        span_loss(np.zeros(3), np.zeros(4), 0, 1)


@pytest.mark.parametrize("t", [2, 3, 9])
def test_tag_loss_uniform(t):
    assert math.isclose(tag_loss(np.zeros((4, t)), [0, 1, 1, 0]).item(), math.log(t), rel_tol=1e-14)


def test_tag_loss_perfect_and_gradient(rng):
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), [1, 3, 0]] = 50.0
    assert tag_loss(logits, [1, 3, 0]).item() < 1e-15
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    f = lambda: tag_loss(x, [0, 2, 1, 1, 0])
    nx.backward(f())
    with nx.no_grad():
        (numeric,) = nx.finite_difference_gradient(lambda: f().item(), [x])
    assert nx.relative_error(x.grad, numeric) < 1e-4


# -- metrics --------------------------------------------------------------------

def test_token_f1_half():
    assert token_f1("a b", "b c") == 0.5


def test_exact_match_normalises():
    assert exact_match("  Paris!", "paris") == 1.0
    assert exact_match("Paris", "Lyon") == 0.0


def test_bio_spans_and_entity_f1():
    tags = ["B-city", "I-city", "O", "I-drug", "B-drug"]
    assert bio_spans(tags) == [("city", 0, 1), ("drug", 3, 3), ("drug", 4, 4)]
    assert entity_f1([tags], [tags]) == 1.0
    assert entity_f1([["O", "O"]], [["B-x", "O"]]) == 0.0
    assert entity_f1([["O"]], [["O"]]) == 1.0


def test_gold_predictions_score_one(tiny_data):
    examples = tiny_data.splits["test"]
    scores = score_predictions("qa", examples, [ex.answer for ex in examples])
    assert scores["em"] == scores["f1"] == 1.0


def test_gold_tags_score_one(tagging_data):
    examples = tagging_data.splits["test"]
    assert score_predictions("tagging", examples, [ex.tags for ex in examples])["f1"] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_bounded_and_permutation_invariant(tiny_data, seed):
    r = np.random.default_rng(seed)
    examples = tiny_data.splits["test"]
    preds = []
    for ex in examples:
        s = int(r.integers(len(ex.tokens)))
        preds.append((s, min(len(ex.tokens) - 1, s + int(r.integers(3)))))
    base = score_predictions("qa", examples, preds)
    perm = r.permutation(len(examples))
    shuffled = score_predictions("qa", [examples[i] for i in perm], [preds[i] for i in perm])
    for k in ("em", "f1"):
        assert 0.0 <= base[k] <= 1.0
        assert math.isclose(base[k], shuffled[k], rel_tol=1e-12)


def test_empty_unseen_subset_is_marked(tiny_data):
    examples = tiny_data.splits["train"]  # training contexts never hold unseen entities
    result = breakdown("qa", examples, [ex.answer for ex in examples], tiny_data.train_entities)
    assert result["unseen"] == {"n": 0, "empty": True}
    assert result["seen"]["n"] == len(examples)


def test_decode_span_rules():
    valid = np.array([0, 1, 1, 1, 1], dtype=bool)
    assert decode_span(np.zeros(5), np.zeros(5), valid) == (1, 1)
    start, end = np.array([0.0, 1, 0, 0, 9]), np.array([0.0, 0, 0, 0, 9])
    assert decode_span(start, end, valid) == (4, 4)
    assert decode_span(np.array([0.0, 5, 0, 0, 0]), np.array([0.0, 0, 0, 1, 5]), valid, max_len=3) == (1, 3)


# -- optimisation -----------------------------------------------------------------

def test_linear_schedule():
    assert linear_schedule(0, 100, 0.1) == 0.1
    assert linear_schedule(9, 100, 0.1) == 1.0
    assert linear_schedule(10, 100, 0.1) == 1.0
    assert linear_schedule(55, 100, 0.1) == 0.5
    assert linear_schedule(100, 100, 0.1) == 0.0


def test_adamw_decay_only_on_matrices():
    w, b, mem = (Tensor(np.ones((2, 2)), requires_grad=True), Tensor(np.ones(2), requires_grad=True),
                 Tensor(np.ones((3, 2)), requires_grad=True))
    for p in (w, b, mem):
        p.grad = np.zeros(p.shape)
    AdamW([w, b, mem], lr=0.1, weight_decay=0.5, no_decay=[mem]).step()
    assert np.allclose(w.data, 0.95)
    assert np.array_equal(b.data, np.ones(2))
    assert np.array_equal(mem.data, np.ones((3, 2)))


def test_separate_knowledge_optimizer(tiny_data):
    model = build_model(tiny_model(), tiny_data, 0)
    opts = make_optimizers(model, TrainConfig(separate_knowledge_optimizer=True, knowledge_lr=1e-2))
    assert [o.lr for o in opts] == [3e-4, 1e-2]
    assert sum(len(o.params) for o in opts) == len(model.parameters())


# -- training ---------------------------------------------------------------------

def test_zero_epochs_keeps_initialisation(tiny_data):
    model = build_model(tiny_model(), tiny_data, 3)
    before = model.state_dict()
    result = train(model, tiny_data, TrainConfig(epochs=0), seed=3)
    assert result.history == []
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_training_is_deterministic(tiny_data, tmp_path):
    logs = []
    for run in ("a", "b"):
        model = build_model(tiny_model(dropout=0.1, gnn_dropout=0.1), tiny_data, 1)
        path = tmp_path / f"{run}.jsonl"
        train(model, tiny_data, TrainConfig(epochs=2, batch_size=8, lr=1e-3), seed=1, log_path=str(path))
        logs.append(path.read_text())
    assert logs[0] == logs[1]
    records = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]


def test_training_restores_best_epoch(tiny_data):
    model = build_model(tiny_model(), tiny_data, 0)
    result = train(model, tiny_data, TrainConfig(epochs=3, batch_size=8, lr=1e-3), seed=0)
    scores = [r["val"]["overall"]["f1"] for r in result.history]
    assert result.best_score == max(scores)
    assert result.best_epoch == scores.index(max(scores)) + 1
    assert evaluate(model, tiny_data, "val")["overall"]["f1"] == result.best_score


def test_divergence_detected(tiny_data):
    model = build_model(tiny_model(), tiny_data, 0)
    model.start_head.weight.data[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(model, tiny_data, TrainConfig(epochs=1, batch_size=8), seed=0)


def test_null_row_pinned_through_training(tiny_data):
    model = build_model(tiny_model(variant=POINTWISE), tiny_data, 0)
    train(model, tiny_data, TrainConfig(epochs=2, batch_size=4, lr=1e-2), seed=0)
    assert np.array_equal(model.memory.table.data[0], np.zeros(16))


@pytest.mark.parametrize("variant", [POINTWISE, RELATIONAL])
def test_zero_initialised_kala_matches_fine_tune(tiny_data, variant):
    fine = build_model(tiny_model(variant=FINE_TUNE), tiny_data, 5)
    kala = build_model(tiny_model(variant=variant), tiny_data, 5)
    examples = tiny_data.splits["test"]
    assert predict(fine, tiny_data, examples) == predict(kala, tiny_data, examples)
    assert evaluate(fine, tiny_data) == evaluate(kala, tiny_data)
    batch = first_batch(tiny_data, 4)
    a, b = fine.forward(batch)[0], kala.forward(batch)[0]
    assert np.array_equal(a["start"].data, b["start"].data)


def test_evaluate_task_mismatch(tiny_data):
    model = build_model(tiny_model(), tiny_data, 0)
    with pytest.raises(ContractError):
        evaluate(model, tiny_data, task="tagging")


def test_tagging_training_runs(tagging_data):
    model = build_model(tiny_model(), tagging_data, 0)
    result = train(model, tagging_data, TrainConfig(epochs=1, batch_size=8, lr=1e-3), seed=0)
    assert 0.0 <= result.best_score <= 1.0


# -- gradient check -----------------------------------------------------------------

def test_grad_check_full_relational_model(tiny_data):
    model = perturbed(build_model(tiny_model(), tiny_data, 0))
    batch = first_batch(tiny_data, 1)
    assert batch.token_ids.shape[1] <= 24
    report = grad_check(model, batch)
    assert set(report.errors) == {"transformer", "heads", "memory", "kfm", "gnn"}
    assert report.passed, report.errors
    assert report.null_row_grad == 0.0


class _LinearModel(Module):
    memory = None

    def __init__(self, rng):
        self.head = Linear(3, 2, rng)

    def parameter_groups(self):
        return {"heads": list(self.named_parameters())}

    def forward(self, batch):
        return self.head(batch), None, None

    def loss(self, batch, outputs):
        return nx.tsum(nx.mul(outputs, np.array([1.5, -2.0])))

    def after_backward(self):
        pass


def test_grad_check_linear_model_exact(rng):
    report = grad_check(_LinearModel(rng), rng.normal(size=(4, 3)), tolerance=1e-8, probes=8)
    assert report.errors["heads"] < 1e-8


def test_grad_check_report_failure():
    report = GradCheckReport(1e-4, {"kfm": 3e-3, "heads": 1e-6}, {"kfm": 4, "heads": 4})
    assert not report.passed
    assert report.failures() == {"kfm": 3e-3}
    with pytest.raises(GradCheckError, match="kfm"):
        report.raise_for_failure()


def test_variant_switch_keeps_encoder(tiny_data):
    cfg = tiny_model()
    a = build_model(replace(cfg, variant=FINE_TUNE), tiny_data, 9).state_dict()
    b = build_model(cfg, tiny_data, 9).state_dict()
    assert all(np.array_equal(v, b[k]) for k, v in a.items())
