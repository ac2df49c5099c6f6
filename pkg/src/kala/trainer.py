"""Losses, optimisation, metrics and the gradient-check harness."""

from collections import Counter
from dataclasses import dataclass, field
import json
import logging
import math
import string

import numpy as np

from . import kernels
from . import numerics as nx
from .config import FINE_TUNE
from .corpus.assemble import QA, UNSEEN_CONTEXT_MIN
from .corpus.vocab import TokenVocabulary, build_entity_vocab
from .errors import ContractError, DimensionError, DivergenceError, GradCheckError
from .model import KalaModel, make_batch

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def span_loss(start_logits, end_logits, start, end, valid=None):
    """Sum of start and end cross-entropies for one sequence.

    ``start_logits``/``end_logits`` are [n]; ``valid`` optionally restricts
    the positions that compete in each softmax.
    """
    s, e = nx.as_tensor(start_logits), nx.as_tensor(end_logits)
    if s.ndim != 1 or s.shape != e.shape:
        raise DimensionError("start and end logits must be matching [n] vectors")
    n = s.shape[0]
    if not (0 <= start < n and 0 <= end < n):
        raise ContractError(f"gold span ({start}, {end}) outside a sequence of {n}")
    mask = None if valid is None else np.asarray(valid, dtype=bool).reshape(1, n)
    return nx.add(
        nx.cross_entropy(nx.reshape(s, (1, n)), [start], mask),
        nx.cross_entropy(nx.reshape(e, (1, n)), [end], mask),
    )


def tag_loss(tag_logits, tags):
    """Mean per-token cross-entropy; ``tag_logits`` is [n, T]."""
    logits = nx.as_tensor(tag_logits)
    if logits.ndim != 2:
        raise DimensionError("tag logits must be [n, T]")
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (logits.shape[0],):
        raise DimensionError("one gold tag per token expected")
    return nx.cross_entropy(logits, tags)


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

def linear_schedule(step, total_steps, warmup):
    """Multiplier on the base rate: linear warm-up then linear decay to 0."""
    warm = int(round(warmup * total_steps))
    if step < warm:
        return (step + 1) / warm
    if total_steps <= warm:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warm))


class AdamW:
    """Adam with decoupled weight decay (no decay on biases, gains or the memory)."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        skip = {id(p) for p in no_decay}
        self.decay = [id(p) not in skip and p.ndim > 1 for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, scale=1.0):
        self.t += 1
        lr = self.lr * scale
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizers(model, tcfg):
    memory = [model.memory.table] if model.memory is not None else []
    if tcfg.separate_knowledge_optimizer and model.cfg.variant != FINE_TUNE:
        knowledge = {id(p) for p in model.knowledge_parameters()}
        main = [p for p in model.parameters() if id(p) not in knowledge]
        side = [p for p in model.parameters() if id(p) in knowledge]
        return [AdamW(main, tcfg.lr, tcfg.weight_decay),
                AdamW(side, tcfg.knowledge_lr, tcfg.weight_decay, no_decay=memory)]
    return [AdamW(model.parameters(), tcfg.lr, tcfg.weight_decay, no_decay=memory)]


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

_PUNCT = set(string.punctuation)


def normalize_answer(text):
    """Lower-case, drop punctuation, collapse whitespace (articles are kept)."""
    return " ".join("".join(ch for ch in text.lower() if ch not in _PUNCT).split())


def exact_match(prediction, gold):
    return float(normalize_answer(prediction) == normalize_answer(gold))


def token_f1(prediction, gold):
    pred, ref = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not pred or not ref:
        return float(pred == ref)
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def bio_spans(tags):
    """Entity spans ``(type, start, end)`` of a BIO sequence; stray I- opens a span."""
    spans, cur = [], None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("I-") and cur is not None and cur[0] == tag[2:]:
            cur[2] = i
            continue
        if cur is not None:
            spans.append(tuple(cur))
            cur = None
        if tag.startswith(("B-", "I-")):
            cur = [tag[2:], i, i]
    return spans


def entity_f1(predicted, gold):
    """Micro entity-level F1 over lists of tag sequences."""
    tp = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        ps, gs = set(bio_spans(p)), set(bio_spans(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return 2 * prec * rec / (prec + rec)


def decode_span(start_logits, end_logits, valid, max_len=30):
    """Best (start, end) by summed logits; lowest start then shortest span wins ties."""
    s, e, _ = kernels.best_span(np.ascontiguousarray(start_logits, dtype=np.float64),
                                np.ascontiguousarray(end_logits, dtype=np.float64),
                                np.ascontiguousarray(valid, dtype=np.bool_), int(max_len))
    return int(s), int(e)


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

@dataclass
class TaskData:
    """Examples plus every vocabulary a model needs."""

    task: str
    splits: dict
    token_vocab: TokenVocabulary
    entity_vocab: object          # entities with a memory row (possibly pruned)
    num_relations: int
    tag_set: list = field(default_factory=list)
    train_entities: object = None  # every training entity; defines Seen/Unseen

    def __post_init__(self):
        if self.train_entities is None:
            self.train_entities = self.entity_vocab

    @property
    def tag_index(self):
        return {t: i for i, t in enumerate(self.tag_set)}

    @classmethod
    def from_corpus(cls, corpus, min_count=0):
        train = corpus.splits["train"]
        tokens = TokenVocabulary()
        for ex in train:
            for t in (ex.question or []) + ex.tokens:
                tokens.add(t)
        full = build_entity_vocab(train)
        vocab = full.pruned(min_count) if min_count > 0 else full
        return cls(corpus.task, corpus.splits, tokens, vocab, len(corpus.relations),
                   list(corpus.tag_set), full)

    def batches(self, examples, size, max_len, order=None):
        order = np.arange(len(examples)) if order is None else order
        for i in range(0, len(order), size):
            chunk = [examples[j] for j in order[i:i + size]]
            yield chunk, make_batch(chunk, self.token_vocab, self.entity_vocab,
                                    self.num_relations, max_len, self.tag_index)


def build_model(cfg, data, seed):
    """Fresh model for ``data``; the memory covers ``data.entity_vocab``."""
    return KalaModel(cfg, len(data.token_vocab), data.entity_vocab.entities, data.num_relations,
                     task=data.task, num_tags=len(data.tag_set), seed=seed)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def predict(model, data, examples, batch_size=64, max_answer_len=30):
    """Predicted answer spans (QA) or tag sequences (tagging), in example order."""
    out = []
    with nx.no_grad():
        for chunk, batch in data.batches(examples, batch_size, model.cfg.max_len):
            logits, _, _ = model.forward(batch)
            for i, ex in enumerate(chunk):
                off, length = batch.offsets[i], batch.lengths[i]
                if model.task == QA:
                    s, e = decode_span(logits["start"].data[i], logits["end"].data[i],
                                       batch.span_mask[i], max_answer_len)
                    out.append((s - off, e - off))
                else:
                    ids = logits["tags"].data[i, off:off + length].argmax(axis=-1)
                    out.append([data.tag_set[k] for k in ids])
    return out


def _qa_scores(examples, predictions):
    em = [exact_match(" ".join(ex.tokens[s:e + 1]), ex.answer_text())
          for ex, (s, e) in zip(examples, predictions)]
    f1 = [token_f1(" ".join(ex.tokens[s:e + 1]), ex.answer_text())
          for ex, (s, e) in zip(examples, predictions)]
    return {"n": len(examples), "em": float(np.mean(em)), "f1": float(np.mean(f1))}


def score_predictions(task, examples, predictions):
    """Corpus-level metrics for ``predictions`` (empty input -> explicit empty marker)."""
    if not examples:
        return {"n": 0, "empty": True}
    if task == QA:
        return _qa_scores(examples, predictions)
    return {"n": len(examples), "f1": entity_f1(predictions, [ex.tags for ex in examples])}


def breakdown(task, examples, predictions, vocab):
    """Overall metrics plus the Seen/Unseen split."""
    groups = {"seen": ([], []), "unseen": ([], [])}
    for ex, pred in zip(examples, predictions):
        key = "unseen" if len(ex.unseen_entities(vocab)) >= UNSEEN_CONTEXT_MIN else "seen"
        groups[key][0].append(ex)
        groups[key][1].append(pred)
    result = {"overall": score_predictions(task, examples, predictions)}
    for key, (exs, preds) in groups.items():
        result[key] = score_predictions(task, exs, preds)
    return result


def evaluate(model, data, split="test", task=None, batch_size=64, max_answer_len=30):
    if task is not None and task != model.task:
        raise ContractError(f"checkpoint is a {model.task} model, asked to evaluate {task}")
    if data.task != model.task:
        raise ContractError(f"corpus task {data.task} does not match model task {model.task}")
    examples = data.splits[split]
    preds = predict(model, data, examples, batch_size, max_answer_len)
    return breakdown(model.task, examples, preds, data.train_entities)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_epoch: int
    best_score: float
    best_state: dict
    history: list


def _headline(metrics):
    return metrics["overall"].get("f1", 0.0)


def train(model, data, tcfg, seed, log_path=None, eval_split="val"):
    """Train in place; returns the best-on-validation state (F1) and the epoch log.

    ``model`` is left holding the best state. With zero epochs the initial
    state is returned unchanged.
    """
    rng = np.random.default_rng(seed)
    order_rng, drop_rng = np.random.default_rng(rng.integers(2**63)), np.random.default_rng(rng.integers(2**63))
    train_set = data.splits["train"]
    if model.cfg.memory_init == "encoder" and model.memory is not None:
        model.init_memory_from_encoder(b for _, b in data.batches(train_set, tcfg.eval_batch_size,
                                                                  model.cfg.max_len))
    optimizers = make_optimizers(model, tcfg)
    steps_per_epoch = math.ceil(len(train_set) / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    best = TrainResult(0, -math.inf, model.state_dict(), [])
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(1, tcfg.epochs + 1):
            losses = []
            order = order_rng.permutation(len(train_set))
            for _, batch in data.batches(train_set, tcfg.batch_size, model.cfg.max_len, order):
                model.zero_grad()
                outputs, _, _ = model.forward(batch, training=True, rng=drop_rng)
                loss = model.loss(batch, outputs)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                nx.backward(loss)
                model.after_backward()
                scale = linear_schedule(step, total, tcfg.warmup)
                for opt in optimizers:
                    opt.step(scale)
                model.after_backward()
                losses.append(value)
                step += 1
            metrics = evaluate(model, data, eval_split, batch_size=tcfg.eval_batch_size,
                               max_answer_len=tcfg.max_answer_len)
            record = {"epoch": epoch, "loss": float(np.mean(losses)), eval_split: metrics}
            best.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f %s F1 %.4f", epoch, record["loss"], eval_split,
                     _headline(metrics))
            if _headline(metrics) > best.best_score:
                best.best_epoch, best.best_score = epoch, _headline(metrics)
                best.best_state = model.state_dict()
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best.best_state)
    return best


# ----------------------------------------------------------------------------
# gradient check
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict                  # group -> max relative error
    probes: dict                  # group -> number of probed coordinates
    null_row_grad: float = None   # max |grad| of the pinned memory row

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    def failures(self):
        return {g: e for g, e in self.errors.items() if not e < self.tolerance}

    def raise_for_failure(self):
        for group, err in self.failures().items():
            raise GradCheckError(group, err, self.tolerance)


def grad_check(model, batch, tolerance=1e-4, probes=6, seed=0, h=1e-5):
    """Compare backward against central differences on a subsample per parameter group.

    Dropout is off (evaluation mode). Per parameter, half of the probes go to
    the largest-magnitude analytic coordinates and half are drawn at random.
    """
    rng = np.random.default_rng(seed)

    def objective():
        outputs, _, _ = model.forward(batch)
        return model.loss(batch, outputs)

    model.zero_grad()
    nx.backward(objective())
    model.after_backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for name, p in model.named_parameters()}
    errors, counts = {}, {}
    with nx.no_grad():
        for group, params in model.parameter_groups().items():
            worst, probed = 0.0, 0
            tensors = [p for _, p in params]
            indices = {}
            for k, (name, p) in enumerate(params):
                flat = np.abs(analytic[name]).reshape(-1)
                if name == "memory.table":
                    flat = flat.copy()
                    flat[:p.shape[1]] = -1.0  # the pinned row is reported separately
                top = np.argsort(-flat, kind="stable")[:max(1, probes // 2)]
                pool = np.flatnonzero(flat >= 0)
                extra = rng.choice(pool, size=min(probes - len(top), pool.size), replace=False)
                indices[k] = np.unique(np.concatenate([top, extra]))
            numeric = nx.finite_difference_gradient(lambda: objective().item(), tensors, h, indices)
            for k, (name, _) in enumerate(params):
                worst = max(worst, nx.relative_error(analytic[name], numeric[k]))
                probed += len(indices[k])
            errors[group], counts[group] = worst, probed
    null_grad = None
    if model.memory is not None:
        null_grad = float(np.abs(analytic["memory.table"][0]).max())
    return GradCheckReport(tolerance, errors, counts, null_grad)
