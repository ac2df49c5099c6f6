"""Command-line entry point: ``kala {generate,train,eval,flops,analyze,gradcheck}``."""

import argparse
from contextlib import contextmanager
from dataclasses import asdict, replace
import json
import logging
import os
import sys
import time

import numpy as np

from . import analysis, kernels
from .config import VARIANTS, load_config
from .corpus import load_corpus
from .corpus.generate import generate_synthetic_corpus, write_corpus
from .corpus.vocab import EntityVocabulary, build_entity_vocab, entity_frequency_histogram, histogram_csv
from .errors import ContractError, KalaError
from .model import load_checkpoint, save_checkpoint
from .trainer import TaskData, breakdown, build_model, evaluate, grad_check, train

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3
LOCK_NAME = ".kala.lock"

log = logging.getLogger("kala")


class CheckFailed(Exception):
    """A verification step ran but did not pass."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@contextmanager
def output_lock(directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise KalaError(f"{directory} is locked by another run ({path}); remove it if stale") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        os.unlink(path)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(metrics, task):
    if metrics.get("empty"):
        return "(empty)"
    if task == "qa":
        return f"EM={metrics['em']:.3f} F1={metrics['f1']:.3f} (n={metrics['n']})"
    return f"F1={metrics['f1']:.3f} (n={metrics['n']})"


def _print_breakdown(result, task, label=""):
    for part in ("overall", "seen", "unseen"):
        print(f"{label}{part:<8} {_fmt(result[part], task)}")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_generate(args, cfg):
    out = args.out or cfg.paths.corpus_dir
    with output_lock(out):
        corpus = generate_synthetic_corpus(cfg.generator, cfg.seed)
        manifest = write_corpus(corpus, out, cfg.generator, cfg.seed)
    print(f"corpus written to {out}")
    for split, rows in corpus.splits.items():
        expected = round(cfg.generator.unseen_fraction * len(rows)) if split != "train" else 0
        print(f"  {split:<5} contexts={len(rows):<5} unseen-heavy={corpus.unseen_contexts[split]} "
              f"(expected {expected})")
    print(f"  entities={len(corpus.entities)} facts={len(corpus.fact_records)}")
    print(f"  manifest sha256={manifest['sha256']}")
    return EXIT_OK


def _variants(args, cfg):
    names = args.variants.split(",") if args.variants else [cfg.model.variant]
    for v in names:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    return names


def cmd_train(args, cfg):
    variants = _variants(args, cfg)
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir)
    data = TaskData.from_corpus(corpus, cfg.model.memory_min_count)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = cfg.paths.output_dir
    rows = []
    with output_lock(out):
        _write_json(os.path.join(out, "config.json"), cfg.to_dict())
        for variant in variants:
            for seed in seeds:
                run_dir = os.path.join(out, f"{variant}-s{seed}")
                os.makedirs(run_dir, exist_ok=True)
                mcfg = replace(cfg.model, variant=variant)
                model = build_model(mcfg, data, seed)
                t0 = time.time()
                result = train(model, data, cfg.train, seed, os.path.join(run_dir, "metrics.jsonl"))
                save_checkpoint(os.path.join(run_dir, "model.npz"), model, data.token_vocab,
                                corpus.relations, data.tag_set,
                                extra={"seed": seed, "best_epoch": result.best_epoch})
                test = evaluate(model, data, "test", batch_size=cfg.train.eval_batch_size,
                                max_answer_len=cfg.train.max_answer_len)
                _write_json(os.path.join(run_dir, "test.json"), test)
                print(f"[{variant} seed={seed}] best epoch {result.best_epoch} "
                      f"({time.time() - t0:.0f}s)")
                _print_breakdown(test, data.task, "  ")
                rows.append((variant, seed, test))
        if len(rows) > 1:
            table = comparison_table(rows, data.task)
            with open(os.path.join(out, "comparison.csv"), "w", encoding="utf-8") as fh:
                fh.write(table)
            print(table, end="")
    return EXIT_OK


def comparison_table(rows, task):
    """CSV with one line per (variant, seed) and a mean line per variant."""
    def val(m, key):
        return m.get(key) if not m.get("empty") else None

    keys = ["em", "f1"] if task == "qa" else ["f1"]
    header = ["variant", "seed"] + [f"{part}_{k}" for part in ("overall", "seen", "unseen") for k in keys]
    lines = [",".join(header)]
    by_variant = {}
    for variant, seed, res in rows:
        values = [val(res[part], k) for part in ("overall", "seen", "unseen") for k in keys]
        by_variant.setdefault(variant, []).append(values)
        lines.append(",".join([variant, str(seed)] + ["" if v is None else f"{v:.4f}" for v in values]))
    for variant, table in by_variant.items():
        cols = list(zip(*table))
        means = [np.mean([c for c in col if c is not None]) if any(c is not None for c in col) else None
                 for col in cols]
        lines.append(",".join([variant, "mean"] + ["" if m is None else f"{m:.4f}" for m in means]))
    return "\n".join(lines) + "\n"


def _data_for_checkpoint(meta, token_vocab, relations, corpus_dir):
    corpus = load_corpus(corpus_dir, relations=relations)
    if corpus.task != meta["task"]:
        raise ContractError(f"checkpoint is a {meta['task']} model but {corpus_dir} holds {corpus.task} data")
    memory = EntityVocabulary(meta["entity_ids"][1:]) if meta["entity_ids"] else EntityVocabulary()
    return TaskData(corpus.task, corpus.splits, token_vocab, memory, len(corpus.relations),
                    meta["tag_set"], build_entity_vocab(corpus.splits["train"]))


def _score_prediction_file(path, data, split):
    with open(path, encoding="utf-8") as fh:
        preds = {r["doc_id"]: r for r in (json.loads(line) for line in fh if line.strip())}
    examples = data.splits[split]
    missing = [ex.doc_id for ex in examples if ex.doc_id not in preds]
    if missing:
        raise ContractError(f"{path}: no prediction for {len(missing)} example(s), e.g. {missing[0]}")
    if data.task == "qa":
        spans = []
        for ex in examples:
            text = preds[ex.doc_id]["answer"]
            # map the predicted text back to a context span for scoring
            toks = text.split()
            span = next(((i, i + len(toks) - 1) for i in range(len(ex.tokens))
                         if ex.tokens[i:i + len(toks)] == toks), None)
            spans.append(span if span is not None else (0, -1))
        return breakdown("qa", examples, spans, data.train_entities)
    return breakdown(data.task, examples, [preds[ex.doc_id]["tags"] for ex in examples],
                     data.train_entities)


def cmd_eval(args, cfg):
    corpus_dir = args.corpus or cfg.paths.corpus_dir
    if args.predictions:
        corpus = load_corpus(corpus_dir)
        data = TaskData.from_corpus(corpus)
        if args.task and args.task != data.task:
            raise ContractError(f"corpus holds {data.task} data, asked for {args.task}")
        result = _score_prediction_file(args.predictions, data, args.split)
    else:
        if not os.path.exists(args.checkpoint):
            raise KalaError(f"checkpoint {args.checkpoint} not found")
        model, token_vocab, relations, meta = load_checkpoint(args.checkpoint)
        data = _data_for_checkpoint(meta, token_vocab, relations, corpus_dir)
        result = evaluate(model, data, args.split, task=args.task,
                          max_answer_len=cfg.train.max_answer_len)
    _print_breakdown(result, data.task)
    if args.out:
        _write_json(args.out, result)
    return EXIT_OK


def cmd_flops(args, cfg):
    if args.corpus:
        data = TaskData.from_corpus(load_corpus(args.corpus), cfg.model.memory_min_count)
        stats = analysis.corpus_stats(data)
    else:
        stats = analysis.CorpusStats(args.nodes, args.edges_per_node, args.max_len, args.memory_size)
    mcfg = analysis.bert_base_config() if args.bert_base else cfg.model
    reports = {v: analysis.estimate_flops(mcfg, stats, v) for v in VARIANTS}
    base = reports["fine-tune"].training
    for v, rep in reports.items():
        print(rep.to_text())
        print(f"  ratio to fine-tune: {rep.training / base:.4f}\n")
    out = cfg.paths.output_dir
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "flops.json"), {
        "stats": asdict(stats),
        "reports": {v: {"components": r.components, "forward": r.forward, "training": r.training,
                        "multiplier": r.multiplier, "constants": r.constants,
                        "ratio": r.training / base} for v, r in reports.items()},
    })
    return EXIT_OK


def cmd_analyze(args, cfg):
    out = cfg.paths.output_dir
    corpus_dir = args.corpus or cfg.paths.corpus_dir
    with output_lock(out):
        summary = {}
        corpus = load_corpus(corpus_dir)
        table, stats = entity_frequency_histogram(build_entity_vocab(corpus.splits["train"]))
        with open(os.path.join(out, "entity_frequency.csv"), "w", encoding="utf-8") as fh:
            fh.write(histogram_csv(table))
        summary["entity_frequency"] = stats
        print(f"entity frequency: {stats}")
        for i, path in enumerate(args.checkpoints):
            if not os.path.exists(path):
                raise KalaError(f"checkpoint {path} not found")
            model, token_vocab, relations, meta = load_checkpoint(path)
            data = _data_for_checkpoint(meta, token_vocab, relations, corpus_dir)
            examples = data.splits[args.split]
            tag = f"{model.cfg.variant}-{i}"
            hist = analysis.modulation_histogram(model, data, examples)
            with open(os.path.join(out, f"modulation_{tag}.csv"), "w", encoding="utf-8") as fh:
                fh.write(analysis.histogram_rows(hist))
            prox = analysis.unseen_proximity(model, data, examples)
            with open(os.path.join(out, f"proximity_{tag}.csv"), "w", encoding="utf-8") as fh:
                fh.write(prox.to_csv())
            summary[tag] = {
                "checkpoint": path,
                "modulation": {k: {m: h[m] for m in ("n", "mean", "std") if m in h}
                               for k, h in hist.items() if isinstance(h, dict)},
                "proximity_mean": prox.mean, "proximity_empty": prox.empty,
            }
            print(f"{tag}: unseen->seen mean cosine distance "
                  f"{'(empty)' if prox.empty else f'{prox.mean:.4f}'}")
            for k, h in hist.items():
                if isinstance(h, dict) and not h.get("empty"):
                    print(f"  {k}: mean={h['mean']:.4f} std={h['std']:.4f} n={h['n']}")
        _write_json(os.path.join(out, "analysis.json"), summary)
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir)
    data = TaskData.from_corpus(corpus, cfg.model.memory_min_count)
    model = build_model(cfg.model, data, cfg.seed)
    if args.perturb:
        rng = np.random.default_rng(cfg.seed)
        for _, p in model.named_parameters():
            p.data += rng.normal(0.0, args.perturb, size=p.shape)
        model.after_backward()
    examples = data.splits["train"][:args.examples]
    _, batch = next(data.batches(examples, len(examples), model.cfg.max_len))
    report = grad_check(model, batch, args.tolerance, probes=args.probes, seed=cfg.seed)
    for group, err in report.errors.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{group:<12} max rel err {err:.3e} over {report.probes[group]} probes  {status}")
    if report.null_row_grad is not None:
        print(f"null memory row max |grad| {report.null_row_grad:.1e}")
    if not report.passed:
        raise CheckFailed(f"gradient check failed for {', '.join(report.failures())}")
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="kala", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set train.epochs=3 (repeatable)")
        return p

    p = common(sub.add_parser("generate", help="write a synthetic corpus"))
    p.add_argument("--out", help="corpus directory (default: paths.corpus_dir)")

    p = common(sub.add_parser("train", help="train one or more variants"))
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")

    p = common(sub.add_parser("eval", help="evaluate a checkpoint or a prediction file"))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="model.npz written by train")
    src.add_argument("--predictions", help="JSONL of {doc_id, answer} or {doc_id, tags}")
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--task", choices=("qa", "tagging"), help="expected task kind")
    p.add_argument("--out", help="write metrics JSON here")

    p = common(sub.add_parser("flops", help="analytic FLOPs per variant"))
    p.add_argument("--corpus", help="take graph statistics from this corpus")
    p.add_argument("--bert-base", action="store_true", help="use a BERT-base-sized model")
    p.add_argument("--nodes", type=float, default=57.0, help="average nodes per context")
    p.add_argument("--edges-per-node", type=float, default=0.64, help="average edges per node")
    p.add_argument("--max-len", type=int, default=384, help="maximum sequence length")
    p.add_argument("--memory-size", type=int, default=62824, help="entity memory rows")

    p = common(sub.add_parser("analyze", help="modulation histograms and unseen proximity"))
    p.add_argument("checkpoints", nargs="*", help="checkpoints to analyse")
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every parameter group"))
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--examples", type=int, default=2, help="training examples in the batch")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--probes", type=int, default=6, help="coordinates probed per parameter")
    p.add_argument("--perturb", type=float, default=0.05,
                   help="std of noise added to the initial parameters (0 keeps the init)")
    return parser


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
    "flops": cmd_flops, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", kernels.backend_name())
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"kala: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        print(f"kala: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (KalaError, OSError) as exc:
        print(f"kala: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
