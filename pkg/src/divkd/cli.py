"""Command-line entry point: ``divkd <subcommand> ...``.

Every subcommand writes into ``--out-dir`` and echoes its resolved settings
there (``config.txt`` and ``command.json``).  Exit codes: 2 usage, 3 data,
4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import autodiff as ad
from . import corpus as corpus_mod
from . import distill, expr, metrics, model, train

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- corpus dirs

def write_corpus_dir(path, parts, constants) -> None:
    os.makedirs(path, exist_ok=True)
    vocab = corpus_mod.build_vocab([p for part in parts for p in part.problems])
    for name, part in zip(SPLITS, parts):
        corpus_mod.save_corpus(part, os.path.join(path, f"{name}.jsonl"))
    meta = {"vocab": list(vocab), "constants": constants,
            "max_quantities": max([len(p.quantities) for part in parts for p in part.problems] or [1]),
            "sizes": {n: len(p.problems) for n, p in zip(SPLITS, parts)}}
    with open(os.path.join(path, "corpus.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, ensure_ascii=False)


def read_corpus_dir(path):
    """(dict split -> Corpus, metadata) from a directory written by write_corpus_dir."""
    meta_path = os.path.join(path, "corpus.json")
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except OSError as exc:
        raise corpus_mod.FileError(f"cannot read {meta_path}: {exc}") from exc
    vocab = {t: i for i, t in enumerate(meta["vocab"])}
    parts = {s: corpus_mod.load_corpus(os.path.join(path, f"{s}.jsonl"), meta["constants"], s, vocab)
             for s in SPLITS}
    return parts, meta


def load_model(path):
    store = ad.load_checkpoint(path)
    if "model" not in store.meta:
        raise ad.CheckpointError(f"{path}: no model configuration in checkpoint metadata")
    mcfg = model.ModelConfig.from_json(store.meta["model"])
    return store, mcfg


# ---------------------------------------------------------------- run dirs

def _prepare_out(args, cfg=None, extra=None):
    os.makedirs(args.out_dir, exist_ok=True)
    if cfg is not None:
        train.write_config_file(os.path.join(args.out_dir, "config.txt"), cfg)
    echo = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    echo.update(extra or {})
    with open(os.path.join(args.out_dir, "command.json"), "w", encoding="utf-8") as f:
        json.dump(echo, f, indent=1, sort_keys=True)


def _train_config(args) -> train.TrainConfig:
    values = {}
    if args.config:
        values.update(train.read_config_file(args.config))
    for key in train.TrainConfig().flat():
        v = getattr(args, "cfg_" + key, None)
        if v is not None:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return train.TrainConfig.from_flat(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args):
    seed = args.seed if args.seed is not None else 0
    ratios = tuple(float(x) for x in args.ratios.split(","))
    c = corpus_mod.generate_toy_corpus(args.n, seed)
    try:
        parts = corpus_mod.split(c, ratios, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _prepare_out(args)
    write_corpus_dir(args.out_dir, parts, c.constants)
    print(f"wrote {args.n} problems to {args.out_dir} " + " ".join(f"{p.split}={len(p)}" for p in parts))


def cmd_ingest(args):
    seed = args.seed if args.seed is not None else 0
    rep = corpus_mod.ingest_math23k(args.input, report=True)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    parts = corpus_mod.split(rep.corpus, ratios, seed)
    _prepare_out(args, extra={"dropped": rep.dropped, "malformed": rep.malformed})
    write_corpus_dir(args.out_dir, parts, rep.corpus.constants)
    print(f"kept {len(rep.corpus)} problems, dropped {rep.dropped}, malformed {rep.malformed}")


def _corpus_and_config(args):
    parts, meta = read_corpus_dir(args.corpus)
    cfg = _train_config(args)
    mcfg = train.model_config(parts["train"], cfg, max_quantities=meta["max_quantities"])
    return parts, cfg, mcfg


def cmd_train_teacher(args):
    parts, cfg, mcfg = _corpus_and_config(args)
    _prepare_out(args, cfg)
    best = train.pretrain_teacher(parts["train"], parts["dev"], cfg, mcfg, run_dir=args.out_dir,
                                  resume=args.resume)
    out = os.path.join(args.out_dir, "teacher.ckpt")
    ad.save_checkpoint(out, best, {"kind": "teacher", "model": mcfg.to_json(), "train": cfg.flat()})
    print(f"teacher: best epoch {best.meta['best_epoch']}, dev answer accuracy "
          f"{best.meta['dev_answer_accuracy']:.4f}; saved {out}")


def cmd_train_student(args):
    parts, cfg, mcfg = _corpus_and_config(args)
    teacher, tcfg = load_model(args.teacher_checkpoint)
    if tcfg.to_json() != mcfg.to_json():
        raise ad.CheckpointError("teacher checkpoint was trained with a different model configuration")
    _prepare_out(args, cfg)
    best = train.train_student(parts["train"], parts["dev"], teacher, cfg, mcfg, run_dir=args.out_dir,
                               resume=args.resume)
    out = os.path.join(args.out_dir, "student.ckpt")
    ad.save_checkpoint(out, best, {"kind": "student", "model": mcfg.to_json(), "train": cfg.flat()})
    print(f"student: best epoch {best.meta['best_epoch']}, dev answer accuracy "
          f"{best.meta['dev_answer_accuracy']:.4f}; saved {out}")


def _split(args):
    parts, meta = read_corpus_dir(args.corpus)
    return parts[args.split], meta


def cmd_eval(args):
    data, _ = _split(args)
    reports = []
    _prepare_out(args)
    for path in args.checkpoint:
        store, mcfg = load_model(path)
        solver = metrics.Solver(store, mcfg, args.max_len, threads=args.threads)
        r = metrics.evaluate(solver, data, K=args.K, mode=args.mode, samples=args.samples,
                             seed=args.seed if args.seed is not None else 0)
        r["name"] = os.path.basename(path)
        reports.append(r)
    metrics.write_report(os.path.join(args.out_dir, "report.jsonl"), reports)
    table = metrics.format_table(reports)
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)


def cmd_dump_beams(args):
    data, _ = _split(args)
    store, mcfg = load_model(args.checkpoint)
    solver = metrics.Solver(store, mcfg, args.max_len, threads=args.threads)
    beams = solver.predict(data.problems, args.K)
    rows = [r for p, b in zip(data.problems, beams) for r in model.beam_records(p, b, data.constants)]
    _prepare_out(args)
    out = os.path.join(args.out_dir, "beams.jsonl")
    model.write_beam_dump(out, rows)
    print(f"wrote {len(rows)} beam entries for {len(data)} problems to {out}")


def cmd_distill_labels(args):
    data, _ = _split(args)
    store, mcfg = load_model(args.teacher_checkpoint)
    solver = metrics.Solver(store, mcfg, args.max_len, threads=args.threads)
    beams = solver.predict(data.problems, args.K)
    rows = distill.distilled_records(data.problems, beams, data.constants)
    _prepare_out(args)
    out = os.path.join(args.out_dir, "distilled.jsonl")
    model.write_beam_dump(out, rows)
    print(f"wrote {len(rows)} verified equations for {len(data)} problems to {out}")


def cmd_inspect(args):
    """Side-by-side beams of two dumps for chosen problems."""
    dumps = [model.read_beam_dump(p) for p in args.beams]
    names = [os.path.basename(os.path.dirname(os.path.abspath(p))) or p for p in args.beams]
    problems, constants = {}, None
    if args.corpus:
        parts, meta = read_corpus_dir(args.corpus)
        constants = meta["constants"]
        for part in parts.values():
            problems.update(part.by_id())
    ids = args.problem or sorted(dumps[0])[: args.limit]
    out = []
    for pid in ids:
        p = problems.get(pid)
        out.append(f"== {pid}")
        if p is not None:
            out.append("   text: " + " ".join(corpus_mod.raw_words(p)))
            out.append(f"   gold: {expr_infix(p.gold_equation)} = {p.gold_answer:g}")
        cols = []
        for name, dump in zip(names, dumps):
            col = [name]
            for e in dump.get(pid, model.BeamResult()).entries:
                mark = ""
                if p is not None:
                    ok = expr.equation_is_correct(e.equation, p.quantities, p.gold_answer, constants)
                    mark = "ok " if ok else "   "
                col.append(f"{e.rank}. {mark}{expr_infix(e.equation)}  ({e.log_score:.2f})")
            cols.append(col)
        width = max(len(x) for col in cols for x in col) + 2
        for i in range(max(len(c) for c in cols)):
            out.append("   " + "".join((c[i] if i < len(c) else "").ljust(width) for c in cols))
    text = "\n".join(out)
    if args.out_dir:
        _prepare_out(args)
        with open(os.path.join(args.out_dir, "inspect.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def expr_infix(eq):
    try:
        return expr.prefix_to_infix(eq)
    except expr.ParseError:
        return " ".join(eq)


# ---------------------------------------------------------------- parser

def _add_overrides(p):
    g = p.add_argument_group("hyperparameter overrides (flags win over --config)")
    for key, default in train.TrainConfig().flat().items():
        if key == "seed":
            continue
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None, metavar=type(default).__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="parallel evaluation threads")
    common.add_argument("--out-dir", default="run", help="run directory for all artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="divkd", description="Teacher/student equation solver with "
                                 "answer-verified distillation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("ingest", parents=[common], help="convert Math23K-style records")
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-teacher", parents=[common], help="pre-train the base network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--resume", help="last.ckpt of an interrupted run in --out-dir")
    _add_overrides(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", parents=[common], help="distil a latent-variable student")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher-checkpoint", required=True)
    p.add_argument("--resume", help="last.ckpt of an interrupted run in --out-dir")
    _add_overrides(p)
    p.set_defaults(func=cmd_train_student)

    for name, helptext in (("eval", "metric report"), ("dump-beams", "write beam dump"),
                           ("distill-labels", "write verified teacher equations")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--corpus", required=True)
        p.add_argument("--split", choices=SPLITS, default="train" if name == "distill-labels" else "test")
        p.add_argument("--K", type=int, default=5)
        p.add_argument("--max-len", type=int, default=15)
        if name == "eval":
            p.add_argument("--checkpoint", required=True, action="append")
            p.add_argument("--mode", choices=metrics.MODES, default="prior-mean")
            p.add_argument("--samples", type=int, default=5)
            p.set_defaults(func=cmd_eval)
        elif name == "dump-beams":
            p.add_argument("--checkpoint", required=True)
            p.set_defaults(func=cmd_dump_beams)
        else:
            p.add_argument("--teacher-checkpoint", required=True)
            p.set_defaults(func=cmd_distill_labels)

    p = sub.add_parser("inspect", parents=[common], help="side-by-side beam view")
    p.add_argument("--beams", required=True, action="append", help="beam dump (repeatable)")
    p.add_argument("--corpus")
    p.add_argument("--problem", action="append")
    p.add_argument("--limit", type=int, default=5)
    p.set_defaults(func=cmd_inspect, out_dir=None)
    return ap


DATA_ERRORS = (corpus_mod.FormatError, corpus_mod.FileError, model.VocabError, ad.CheckpointError,
               metrics.EmptyCorpus, FileNotFoundError, json.JSONDecodeError)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"divkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except train.DivergenceError as exc:
        print(f"divkd: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DATA_ERRORS as exc:
        print(f"divkd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
