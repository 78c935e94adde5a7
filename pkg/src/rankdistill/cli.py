"""Command-line entry point: ``rankdistill <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import gen_devset, gen_triples, load_devset_tsv, load_triples_tsv, write_devset_tsv, write_triples_tsv
from .encoder import load_params, save_params
from .experiments import (OUTPUT_ENV, SUITES, ExperimentConfig, compare_report_files, load_data,
                          run_suite)
from .metrics import evaluate, rerank, write_run_file
from .objectives import PRESET_NAMES, ObjectivePlan
from .trainer import TrainConfig, distill_student, finetune_teacher

log = logging.getLogger("rankdistill")


def _output_root(args) -> Path:
    return Path(getattr(args, "output", None) or os.environ.get(OUTPUT_ENV) or "results")


def _load_config(args) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text(encoding="utf-8")) if getattr(args, "config", None) else {}
    for key in ("suite", "seeds", "epochs", "learning_rate", "batch_size", "data_fraction",
                "n_train", "output_dir"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return ExperimentConfig.from_dict(d)


def _data(args, cfg: ExperimentConfig):
    if getattr(args, "train", None):
        train = load_triples_tsv(args.train, cfg.vocab())
        dev = load_devset_tsv(args.dev, cfg.vocab()) if getattr(args, "dev", None) else None
        return train, dev
    return load_data(cfg)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _output_root(args)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.task_spec()
    write_triples_tsv(gen_triples(spec, cfg.n_train), out / "train.tsv")
    write_devset_tsv(gen_devset(spec, cfg.n_dev_queries, cfg.n_candidates, cfg.n_relevant, stream=1),
                     out / "dev.tsv")
    print(f"wrote {out / 'train.tsv'} and {out / 'dev.tsv'}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    train, _ = _data(args, cfg)
    seed = cfg.seeds[0]
    tc = TrainConfig(learning_rate=cfg.teacher_learning_rate or cfg.learning_rate,
                     batch_size=cfg.batch_size,
                     epochs=cfg.teacher_epochs if cfg.teacher_epochs is not None else cfg.epochs,
                     seed=seed, teacher_config=cfg.encoder_config("teacher", seed),
                     teacher_objective=cfg.teacher_objective)
    result = finetune_teacher(tc, train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out)
    if args.history:
        result.write_history_csv(args.history)
    print(f"saved teacher to {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    train, _ = _data(args, cfg)
    teacher = load_params(args.teacher)
    seed = cfg.seeds[0]
    plan = ObjectivePlan.from_dict(cfg.plan) if cfg.plan else ObjectivePlan.from_dict(args.plan)
    if args.layer_map:
        plan = replace(plan, layer_map=args.layer_map)
    tc = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epochs,
                     seed=seed, objective_plan=plan, teacher_config=teacher.config,
                     student_config=cfg.encoder_config("student", seed),
                     data_fraction=cfg.data_fraction)
    result = distill_student(teacher, tc, train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out)
    if args.history:
        result.write_history_csv(args.history)
    print(f"saved student to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = load_params(args.model)
    if args.dev:
        dev = load_devset_tsv(args.dev, params.config.vocab)
    else:
        _, dev = load_data(cfg)
    report = evaluate(params, dev, seed=params.config.seed, method=Path(args.model).stem,
                      scoring=args.scoring)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    if args.run_file:
        write_run_file(rerank(params, dev, args.scoring), dev, args.run_file)
    print(f"MRR@10 {report.mrr_at_10:.4f}")
    return 0


def cmd_suite(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir) if cfg.output_dir else _output_root(args) / cfg.suite

    def progress(i, n, cell, report):
        print(f"[{i}/{n}] {cell.method} seed={cell.seed} fraction={cell.fraction:g} "
              f"mrr@10={report.mrr_at_10:.4f}", flush=True)

    path = run_suite(cfg, out, progress=progress)
    print(f"results written to {path}")
    return 0


def cmd_compare(args) -> int:
    summary = compare_report_files(args.a, args.b)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankdistill",
                                description="Cross-encoder ranking distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, suite=False):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--learning-rate", dest="learning_rate", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--data-fraction", dest="data_fraction", type=float)
        sp.add_argument("--n-train", dest="n_train", type=int)
        sp.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./results)")
        if suite:
            sp.add_argument("--suite", choices=SUITES)
            sp.add_argument("--output-dir", dest="output_dir")

    sp = sub.add_parser("gen-data", help="write synthetic train/dev TSV files")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-teacher", help="fine-tune a teacher cross-encoder")
    common(sp)
    sp.add_argument("--train", help="triples TSV (default: synthetic task from config)")
    sp.add_argument("--out", required=True, help="checkpoint path (.npz)")
    sp.add_argument("--history", help="loss history CSV path")
    sp.set_defaults(fn=cmd_train_teacher)

    sp = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    common(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--plan", default="L3", choices=PRESET_NAMES)
    sp.add_argument("--layer-map", dest="layer_map", choices=("uniform", "last_k", "last_one"))
    sp.add_argument("--train")
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("eval", help="MRR@10 of a checkpoint on a dev set")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--dev", help="devset TSV (default: synthetic dev set from config)")
    sp.add_argument("--scoring", default="probability", choices=("probability", "logit"))
    sp.add_argument("--report", help="write RunReport JSON here")
    sp.add_argument("--run-file", dest="run_file", help="write 'qid docid rank score' lines here")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("suite", help="run an experiment suite")
    common(sp, suite=True)
    sp.set_defaults(fn=cmd_suite)

    sp = sub.add_parser("compare", help="compare RunReport JSON files")
    sp.add_argument("--a", nargs="+", required=True)
    sp.add_argument("--b", nargs="+", required=True)
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as e:
        print(f"rankdistill: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
