#!/usr/bin/env python3
"""
URPE Attention Lab - Command Line Entry Point

Subcommands:
- train          train one model on PI or ETP and write metrics + checkpoint
- probe          run theory probes and write the report file
- bench          time RPE vs URPE forward passes
- export         dump B / C matrices of a checkpoint as CSV / PGM (/ PNG)
- census         count learnable parameters and the URPE delta
- ablate-depth   RPE vs URPE twins at several depths
- ablate-length  RPE vs URPE twins at several sequence lengths
- dump-data      write a generated dataset to a text file
"""

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass

import pandas as pd

import config
from benchmark import run_bench
from exceptions import ConfigError, LabError, TrainingDivergence
from matrix_export import export_checkpoint
from synthetic_tasks import TASKS, dump_dataset, generate, num_labels
from theory_probes import census, run_probe_suite
from training_harness import TrainConfig, make_eval_set, train
from transformer_stack import VARIANTS, ModelConfig, TransformerModel

logger = logging.getLogger(__name__)

MODEL_KEYS = {f.name: None for f in dataclasses.fields(ModelConfig)}
MODEL_KEYS["variant"] = None
KNOWN_KEYS = {
    "task": None,
    "output_dir": None,
    "eval_size": None,
    "model": MODEL_KEYS,
    "train": {f.name: None for f in dataclasses.fields(TrainConfig)},
}


@dataclass
class RunConfig:
    """Model + training settings, task and output directory of one run"""
    model: ModelConfig
    train: TrainConfig
    task: str = "pi"
    output_dir: str = config.OUTPUT_DIR
    eval_size: int = config.EVAL_SIZE

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "etp" and self.model.n_max % 2:
            raise ConfigError(f"etp needs an even sequence length, model.n_max={self.model.n_max}")
        labels = num_labels(self.task, self.model.n_max, self.model.vocab_in)
        if self.model.vocab_out != labels:
            raise ConfigError(f"model.vocab_out={self.model.vocab_out} but task {self.task} has {labels} labels")
        if self.eval_size < 1:
            raise ConfigError(f"eval_size must be positive, got {self.eval_size}")

    @property
    def seq_len(self):
        return self.model.n_max


def build_run_config(data):
    """
    Validate a nested dict (file contents merged with overrides) into a RunConfig

    model.variant, when given, sets pe_kind and urpe together; model.vocab_out
    defaults to the task's label count.
    """
    config.check_known_keys(data, KNOWN_KEYS)
    task = data.get("task", "pi")
    model_section = dict(data.get("model") or {})
    variant = model_section.pop("variant", None)
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {sorted(VARIANTS)}, got {variant!r}")
        model_section["pe_kind"], model_section["urpe"] = VARIANTS[variant]
    model_section.setdefault("use_norm", config.USE_NORM)
    if task in TASKS:
        model_section.setdefault("vocab_out", num_labels(
            task, model_section.get("n_max", config.SEQ_LEN), model_section.get("vocab_in", config.VOCAB_SIZE)
        ))
    try:
        model_cfg = ModelConfig(**model_section)
        train_cfg = TrainConfig(**(data.get("train") or {}))
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    return RunConfig(
        model=model_cfg, train=train_cfg, task=task,
        output_dir=data.get("output_dir", config.OUTPUT_DIR),
        eval_size=data.get("eval_size", config.EVAL_SIZE),
    )


def load_run_config(path=None, overrides=None):
    """Read the YAML file (if any), apply overrides, validate"""
    data = config.load_yaml_config(path) if path else {}
    return build_run_config(config.merge_config(data, overrides or {}))


def _shortcut_overrides(args, extra):
    """Fold --task / --pe / --vocab / --output-dir into the override dict"""
    overrides = config.parse_overrides(extra)
    if getattr(args, "task", None):
        overrides["task"] = args.task
    if getattr(args, "pe", None):
        overrides.setdefault("model", {})["variant"] = args.pe
    if getattr(args, "vocab", None):
        overrides.setdefault("model", {})["vocab_in"] = args.vocab
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return overrides


def _run_config(args, extra):
    return load_run_config(args.config, _shortcut_overrides(args, extra))


def train_run(run_cfg, out_dir=None):
    """Train one model from a RunConfig; returns (history, model)"""
    model = TransformerModel(run_cfg.model)
    eval_set = make_eval_set(run_cfg.task, run_cfg.seq_len, run_cfg.model.vocab_in,
                             run_cfg.train.seed, size=run_cfg.eval_size)
    history = train(model, run_cfg.task, run_cfg.train, eval_set, out_dir=out_dir)
    return history, model


# Commands

def cmd_train(args, extra):
    run_cfg = _run_config(args, extra)
    history, model = train_run(run_cfg, out_dir=run_cfg.output_dir)
    final_acc = float(history["accuracy"].iloc[-1])
    print(f"task={run_cfg.task} variant={run_cfg.model.variant} final_acc={final_acc:.4f}")
    return 0


def cmd_probe(args, extra):
    _reject_extra(extra)
    out_dir = args.output_dir or config.OUTPUT_DIR
    report_path = os.path.join(out_dir, config.PROBE_REPORT_FILE)
    reports = run_probe_suite(args.names or ["all"], seed=args.seed, report_path=report_path,
                              collapse_steps=args.collapse_steps)
    failed = [r.name for r in reports if not r.passed]
    for report in reports:
        print(report.to_line())
    if failed:
        logger.error(f"❌ {len(failed)} probe report(s) failed: {', '.join(sorted(set(failed)))}")
        return 1
    logger.info(f"✅ All {len(reports)} probe reports passed; report written to {report_path}")
    return 0


def cmd_bench(args, extra):
    _reject_extra(extra)
    out_dir = args.output_dir or config.OUTPUT_DIR
    table, ratios = run_bench(seq_lens=args.n, repetitions=args.repetitions, warmup=args.warmup,
                              seed=args.seed, out_path=os.path.join(out_dir, config.BENCH_FILE))
    for n, ratio in ratios.items():
        print(f"n={n} overhead_ratio={ratio:.4f}")
    if args.strict and any(r > config.BENCH_OVERHEAD_LIMIT for r in ratios.values()):
        logger.error(f"❌ URPE overhead above {config.BENCH_OVERHEAD_LIMIT:.2f}x")
        return 1
    return 0


def cmd_export(args, extra):
    _reject_extra(extra)
    written = export_checkpoint(args.checkpoint, args.out_dir, png=args.png)
    logger.info(f"✅ Wrote {len(written)} file(s) to {args.out_dir}")
    return 0


def cmd_census(args, extra):
    run_cfg = _run_config(args, extra)
    counts = census(run_cfg.model)
    print(
        f"H={run_cfg.model.H} n_max={run_cfg.model.n_max} rpe_params={counts['rpe_total']} "
        f"urpe_params={counts['urpe_total']} urpe_delta={counts['delta']} formula={counts['formula']}"
    )
    return 0 if counts["delta"] == counts["formula"] else 1


def ablate(run_cfg, field_name, values, out_path):
    """
    Train RPE and URPE models for every value of one model field

    Both models of a pair come from the same seed, so their weights match
    apart from C. Writes a CSV with one row per value.
    """
    rows = []
    for value in values:
        row = {field_name: value}
        for variant in ("rpe", "urpe"):
            pe_kind, urpe = VARIANTS[variant]
            changes = {field_name: value, "pe_kind": pe_kind, "urpe": urpe}
            if field_name == "n_max":
                changes["vocab_out"] = num_labels(run_cfg.task, value, run_cfg.model.vocab_in)
            cfg = dataclasses.replace(run_cfg, model=dataclasses.replace(run_cfg.model, **changes))
            logger.info(f"🔄 {field_name}={value} variant={variant}")
            history, _ = train_run(cfg)
            row[f"{variant}_acc"] = float(history["accuracy"].iloc[-1])
        row["urpe_minus_rpe"] = row["urpe_acc"] - row["rpe_acc"]
        rows.append(row)
    table = pd.DataFrame(rows)
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table.to_csv(out_path, index=False)
    return table


def _print_table(table):
    for record in table.to_dict(orient="records"):
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))


def cmd_ablate_depth(args, extra):
    run_cfg = _run_config(args, extra)
    table = ablate(run_cfg, "L", args.depths,
                   os.path.join(run_cfg.output_dir, config.DEPTH_ABLATION_FILE))
    _print_table(table)
    return 0


def cmd_ablate_length(args, extra):
    run_cfg = _run_config(args, extra)
    if run_cfg.task == "etp" and any(n % 2 for n in args.lengths):
        raise ConfigError("etp needs even sequence lengths")
    table = ablate(run_cfg, "n_max", args.lengths,
                   os.path.join(run_cfg.output_dir, config.LENGTH_ABLATION_FILE))
    _print_table(table)
    return 0


def cmd_dump_data(args, extra):
    _reject_extra(extra)
    batch = generate(args.task, args.n, args.vocab, args.batch, args.seed)
    out = args.out or os.path.join(config.OUTPUT_DIR, config.DATASET_FILE)
    dump_dataset(batch, out)
    logger.info(f"✅ Wrote {batch.batch_size} {args.task.upper()} samples to {out}")
    return 0


def _reject_extra(extra):
    if extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")


def build_parser():
    parser = argparse.ArgumentParser(prog="urpe-lab", description="RPE / URPE attention lab")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p, task_default=None):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--task", choices=TASKS, default=task_default)
        p.add_argument("--pe", choices=sorted(VARIANTS), help="model variant shortcut")
        p.add_argument("--vocab", type=int, help="input vocabulary size")
        p.add_argument("--output-dir", help="output directory")

    p = sub.add_parser("train", help="train a model (extra --section.key=value flags override the config)")
    run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="run theory probes")
    p.add_argument("names", nargs="*", help="probe names or 'all'")
    p.add_argument("--seed", type=int, default=config.RANDOM_STATE)
    p.add_argument("--collapse-steps", type=int, default=config.COLLAPSE_TRAIN_STEPS)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="RPE vs URPE forward-pass benchmark")
    p.add_argument("--n", type=int, nargs="+", default=config.BENCH_SEQ_LENS)
    p.add_argument("--repetitions", type=int, default=config.BENCH_REPETITIONS)
    p.add_argument("--warmup", type=int, default=config.BENCH_WARMUP)
    p.add_argument("--seed", type=int, default=config.RANDOM_STATE)
    p.add_argument("--strict", action="store_true", help="fail when the overhead ratio exceeds the limit")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="export B / C matrices of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--png", action="store_true", help="also write matplotlib heatmaps")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("census", help="parameter census and URPE delta")
    run_args(p)
    p.set_defaults(func=cmd_census)

    p = sub.add_parser("ablate-depth", help="RPE vs URPE at several depths")
    run_args(p, task_default="pi")
    p.add_argument("--depths", type=int, nargs="+", default=config.ABLATION_DEPTHS)
    p.set_defaults(func=cmd_ablate_depth)

    p = sub.add_parser("ablate-length", help="RPE vs URPE at several sequence lengths")
    run_args(p, task_default="pi")
    p.add_argument("--lengths", type=int, nargs="+", default=config.ABLATION_LENGTHS)
    p.set_defaults(func=cmd_ablate_length)

    p = sub.add_parser("dump-data", help="write a generated dataset")
    p.add_argument("--task", choices=TASKS, default="pi")
    p.add_argument("--n", type=int, default=config.SEQ_LEN)
    p.add_argument("--vocab", type=int, default=config.VOCAB_SIZE)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--seed", type=int, default=config.RANDOM_STATE)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_data)
    return parser


def main(argv=None):
    """Parse arguments, run one command, return its exit code"""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)

    try:
        return args.func(args, extra)
    except TrainingDivergence as e:
        logger.error(f"❌ Training diverged: {e}")
        return 1
    except LabError as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
