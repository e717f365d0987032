import argparse
import json
import logging
import os
import sys

import pandas as pd

from checkpoint import load_checkpoint
from config import KEYS, PRESETS, parse_set_pairs, read_config_file, resolve_config, write_config
from errors import ConfigError, HitterError, VocabError
from evaluator import (
    breakdown_by_category,
    breakdown_by_relation,
    compare_breakdowns,
    evaluate_split,
    mrr_by_hops,
    nearest_table,
    queries_from_frame,
    rows_frame,
    write_reports,
)
from kg_store import SPLITS, KnowledgeGraph
from logger import get_logger, run_log, set_log_level
from model import HitterModel
from run_db import DATABASE_URL, RunRegistry, init_db
from synthetic import PATTERNS, gen_synthetic
from trainer import Trainer

# Initialize logger
logger = get_logger(__name__)


def _config_from_args(args, base=None):
    """Resolve a RunConfig from stored values, --config, per-key flags and --set."""
    file_values = dict(base or {})
    if args.config:
        file_values.update(read_config_file(args.config))
    overrides = {key: getattr(args, key) for key in KEYS if getattr(args, key, None) is not None}
    overrides.update(parse_set_pairs(args.set))
    return resolve_config(file_values, overrides)


def _load_graph(dataset_dir, require=("train",)):
    if not dataset_dir:
        raise ConfigError("dataset_dir is not set")
    if not os.path.isdir(dataset_dir):
        raise ConfigError(f"dataset directory not found: {dataset_dir}")
    return KnowledgeGraph.from_directory(dataset_dir, require=require)


def run_train(config, registry_url=None):
    """
    Train a model as described by ``config``.

    Returns:
        dict[str, str]: artifact name -> path (config, log, checkpoint, ledger)
    """
    kg = _load_graph(config.dataset_dir, require=("train", "valid"))
    config_path = write_config(config, config.output_dir)
    print(config.to_json())

    model = HitterModel(config.model_config(), kg.vocab.num_entities, kg.vocab.num_relations, seed=config.seed)
    logger.info(f"Model has {model.parameter_count()} parameters")
    if config.preset == "fb15k237":
        try:
            model.check_parameter_budget()
        except HitterError as e:
            logger.warning(f"Parameter count outside the expected band: {e}")

    registry = None
    if registry_url:
        registry = RunRegistry(init_db(registry_url)())
        registry.start(config.preset, config.seed, config.to_flat())

    trainer = Trainer(
        model,
        kg,
        config.train_config(),
        config.sampling,
        config.mep_config(),
        eval_cfg=config.eval_config(),
        output_dir=config.output_dir,
        registry=registry,
        checkpoint_extra={"run_config": config.to_flat()},
    )
    with run_log(config.output_dir) as log_path:
        ledger = trainer.fit()
        if ledger.best_mrr is not None:
            logger.info(f"Best dev MRR {ledger.best_mrr:.4f} at epoch {ledger.best_epoch}")
    return {
        "config": config_path,
        "log": log_path,
        "checkpoint": os.path.join(config.output_dir, "best.ckpt"),
        "ledger": os.path.join(config.output_dir, "ledger.csv"),
    }


def run_eval(checkpoint_path, split, args):
    """
    Evaluate a checkpoint on one split and write its reports.

    Returns:
        EvaluationResult
    """
    model, stored = load_checkpoint(checkpoint_path)
    extra = stored.get("extra", {})
    config = _config_from_args(args, base=extra.get("run_config"))
    kg = _load_graph(config.dataset_dir)
    if "vocab" in extra and extra["vocab"] != kg.vocab.to_dict():
        raise VocabError(f"{config.dataset_dir} does not match the vocabulary stored in {checkpoint_path}")
    if split not in kg.splits or not len(kg.splits[split]):
        raise ConfigError(f"split {split!r} is empty or missing in {config.dataset_dir}")

    result = evaluate_split(model, kg, kg.splits[split], config.sampling, config.eval_config())
    write_reports(result, kg, config.output_dir, split)
    print(result.report.to_json())
    return result


def run_stats(dataset_dir, caps):
    kg = _load_graph(dataset_dir, require=())
    stats = json.loads(kg.dataset_stats().to_json())
    stats["train_avg_degree"] = round(kg.train_avg_degree(), 1)
    stats["neighborhood_coverage"] = {str(cap): round(kg.neighborhood_coverage(cap), 4) for cap in caps}
    print(json.dumps(stats, sort_keys=True))
    return stats


def _emit(frame, output):
    if output:
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        frame.to_csv(output, index=False)
        logger.info(f"Wrote {output}")
    else:
        print(frame.to_csv(index=False), end="")


_BREAKDOWNS = {
    "relations": lambda queries, kg: breakdown_by_relation(queries, kg.vocab),
    "hops": mrr_by_hops,
    "categories": breakdown_by_category,
}


def _read_queries(path, kg):
    if not os.path.exists(path):
        raise ConfigError(f"ranks file not found: {path}")
    return queries_from_frame(pd.read_csv(path), kg.vocab)


def run_analyze(args):
    if args.analysis == "nearest":
        model, stored = load_checkpoint(args.checkpoint)
        vocab = stored.get("extra", {}).get("vocab")
        if vocab is None:
            raise ConfigError(f"{args.checkpoint} carries no vocabulary")
        names = vocab["entities"]
        if args.entities:
            lookup = {name: i for i, name in enumerate(names)}
            unknown = [name for name in args.entities if name not in lookup]
            if unknown:
                raise VocabError(f"unknown entities {unknown}")
            ids = [lookup[name] for name in args.entities]
        else:
            ids = list(range(min(args.first, len(names))))
        frame = nearest_table(model.entity_embeddings.data, ids, args.k, names)
    elif args.analysis == "compare":
        kg = _load_graph(args.dataset_dir)
        breakdown = _BREAKDOWNS[args.by]
        frame = compare_breakdowns(
            breakdown(_read_queries(args.base, kg), kg),
            breakdown(_read_queries(args.other, kg), kg),
        )
    else:
        kg = _load_graph(args.dataset_dir)
        frame = rows_frame(_BREAKDOWNS[args.analysis](_read_queries(args.ranks, kg), kg))
    _emit(frame, args.output)
    return frame


def _add_config_flags(parser):
    """One flag per flat config key, plus --config FILE and --set key=value."""
    parser.add_argument("--config", help="flat TOML file, or the config.json echo of an earlier run")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    group = parser.add_argument_group("config keys")
    for key, (_, expected) in sorted(KEYS.items()):
        flag = "--" + key.replace("_", "-")
        if expected is bool:
            group.add_argument(flag, dest=key, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            group.add_argument(flag, dest=key, default=None, metavar=expected.__name__.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="hitter", description="Hierarchical Transformer link prediction workbench")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model and keep the best checkpoint")
    _add_config_flags(train)
    train.add_argument("--registry", action="store_true", help="record the run in the DATABASE_URL registry")

    evaluate = commands.add_parser("eval", help="filtered ranking evaluation of a checkpoint")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--split", default="test", choices=SPLITS)
    _add_config_flags(evaluate)

    analyze = commands.add_parser("analyze", help="breakdowns and nearest neighbours")
    analyses = analyze.add_subparsers(dest="analysis", required=True)
    nearest = analyses.add_parser("nearest", help="nearest entities by cosine similarity")
    nearest.add_argument("checkpoint")
    nearest.add_argument("--entities", nargs="+")
    nearest.add_argument("--first", type=int, default=5)
    nearest.add_argument("--k", type=int, default=5)
    nearest.add_argument("--output")
    for name in ("hops", "relations", "categories"):
        sub = analyses.add_parser(name, help=f"MRR by {name} from an eval ranks CSV")
        sub.add_argument("ranks")
        sub.add_argument("--dataset-dir", required=True)
        sub.add_argument("--output")
    compare = analyses.add_parser("compare", help="gain of one ranks CSV over another")
    compare.add_argument("base")
    compare.add_argument("other")
    compare.add_argument("--dataset-dir", required=True)
    compare.add_argument("--by", choices=sorted(_BREAKDOWNS), default="relations")
    compare.add_argument("--output")

    stats = commands.add_parser("stats", help="dataset statistics as JSON")
    stats.add_argument("dataset_dir")
    stats.add_argument(
        "--cap",
        type=int,
        action="append",
        help="neighbourhood cap for the coverage report (repeatable)",
    )

    synthetic = commands.add_parser("gen-synthetic", help="write a synthetic dataset")
    synthetic.add_argument("output_dir")
    synthetic.add_argument("--entities", type=int, default=200)
    synthetic.add_argument("--relations", type=int, default=3)
    synthetic.add_argument("--pattern", choices=PATTERNS, default="composition")
    synthetic.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    """Command-line entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level(logging.DEBUG)

    try:
        if args.command == "train":
            run_train(_config_from_args(args), registry_url=DATABASE_URL if args.registry else None)
        elif args.command == "eval":
            run_eval(args.checkpoint, args.split, args)
        elif args.command == "analyze":
            run_analyze(args)
        elif args.command == "stats":
            caps = args.cap or sorted({values["neighbor_cap"] for values in PRESETS.values() if values})
            run_stats(args.dataset_dir, caps)
        elif args.command == "gen-synthetic":
            gen_synthetic(args.output_dir, args.entities, args.relations, args.pattern, args.seed)
    except (HitterError, FileNotFoundError) as e:
        logger.critical(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
