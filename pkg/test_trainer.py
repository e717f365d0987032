import json
import os

import numpy as np
import pandas as pd
import pytest

from batcher import MepConfig, QueryBatcher, SamplingConfig
from checkpoint import load_checkpoint
from errors import ConfigError, ContractError, TrainingError
from evaluator import EvalConfig, evaluate_split
from kg_store import KnowledgeGraph, TripleSet
from model import HitterConfig, HitterModel
from synthetic import gen_synthetic
from trainer import Trainer, TrainConfig, is_layer_norm_param, lr_at_step

SLOW = pytest.mark.skipif(os.getenv("HITTER_SLOW_TESTS") != "1", reason="set HITTER_SLOW_TESTS=1 for learning runs")

TINY = HitterConfig(d_model=8, ffn_dim=16, heads=2, entity_layers=1, context_layers=1, dropout=0.0, embedding_dropout=0.0)
SAMPLING = SamplingConfig(neighbor_cap=4, train_keep_frac=1.0)
MEP = MepConfig(select_prob=0.5, mask_frac=0.6, replace_frac=0.2, keep_frac=0.2, use_aux_loss=True)
QUIET_EVAL = EvalConfig(progress=False)


def _toy_graph():
    train = [(f"e{i}", f"r{i % 2}", f"e{(i + 1) % 8}") for i in range(8)] + [("e0", "r1", "e4"), ("e2", "r0", "e6")]
    return KnowledgeGraph.from_names(train, valid=[("e1", "r0", "e3"), ("e5", "r1", "e7")])


def _trainer(kg, output_dir=None, seed=0, model_cfg=TINY, mep=MEP, eval_cfg=QUIET_EVAL, **overrides):
    settings = dict(lr=0.01, batch_size=6, max_epochs=3, eval_every_epochs=1, patience=5, seed=seed, progress=False)
    settings.update(overrides)
    model = HitterModel(model_cfg, kg.vocab.num_entities, kg.vocab.num_relations, seed=seed)
    return Trainer(model, kg, TrainConfig(**settings), SAMPLING, mep, eval_cfg=eval_cfg, output_dir=output_dir)


def test_lr_schedule_examples():
    assert lr_at_step(0, 100, 0.01) == 0.0
    assert abs(lr_at_step(5, 100, 0.01) - 0.005) < 1e-12
    assert abs(lr_at_step(55, 100, 0.01) - 0.005) < 1e-12
    assert lr_at_step(100, 100, 0.01) == 0.0


def test_lr_schedule_peaks_at_end_of_warmup():
    schedule = [lr_at_step(step, 230, 0.01) for step in range(231)]
    assert max(schedule) == 0.01
    assert int(np.argmax(schedule)) == 23
    steps = np.diff(schedule)
    assert np.all(np.abs(steps) <= 0.01 / 23 + 1e-12)


def test_lr_schedule_without_warmup_starts_at_peak():
    # fewer than ten steps leave no warmup step
    assert lr_at_step(0, 9, 0.01) == 0.01
    assert abs(lr_at_step(3, 9, 0.01) - 0.01 * 6 / 9) < 1e-12
    assert lr_at_step(9, 9, 0.01) == 0.0
    assert lr_at_step(0, 0, 0.01) == 0.01


def test_lr_schedule_rejects_out_of_range_steps():
    with pytest.raises(ContractError):
        lr_at_step(-1, 100, 0.01)
    with pytest.raises(ContractError):
        lr_at_step(101, 100, 0.01)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(adam_style="sgd")


def test_layer_norm_parameters_are_not_decayed():
    trainer = _trainer(_toy_graph())
    excluded = [name for name, decayed in zip(trainer.param_names, trainer.optimizer.decay_mask) if not decayed]
    assert excluded
    assert all(is_layer_norm_param(name) for name in excluded)
    assert "entity_embeddings" not in excluded


def test_identical_seeds_give_identical_runs():
    kg = _toy_graph()
    first, second = _trainer(kg, seed=4), _trainer(kg, seed=4)
    a, b = first.fit(), second.fit()
    assert a.losses() == b.losses()
    assert [row.dev_mrr for row in a.rows] == [row.dev_mrr for row in b.rows]
    assert [row.lr for row in a.rows] == [row.lr for row in b.rows]
    for (name, x), (_, y) in zip(first.model.named_parameters(), second.model.named_parameters()):
        assert np.array_equal(x.data, y.data), name


def test_zero_lr_leaves_parameters_unchanged():
    kg = _toy_graph()
    trainer = _trainer(kg, lr=0.0)
    before = trainer.model.state_dict()
    trainer.fit()
    for name, value in trainer.model.state_dict().items():
        assert np.array_equal(value, before[name]), name


def test_empty_train_set_is_a_config_error():
    kg = _toy_graph()
    empty = TripleSet(np.zeros((0, 3), dtype=np.int64), "train")
    with pytest.raises(ConfigError):
        _trainer(kg).fit(train=empty)


def test_zero_epochs_is_a_training_error():
    with pytest.raises(TrainingError, match="no training performed"):
        _trainer(_toy_graph(), max_epochs=0).fit()


def test_non_finite_loss_aborts_with_dump(tmp_path):
    trainer = _trainer(_toy_graph(), output_dir=str(tmp_path))
    trainer.model.entity_embeddings.data[...] = 3e38
    with pytest.raises(TrainingError, match="non-finite"):
        trainer.fit()
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text(encoding="utf-8"))
    assert dump["step"] == 0
    assert dump["source_ids"]
    # the ledger is still written on abort
    assert (tmp_path / "ledger.csv").exists()


def test_patience_stops_at_second_evaluation(tmp_path):
    trainer = _trainer(_toy_graph(), output_dir=str(tmp_path), lr=0.0, patience=1, max_epochs=10)
    ledger = trainer.fit()
    assert [row.epoch for row in ledger.rows] == [1, 2]
    assert ledger.best_epoch == 1


def test_best_checkpoint_reproduces_dev_mrr(tmp_path):
    kg = _toy_graph()
    trainer = _trainer(kg, output_dir=str(tmp_path), max_epochs=4)
    ledger = trainer.fit()
    assert ledger.best_mrr == max(row.dev_mrr for row in ledger.rows)

    model, stored = load_checkpoint(str(tmp_path / "best.ckpt"))
    assert stored["extra"]["epoch"] == ledger.best_epoch
    assert stored["extra"]["vocab"] == kg.vocab.to_dict()
    mrr = evaluate_split(model, kg, kg.splits["valid"], SAMPLING, QUIET_EVAL).report.mrr
    assert abs(mrr - ledger.best_mrr) < 1e-6
    # the trainer's model ends on the best parameters
    assert abs(trainer.evaluate(kg.splits["valid"]).report.mrr - ledger.best_mrr) < 1e-6


def test_ledger_csv(tmp_path):
    _trainer(_toy_graph(), output_dir=str(tmp_path), max_epochs=2).fit()
    frame = pd.read_csv(tmp_path / "ledger.csv")
    assert list(frame.columns) == ["epoch", "loss", "dev_mrr", "lr", "seconds"]
    assert frame["epoch"].tolist() == [1, 2]
    assert (frame["loss"] > 0).all()


def test_prefetch_does_not_change_the_run():
    kg = _toy_graph()
    plain = _trainer(kg, seed=2).fit()
    prefetched = _trainer(kg, seed=2, prefetch_batches=2).fit()
    assert plain.losses() == prefetched.losses()


def test_no_context_model_trains():
    kg = _toy_graph()
    cfg = HitterConfig(**{**vars(TINY), "context_enabled": False})
    ledger = _trainer(kg, model_cfg=cfg).fit()
    assert len(ledger.rows) == 3
    assert all(np.isfinite(ledger.losses()))


def _ring_graph(size=50):
    train = [(f"e{i}", "next", f"e{(i + 1) % size}") for i in range(size)]
    return KnowledgeGraph.from_names(train, valid=train)


# training triples are scored without their own edge, as they were trained
TRAIN_SPLIT_EVAL = EvalConfig(progress=False, drop_query_edge=True)
RING = HitterConfig(d_model=32, ffn_dim=64, heads=4, entity_layers=1, context_layers=1, dropout=0.0, embedding_dropout=0.0)


@SLOW
def test_toy_graph_is_learned():
    kg = _ring_graph()
    trainer = _trainer(
        kg,
        model_cfg=RING,
        mep=MepConfig(),
        eval_cfg=TRAIN_SPLIT_EVAL,
        lr=0.002,
        batch_size=10,
        max_epochs=200,
        eval_every_epochs=20,
        patience=10,
    )
    trainer.fit()
    report = evaluate_split(trainer.model, kg, kg.splits["train"], SAMPLING, TRAIN_SPLIT_EVAL).report
    assert report.hits1 >= 0.95


@SLOW
def test_loss_decreases_on_toy_graph():
    kg = _ring_graph()
    trainer = _trainer(kg, model_cfg=RING, mep=MepConfig(), lr=0.003)
    # one full-batch step per epoch
    batcher = QueryBatcher(kg, kg.train, SAMPLING, MepConfig(), 100, seed=0)
    trainer.total_steps = 50
    losses = [trainer.train_step(batch) for epoch in range(1, 51) for batch in batcher.epoch(epoch)]
    assert len(losses) == 50
    smoothed = [np.mean(losses[i : i + 10]) for i in range(0, 50, 10)]
    assert all(b < a for a, b in zip(smoothed, smoothed[1:]))


SMALL = HitterConfig(d_model=64, ffn_dim=128, heads=4, entity_layers=2, context_layers=2, dropout=0.1, embedding_dropout=0.0)
COMPOSITION_MEP = MepConfig(0.8, 0.6, 0.12, 0.28, True)


def _synthetic_run(tmp_path, seed, context=True, mep=True):
    dataset = gen_synthetic(str(tmp_path / f"data{seed}"), entities=200, relations=3, pattern="composition", seed=0)
    kg = KnowledgeGraph.from_directory(dataset.output_dir)
    cfg = HitterConfig(**{**vars(SMALL), "context_enabled": context, "mep_aux_enabled": mep and context})
    mep_cfg = COMPOSITION_MEP if mep and context else MepConfig()
    model = HitterModel(cfg, kg.vocab.num_entities, kg.vocab.num_relations, seed=seed)
    train_cfg = TrainConfig(lr=0.002, batch_size=64, max_epochs=300, eval_every_epochs=10, patience=10, seed=seed, progress=False)
    sampling = SamplingConfig(neighbor_cap=12, train_keep_frac=1.0)
    Trainer(model, kg, train_cfg, sampling, mep_cfg, eval_cfg=QUIET_EVAL).fit()
    return evaluate_split(model, kg, kg.splits["test"], sampling, QUIET_EVAL).report


@SLOW
def test_context_beats_the_baseline_on_composition(tmp_path):
    full = _synthetic_run(tmp_path, seed=0)
    baseline = _synthetic_run(tmp_path, seed=0, context=False)
    assert full.hits1 >= 0.90
    assert full.hits1 - baseline.hits1 >= 0.25


@SLOW
def test_ablation_ordering(tmp_path):
    votes = 0
    for seed in range(3):
        full = _synthetic_run(tmp_path, seed).mrr
        no_mep = _synthetic_run(tmp_path, seed, mep=False).mrr
        no_context = _synthetic_run(tmp_path, seed, context=False).mrr
        votes += full >= no_mep >= no_context
    assert votes >= 2


if __name__ == "__main__":
    pytest.main([__file__])
