"""
Optimization loop for the hitter workbench.

Adam with a linear warmup / linear decay schedule, periodic validation,
early stopping on validation MRR and best-checkpoint retention.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_core as tc
from batcher import QueryBatcher, prefetch
from checkpoint import save_checkpoint
from errors import ConfigError, ContractError, NonFiniteError, TrainingError
from evaluator import EvalConfig, evaluate_split
from logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimisation settings.

    Attributes:
        lr (float): peak learning rate
        weight_decay (float): decay rate
        batch_size (int): examples per step
        max_epochs (int): epoch limit
        warmup_fraction (float): share of the steps spent warming up
        eval_every_epochs (int): validation cadence
        patience (int): validations without improvement before stopping
        seed (int): batching seed
        adam_style (str): "decoupled" or "coupled" weight decay
        decay_layer_norm (bool): also decay layer-norm gains and biases
        clip_norm (float): global gradient norm limit, 0 disables clipping
        prefetch_batches (int): batches built ahead on a worker thread, 0 disables
        debug_leakage_check (bool): assert no ground-truth edge reaches a neighbourhood
        progress (bool): show progress bars
    """

    lr: float = 0.01
    weight_decay: float = 0.1
    batch_size: int = 512
    max_epochs: int = 500
    warmup_fraction: float = 0.1
    eval_every_epochs: int = 5
    patience: int = 10
    seed: int = 0
    adam_style: str = "decoupled"
    decay_layer_norm: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0
    prefetch_batches: int = 0
    debug_leakage_check: bool = False
    progress: bool = True

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.max_epochs < 0 or self.eval_every_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0, eval_every_epochs and patience >= 1")
        if self.adam_style not in ("decoupled", "coupled"):
            raise ConfigError(f"adam_style must be 'decoupled' or 'coupled', got {self.adam_style!r}")


@dataclass
class LedgerRow:
    epoch: int
    loss: float
    dev_mrr: float
    lr: float
    seconds: float


@dataclass
class RunLedger:
    rows: list = field(default_factory=list)
    best_mrr: float = None
    best_epoch: int = None

    def record(self, row):
        self.rows.append(row)
        if row.dev_mrr is not None and (self.best_mrr is None or row.dev_mrr > self.best_mrr):
            self.best_mrr = row.dev_mrr
            self.best_epoch = row.epoch

    def losses(self):
        return [row.loss for row in self.rows]

    def to_frame(self):
        return pd.DataFrame(
            [vars(row) for row in self.rows], columns=["epoch", "loss", "dev_mrr", "lr", "seconds"]
        )

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def lr_at_step(step, total_steps, peak_lr, warmup_fraction=0.1):
    """
    Linear warmup from 0 to ``peak_lr`` over the first floor(warmup_fraction * total)
    steps, then linear decay to 0 at ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = math.floor(warmup_fraction * total_steps)
    if step < warmup:
        return peak_lr * step / warmup
    # runs shorter than 1 / warmup_fraction steps have no warmup and start at the peak
    if step == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def is_layer_norm_param(name):
    return name.endswith("norm.gain") or name.endswith("norm.bias")


class Trainer:
    """
    Drives training of a HitterModel on a KnowledgeGraph.

    Args:
        model (HitterModel): model to train in place
        kg (KnowledgeGraph): dataset
        train_cfg (TrainConfig): optimisation settings
        sampling (SamplingConfig): neighbourhood cap and training keep fraction
        mep (MepConfig): masked entity prediction settings
        eval_cfg (EvalConfig, optional): validation settings
        output_dir (str, optional): where best.ckpt, ledger.csv and dumps go
        registry (RunRegistry, optional): database run registry
        checkpoint_extra (dict, optional): metadata stored in best.ckpt next to the vocabulary
    """

    def __init__(
        self, model, kg, train_cfg, sampling, mep, eval_cfg=None, output_dir=None, registry=None, checkpoint_extra=None
    ):
        self.model = model
        self.kg = kg
        self.cfg = train_cfg
        self.sampling = sampling
        self.mep = mep
        self.eval_cfg = eval_cfg or EvalConfig()
        self.output_dir = output_dir
        self.registry = registry
        self.checkpoint_extra = dict(checkpoint_extra or {})

        names = [name for name, _ in model.named_parameters()]
        self.param_names = names
        self.params = model.parameters()
        decay_mask = [train_cfg.decay_layer_norm or not is_layer_norm_param(n) for n in names]
        self.optimizer = tc.Adam(
            self.params,
            weight_decay=train_cfg.weight_decay,
            betas=(train_cfg.beta1, train_cfg.beta2),
            eps=train_cfg.adam_eps,
            decoupled=train_cfg.adam_style == "decoupled",
            decay_mask=decay_mask,
        )
        self.global_step = 0
        self.total_steps = 0
        self.last_lr = 0.0

    def current_lr(self):
        if not self.total_steps:
            return self.cfg.lr
        return lr_at_step(min(self.global_step, self.total_steps), self.total_steps, self.cfg.lr, self.cfg.warmup_fraction)

    def train_step(self, batch):
        """
        One forward / backward / Adam update.

        Returns:
            float: total loss L = L_LP + L_MEP of the batch
        """
        lr = self.current_lr()
        self.model.train()
        try:
            with tc.Tape() as tape:
                outputs = self.model.forward(batch)
                losses = self.model.losses(outputs, batch)
            grads = tc.backward(tape, losses.total, self.params)
        except NonFiniteError as e:
            self._dump_nonfinite(batch, str(e))
            raise TrainingError(f"non-finite values at step {self.global_step}: {e}") from e

        grad_list = [grads[p] for p in self.params]
        if self.cfg.clip_norm > 0:
            tc.clip_grad_norm(grad_list, self.cfg.clip_norm)
        self.optimizer.step(grad_list, lr)
        self.global_step += 1
        self.last_lr = lr
        return float(losses.total.data)

    def _dump_nonfinite(self, batch, message):
        dump = {
            "step": self.global_step,
            "message": message,
            "source_ids": batch.original_source_ids.tolist(),
            "predicate_ids": batch.predicate_ids.tolist(),
            "target_ids": batch.target_ids.tolist(),
        }
        logger.critical(f"Non-finite values at step {self.global_step}: {json.dumps(dump)}")
        if self.output_dir:
            os.makedirs(self.output_dir, exist_ok=True)
            with open(os.path.join(self.output_dir, "nonfinite_dump.json"), "w", encoding="utf-8") as handle:
                json.dump(dump, handle, indent=2)

    def evaluate(self, split):
        return evaluate_split(self.model, self.kg, split, self.sampling, self.eval_cfg)

    def fit(self, train=None, valid=None):
        """
        Train with periodic validation and early stopping.

        The best-MRR parameters are restored into the model when training ends.

        Args:
            train (TripleSet, optional): defaults to the graph's train split
            valid (TripleSet, optional): defaults to the graph's valid split

        Returns:
            RunLedger
        """
        train = train if train is not None else self.kg.splits["train"]
        valid = valid if valid is not None else self.kg.splits["valid"]
        if not len(train):
            raise ConfigError("empty train set")
        if self.cfg.max_epochs == 0:
            raise TrainingError("no training performed")

        batcher = QueryBatcher(
            self.kg,
            train,
            self.sampling,
            self.mep,
            self.cfg.batch_size,
            seed=self.cfg.seed,
            debug_leakage_check=self.cfg.debug_leakage_check,
        )
        self.total_steps = self.cfg.max_epochs * batcher.steps_per_epoch
        logger.info(
            f"Training {self.model.parameter_count()} parameters for up to {self.cfg.max_epochs} epochs "
            f"({batcher.steps_per_epoch} steps per epoch, {self.total_steps} scheduled steps)"
        )
        if not len(valid):
            logger.warning("Validation split is empty, keeping the final parameters")

        ledger = RunLedger()
        best_state = None
        stale_evals = 0
        status = "failed"
        try:
            for epoch in range(1, self.cfg.max_epochs + 1):
                started = time.perf_counter()
                batches = prefetch(batcher.epoch(epoch), self.cfg.prefetch_batches)
                losses = [
                    self.train_step(batch)
                    for batch in tqdm(
                        batches,
                        total=batcher.steps_per_epoch,
                        desc=f"epoch {epoch}",
                        disable=not self.cfg.progress,
                        leave=False,
                    )
                ]
                mean_loss = float(np.mean(losses))

                dev_mrr = None
                due = epoch % self.cfg.eval_every_epochs == 0 or epoch == self.cfg.max_epochs
                if due and len(valid):
                    dev_mrr = self.evaluate(valid).report.mrr
                    if ledger.best_mrr is None or dev_mrr > ledger.best_mrr:
                        best_state = self.model.state_dict()
                        stale_evals = 0
                        self._save_best(epoch, dev_mrr)
                    else:
                        stale_evals += 1

                row = LedgerRow(epoch, mean_loss, dev_mrr, self.last_lr, time.perf_counter() - started)
                ledger.record(row)
                if self.registry is not None:
                    self.registry.record_epoch(row)
                mrr_text = f", dev MRR {dev_mrr:.4f}" if dev_mrr is not None else ""
                logger.info(
                    f"Epoch {epoch}: loss {mean_loss:.4f}, lr {self.last_lr:.6f}, {row.seconds:.1f}s{mrr_text}"
                )

                if stale_evals >= self.cfg.patience:
                    logger.info(f"Early stopping after {stale_evals} evaluations without improvement")
                    break
            status = "finished"
        finally:
            if best_state is not None:
                self.model.load_state_dict(best_state)
            if self.output_dir:
                os.makedirs(self.output_dir, exist_ok=True)
                ledger.write_csv(os.path.join(self.output_dir, "ledger.csv"))
            if self.registry is not None:
                self.registry.finish(ledger, status)

        if ledger.best_mrr is not None:
            logger.info(f"Best dev MRR {ledger.best_mrr:.4f} at epoch {ledger.best_epoch}")
        elif self.output_dir:
            self._save_best(ledger.rows[-1].epoch, None)
        return ledger

    def _save_best(self, epoch, dev_mrr):
        if not self.output_dir:
            return
        os.makedirs(self.output_dir, exist_ok=True)
        extra = {**self.checkpoint_extra, "epoch": epoch, "dev_mrr": dev_mrr, "vocab": self.kg.vocab.to_dict()}
        save_checkpoint(os.path.join(self.output_dir, "best.ckpt"), self.model, extra=extra)
