"""
Query examples and padded batches for training and evaluation.

Each triple (s, r, o) yields an object query (s, r -> o) and a subject query
(o, reciprocal(r) -> s). Training examples lose the edge they were built from,
get a uniformly sampled neighbourhood and a masked-entity perturbation of the
source; evaluation examples keep the full neighbourhood up to the cap.
"""

import math
import queue
import threading
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from errors import ConfigError, ContractError
from logger import get_logger

logger = get_logger(__name__)

PAD = -1


class Perturbation(IntEnum):
    NOT_SELECTED = 0
    MASK = 1
    REPLACE = 2
    KEEP = 3


@dataclass(frozen=True)
class QueryExample:
    """
    One incomplete triple with its sampled neighbourhood.

    Attributes:
        src (int): source entity
        predicate (int): relation id, possibly a reciprocal
        target (int): entity to predict
        neighbors (tuple): (relation id, entity id) pairs of the source
        perturbation (Perturbation): masked-entity treatment of the source
        replacement (int or None): entity drawn for Perturbation.REPLACE
    """

    src: int
    predicate: int
    target: int
    neighbors: tuple = ()
    perturbation: Perturbation = Perturbation.NOT_SELECTED
    replacement: int = None


@dataclass(frozen=True)
class MepConfig:
    """
    Masked entity prediction settings.

    ``select_prob`` picks examples; within the selected ones the three fractions
    split them into mask / random replacement / unchanged.
    """

    select_prob: float = 0.0
    mask_frac: float = 1.0
    replace_frac: float = 0.0
    keep_frac: float = 0.0
    use_aux_loss: bool = False

    def __post_init__(self):
        for key in ("select_prob", "mask_frac", "replace_frac", "keep_frac"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{key} must be in [0, 1], got {value}")
        total = self.mask_frac + self.replace_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mask_frac + replace_frac + keep_frac must be 1, got {total}")


@dataclass(frozen=True)
class SamplingConfig:
    neighbor_cap: int = 50
    train_keep_frac: float = 1.0
    remove_all_gold_pairs: bool = False

    def __post_init__(self):
        if self.neighbor_cap < 0:
            raise ConfigError(f"neighbor_cap must be non-negative, got {self.neighbor_cap}")
        if not 0.0 < self.train_keep_frac <= 1.0:
            raise ConfigError(f"train_keep_frac must be in (0, 1], got {self.train_keep_frac}")


@dataclass
class Batch:
    """
    Padded index matrices for B examples with neighbour capacity C.

    Attributes:
        source_ids (np.ndarray): [B] source slot ids after perturbation; the
            [MASK] token is ``mask_token_id``
        predicate_ids (np.ndarray): [B]
        neighbor_relations (np.ndarray): [B, C], PAD at padding slots
        neighbor_entities (np.ndarray): [B, C], PAD at padding slots
        neighbor_mask (np.ndarray): [B, C] bool, false exactly at padding
        perturbations (np.ndarray): [B] Perturbation codes
        target_ids (np.ndarray): [B]
        original_source_ids (np.ndarray): [B] unperturbed sources (MEP labels)
        mask_token_id (int): id standing for [MASK] in ``source_ids``
    """

    source_ids: np.ndarray
    predicate_ids: np.ndarray
    neighbor_relations: np.ndarray
    neighbor_entities: np.ndarray
    neighbor_mask: np.ndarray
    perturbations: np.ndarray
    target_ids: np.ndarray
    original_source_ids: np.ndarray
    mask_token_id: int
    replacements: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.source_ids)

    @property
    def cap(self):
        return self.neighbor_mask.shape[1]

    def selected(self):
        return self.perturbations != Perturbation.NOT_SELECTED


def example_neighbors(neighbor_index, src, predicate, target, mode, remove_all_gold_pairs=False):
    """
    Neighbourhood pairs of ``src`` for one query.

    In train mode the edge the query was built from, (predicate, target), is
    removed; with ``remove_all_gold_pairs`` every pair pointing at the target is.
    """
    relations, entities = neighbor_index.pair_arrays(src)
    if mode == "train" and len(relations):
        if remove_all_gold_pairs:
            keep = entities != target
        else:
            keep = ~((relations == predicate) & (entities == target))
        relations, entities = relations[keep], entities[keep]
    return tuple(zip(relations.tolist(), entities.tolist()))


def build_query_examples(triples, neighbor_index, vocab, mode="train", remove_all_gold_pairs=False):
    """
    Stream the two query examples of every triple.

    Args:
        triples (TripleSet): triples to turn into queries
        neighbor_index (NeighborIndex): training adjacency
        vocab (Vocab): supplies reciprocal relation ids
        mode (str): "train" removes the ground-truth pair, "eval" keeps everything

    Yields:
        QueryExample: (s, r -> o) then (o, reciprocal(r) -> s) per triple
    """
    for s, r, o in triples.triples:
        s, r, o = int(s), int(r), int(o)
        yield _query(neighbor_index, s, r, o, mode, remove_all_gold_pairs)
        yield _query(neighbor_index, o, vocab.reciprocal(r), s, mode, remove_all_gold_pairs)


def _query(neighbor_index, src, predicate, target, mode, remove_all_gold_pairs):
    return QueryExample(
        src=src,
        predicate=predicate,
        target=target,
        neighbors=example_neighbors(neighbor_index, src, predicate, target, mode, remove_all_gold_pairs),
    )


def sample_neighborhood(full, cap, train_keep_frac, rng, mode="train"):
    """
    Uniformly sample a neighbourhood.

    First truncates to at most ``cap`` pairs by sampling without replacement;
    in train mode then keeps ceil(train_keep_frac * k) of the k retained pairs.
    Relative order of the surviving pairs is preserved.
    """
    if cap < 0:
        raise ContractError(f"cap must be non-negative, got {cap}")
    if not 0.0 < train_keep_frac <= 1.0:
        raise ContractError(f"train_keep_frac must be in (0, 1], got {train_keep_frac}")
    pairs = list(full)
    if len(pairs) > cap:
        chosen = np.sort(rng.choice(len(pairs), size=cap, replace=False))
        pairs = [pairs[i] for i in chosen]
    if mode == "train" and train_keep_frac < 1.0 and pairs:
        keep = math.ceil(train_keep_frac * len(pairs) - 1e-9)
        chosen = np.sort(rng.choice(len(pairs), size=keep, replace=False))
        pairs = [pairs[i] for i in chosen]
    return pairs


def apply_mep(example, cfg, rng, num_entities):
    """
    Draw the masked-entity perturbation of an example.

    Returns:
        QueryExample: copy with ``perturbation`` (and ``replacement``) set
    """
    if rng.random() >= cfg.select_prob:
        return replace(example, perturbation=Perturbation.NOT_SELECTED, replacement=None)
    u = rng.random()
    if u < cfg.mask_frac:
        return replace(example, perturbation=Perturbation.MASK, replacement=None)
    if u < cfg.mask_frac + cfg.replace_frac:
        drawn = int(rng.integers(num_entities))
        return replace(example, perturbation=Perturbation.REPLACE, replacement=drawn)
    return replace(example, perturbation=Perturbation.KEEP, replacement=None)


def collate(examples, cap, mask_token_id):
    """
    Pack examples into padded matrices.

    Args:
        examples (list[QueryExample]): examples with at most ``cap`` neighbours
        cap (int): neighbour capacity C
        mask_token_id (int): source-slot id used for Perturbation.MASK

    Returns:
        Batch
    """
    size = len(examples)
    relations = np.full((size, cap), PAD, dtype=np.int64)
    entities = np.full((size, cap), PAD, dtype=np.int64)
    valid = np.zeros((size, cap), dtype=bool)
    source = np.empty(size, dtype=np.int64)
    replacements = np.full(size, PAD, dtype=np.int64)
    for i, example in enumerate(examples):
        count = len(example.neighbors)
        if count > cap:
            raise ContractError(f"example {i} has {count} neighbours, more than the cap {cap}")
        if count:
            pairs = np.asarray(example.neighbors, dtype=np.int64)
            relations[i, :count] = pairs[:, 0]
            entities[i, :count] = pairs[:, 1]
            valid[i, :count] = True
        if example.perturbation == Perturbation.MASK:
            source[i] = mask_token_id
        elif example.perturbation == Perturbation.REPLACE:
            source[i] = example.replacement
            replacements[i] = example.replacement
        else:
            source[i] = example.src
    return Batch(
        source_ids=source,
        predicate_ids=np.array([e.predicate for e in examples], dtype=np.int64),
        neighbor_relations=relations,
        neighbor_entities=entities,
        neighbor_mask=valid,
        perturbations=np.array([int(e.perturbation) for e in examples], dtype=np.int64),
        target_ids=np.array([e.target for e in examples], dtype=np.int64),
        original_source_ids=np.array([e.src for e in examples], dtype=np.int64),
        mask_token_id=mask_token_id,
        replacements=replacements,
    )


def decollate(batch):
    """Recover the examples a batch was collated from."""
    examples = []
    for i in range(len(batch)):
        valid = batch.neighbor_mask[i]
        perturbation = Perturbation(int(batch.perturbations[i]))
        examples.append(
            QueryExample(
                src=int(batch.original_source_ids[i]),
                predicate=int(batch.predicate_ids[i]),
                target=int(batch.target_ids[i]),
                neighbors=tuple(
                    zip(
                        batch.neighbor_relations[i, valid].tolist(),
                        batch.neighbor_entities[i, valid].tolist(),
                    )
                ),
                perturbation=perturbation,
                replacement=int(batch.replacements[i]) if perturbation == Perturbation.REPLACE else None,
            )
        )
    return examples


def leakage_violations(batch):
    """Indices of examples whose neighbourhood still holds their own (predicate, target) edge."""
    hit = (
        (batch.neighbor_relations == batch.predicate_ids[:, None])
        & (batch.neighbor_entities == batch.target_ids[:, None])
        & batch.neighbor_mask
    )
    return np.nonzero(hit.any(axis=1))[0].tolist()


class QueryBatcher:
    """
    Epoch iterator over the training queries of a split.

    Each epoch uses its own generator seeded by (seed, epoch), so the batches of
    an epoch do not depend on which epochs ran before it.
    """

    def __init__(self, kg, triples, sampling, mep, batch_size, seed=0, debug_leakage_check=False):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
        self.kg = kg
        self.triples = triples
        self.sampling = sampling
        self.mep = mep
        self.batch_size = batch_size
        self.seed = seed
        self.debug_leakage_check = debug_leakage_check

    @property
    def num_examples(self):
        return 2 * len(self.triples)

    @property
    def steps_per_epoch(self):
        return math.ceil(self.num_examples / self.batch_size)

    def _example(self, index, rng):
        s, r, o = (int(v) for v in self.triples.triples[index // 2])
        if index % 2:
            s, r, o = o, self.kg.vocab.reciprocal(r), s
        neighbors = example_neighbors(
            self.kg.neighbors, s, r, o, "train", self.sampling.remove_all_gold_pairs
        )
        sampled = sample_neighborhood(
            neighbors, self.sampling.neighbor_cap, self.sampling.train_keep_frac, rng, mode="train"
        )
        example = QueryExample(src=s, predicate=r, target=o, neighbors=tuple(sampled))
        return apply_mep(example, self.mep, rng, self.kg.vocab.num_entities)

    def epoch(self, epoch_index):
        """
        Yield the shuffled training batches of one epoch.

        Args:
            epoch_index (int): epoch number, part of the generator seed
        """
        rng = np.random.default_rng([self.seed, epoch_index])
        order = rng.permutation(self.num_examples)
        mask_token_id = self.kg.vocab.num_entities
        for start in range(0, len(order), self.batch_size):
            examples = [self._example(int(i), rng) for i in order[start : start + self.batch_size]]
            batch = collate(examples, self.sampling.neighbor_cap, mask_token_id)
            if self.debug_leakage_check:
                leaked = leakage_violations(batch)
                if leaked:
                    raise ContractError(f"ground-truth edge leaked into neighbourhoods of examples {leaked}")
            yield batch


def eval_examples(kg, triples, sampling, eval_seed=0, drop_query_edge=False):
    """
    Evaluation queries with the full neighbourhood, truncated to the cap by
    uniform sampling seeded per source entity.

    With ``drop_query_edge`` each query loses its own edge the way training
    queries do, so training triples are scored on the neighbourhoods they
    were trained with.
    """
    mode = "train" if drop_query_edge else "eval"
    queries = build_query_examples(triples, kg.neighbors, kg.vocab, mode, sampling.remove_all_gold_pairs)
    for example in queries:
        rng = np.random.default_rng([eval_seed, example.src])
        neighbors = sample_neighborhood(example.neighbors, sampling.neighbor_cap, 1.0, rng, mode="eval")
        yield replace(example, neighbors=tuple(neighbors))


def prefetch(iterator, depth):
    """
    Produce items of ``iterator`` on a worker thread through a bounded queue.

    Order is preserved; exceptions raised by the producer are re-raised here.
    """
    if depth <= 0:
        yield from iterator
        return

    items = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def produce():
        try:
            for item in iterator:
                if stop.is_set():
                    return
                items.put(item)
        except Exception as e:
            items.put(e)
            return
        items.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = items.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                items.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.1)
