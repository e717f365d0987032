"""
Triple storage for the hitter workbench.

This module reads TSV triple files, builds the entity and relation
vocabularies (with a reciprocal block appended to the relations) and serves
neighbourhood, filtering, hop-distance and statistics queries. Every index is
immutable after construction.
"""

import json
import os
from collections import defaultdict, deque
from dataclasses import asdict, dataclass

import numpy as np

from errors import ParseError, VocabError
from logger import get_logger

logger = get_logger(__name__)

SPLITS = ("train", "valid", "test")

UNREACHABLE = -1


class Vocab:
    """
    Name <-> id tables for entities and relations.

    Raw relations take ids [0, R); the reciprocal of relation r has id r + R,
    so the relation table has 2R entries once frozen.
    """

    def __init__(self):
        self.entity_names = []
        self.relation_names = []
        self._entity_ids = {}
        self._relation_ids = {}
        self.frozen = False

    @property
    def num_entities(self):
        return len(self.entity_names)

    @property
    def num_base_relations(self):
        return len(self.relation_names)

    @property
    def num_relations(self):
        """Size of the relation table including reciprocals."""
        return 2 * len(self.relation_names)

    def add_entity(self, name):
        if name not in self._entity_ids:
            if self.frozen:
                raise VocabError(f"unknown entity {name!r}")
            self._entity_ids[name] = len(self.entity_names)
            self.entity_names.append(name)
        return self._entity_ids[name]

    def add_relation(self, name):
        if name not in self._relation_ids:
            if self.frozen:
                raise VocabError(f"unknown relation {name!r}")
            self._relation_ids[name] = len(self.relation_names)
            self.relation_names.append(name)
        return self._relation_ids[name]

    def entity_id(self, name):
        try:
            return self._entity_ids[name]
        except KeyError:
            raise VocabError(f"unknown entity {name!r}") from None

    def relation_id(self, name):
        """Id of a relation name; names ending in ``_reciprocal`` map to the reciprocal block."""
        if name in self._relation_ids:
            return self._relation_ids[name]
        if name.endswith("_reciprocal") and name[: -len("_reciprocal")] in self._relation_ids:
            return self.reciprocal(self._relation_ids[name[: -len("_reciprocal")]])
        raise VocabError(f"unknown relation {name!r}")

    def entity_name(self, entity_id):
        if not 0 <= entity_id < self.num_entities:
            raise IndexError(f"entity id {entity_id} out of range")
        return self.entity_names[entity_id]

    def relation_name(self, relation_id):
        if not 0 <= relation_id < self.num_relations:
            raise IndexError(f"relation id {relation_id} out of range")
        base = self.base_relation(relation_id)
        name = self.relation_names[base]
        return name if base == relation_id else f"{name}_reciprocal"

    def reciprocal(self, relation_id):
        return (relation_id + self.num_base_relations) % self.num_relations

    def base_relation(self, relation_id):
        return relation_id % self.num_base_relations

    def is_reciprocal(self, relation_id):
        return relation_id >= self.num_base_relations

    def freeze(self):
        self.frozen = True
        return self

    def to_dict(self):
        return {"entities": list(self.entity_names), "relations": list(self.relation_names)}

    @classmethod
    def from_dict(cls, payload):
        vocab = cls()
        for name in payload["entities"]:
            vocab.add_entity(name)
        for name in payload["relations"]:
            vocab.add_relation(name)
        return vocab.freeze()


@dataclass(frozen=True)
class Triple:
    subject: int
    predicate: int
    object: int


class TripleSet:
    """
    Integer-encoded triples of one split, stored as an [n, 3] int64 array.

    Attributes:
        triples (np.ndarray): rows of (subject, predicate, object)
        name (str): split name, e.g. "train"
    """

    def __init__(self, triples, name=""):
        self.triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.name = name

    def __len__(self):
        return len(self.triples)

    def __iter__(self):
        for s, p, o in self.triples:
            yield Triple(int(s), int(p), int(o))

    def __repr__(self):
        return f"<TripleSet {self.name} n={len(self)}>"


def read_triples(path):
    """
    Parse a TSV triple file into name triples, dropping duplicates.

    Args:
        path (str): file with one subject<TAB>relation<TAB>object per line

    Returns:
        list[tuple[str, str, str]]: unique triples in first-appearance order
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"triple file not found: {path}")

    triples = []
    seen = set()
    duplicates = 0
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, line_number, f"expected 3 tab-separated fields, got {len(fields)}")
            triple = tuple(fields)
            if triple in seen:
                duplicates += 1
                continue
            seen.add(triple)
            triples.append(triple)
    if duplicates:
        logger.warning(f"Dropped {duplicates} duplicate triples from {path}")
    logger.debug(f"Read {len(triples)} triples from {path}")
    return triples


def build_vocab(name_triples):
    """
    Build a vocabulary with ids assigned in order of first appearance.

    Args:
        name_triples (iterable): (subject, relation, object) name tuples

    Returns:
        Vocab: frozen vocabulary; relation table includes the reciprocal block
    """
    vocab = Vocab()
    for s, r, o in name_triples:
        vocab.add_entity(s)
        vocab.add_relation(r)
        vocab.add_entity(o)
    return vocab.freeze()


def encode_triples(name_triples, vocab, name=""):
    rows = [(vocab.add_entity(s), vocab.add_relation(r), vocab.add_entity(o)) for s, r, o in name_triples]
    return TripleSet(rows, name=name)


def load_triples(path, vocab, mode="frozen", name=None):
    """
    Load and integer-encode a triple file.

    Args:
        path (str): TSV file
        vocab (Vocab): vocabulary to encode against
        mode (str): "build" adds unseen names to an unfrozen vocab,
            "frozen" rejects them with VocabError
        name (str, optional): split name

    Returns:
        TripleSet: encoded triples
    """
    if mode not in ("build", "frozen"):
        raise ValueError(f"unknown vocab mode {mode!r}")
    if mode == "build" and vocab.frozen:
        raise VocabError("cannot extend a frozen vocabulary")
    if mode == "frozen" and not vocab.frozen:
        vocab.freeze()
    split_name = name or os.path.splitext(os.path.basename(path))[0]
    return encode_triples(read_triples(path), vocab, name=split_name)


class NeighborIndex:
    """
    Training-graph adjacency: for entity e, the pairs (r, o) of its outgoing
    train triples and (reciprocal(r), s) of its incoming ones, in insertion order.

    Stored as CSR arrays over entity ids.
    """

    def __init__(self, offsets, relations, entities):
        self.offsets = offsets
        self.relations = relations
        self.entities = entities

    @classmethod
    def build(cls, train, vocab):
        buckets = [[] for _ in range(vocab.num_entities)]
        for s, r, o in train.triples:
            buckets[s].append((r, o))
            buckets[o].append((vocab.reciprocal(int(r)), s))
        counts = np.array([len(b) for b in buckets], dtype=np.int64)
        offsets = np.zeros(vocab.num_entities + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        pairs = np.array([pair for bucket in buckets for pair in bucket], dtype=np.int64).reshape(-1, 2)
        return cls(offsets, pairs[:, 0].copy(), pairs[:, 1].copy())

    @property
    def num_entities(self):
        return len(self.offsets) - 1

    def degree(self, entity_id):
        self._check(entity_id)
        return int(self.offsets[entity_id + 1] - self.offsets[entity_id])

    def degrees(self):
        return np.diff(self.offsets)

    def pair_arrays(self, entity_id):
        """Return (relation ids, entity ids) arrays of an entity's neighbourhood."""
        self._check(entity_id)
        lo, hi = self.offsets[entity_id], self.offsets[entity_id + 1]
        return self.relations[lo:hi], self.entities[lo:hi]

    def neighbors_of(self, entity_id):
        relations, entities = self.pair_arrays(entity_id)
        return [(int(r), int(e)) for r, e in zip(relations, entities)]

    def _check(self, entity_id):
        if not 0 <= entity_id < self.num_entities:
            raise IndexError(f"entity id {entity_id} out of range")


class FilterIndex:
    """Known true targets per (source entity, relation id incl. reciprocals) over all splits."""

    def __init__(self, num_entities):
        self.num_entities = num_entities
        self._targets = defaultdict(set)

    @classmethod
    def build(cls, splits, vocab):
        index = cls(vocab.num_entities)
        for split in splits:
            for s, r, o in split.triples:
                index._targets[(int(s), int(r))].add(int(o))
                index._targets[(int(o), vocab.reciprocal(int(r)))].add(int(s))
        return index

    def known_targets(self, src, rel):
        return self._targets.get((src, rel), set())

    def filtered_candidates(self, src, rel, gold):
        """
        Mask of entities eligible for ranking a query.

        Returns:
            np.ndarray: bool [num_entities]; false at known true targets other than gold
        """
        mask = np.ones(self.num_entities, dtype=bool)
        known = self.known_targets(src, rel)
        if known:
            mask[list(known)] = False
        mask[gold] = True
        return mask


@dataclass
class DatasetStats:
    entities: int
    relations: int
    triples: int
    avg_degree: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


class KnowledgeGraph:
    """
    A loaded dataset: shared vocabulary, the three splits and the derived indices.

    Attributes:
        vocab (Vocab): frozen vocabulary over all splits
        splits (dict[str, TripleSet]): "train", "valid", "test" (missing files give empty sets)
        neighbors (NeighborIndex): built from the train split only
        filters (FilterIndex): built from all splits
    """

    def __init__(self, vocab, splits):
        self.vocab = vocab
        self.splits = splits
        self.neighbors = NeighborIndex.build(splits["train"], vocab)
        self.filters = FilterIndex.build(splits.values(), vocab)
        self._components = None
        logger.info(
            f"Knowledge graph ready: {vocab.num_entities} entities, "
            f"{vocab.num_base_relations} relations, "
            + ", ".join(f"{name}={len(split)}" for name, split in splits.items())
        )

    @classmethod
    def from_directory(cls, dataset_dir, require=("train",)):
        """
        Load train.txt / valid.txt / test.txt from a dataset directory.

        Entity and relation ids follow first appearance over train, valid, test.
        """
        raw = {}
        for split in SPLITS:
            path = os.path.join(dataset_dir, f"{split}.txt")
            if os.path.exists(path):
                raw[split] = read_triples(path)
            elif split in require:
                raise FileNotFoundError(f"missing {split}.txt in {dataset_dir}")
            else:
                logger.warning(f"No {split}.txt in {dataset_dir}, using an empty split")
                raw[split] = []
        vocab = build_vocab(t for split in SPLITS for t in raw[split])
        splits = {split: encode_triples(raw[split], vocab, name=split) for split in SPLITS}
        return cls(vocab, splits)

    @classmethod
    def from_names(cls, train, valid=(), test=()):
        """Build a graph from in-memory name triples."""
        raw = {"train": list(train), "valid": list(valid), "test": list(test)}
        vocab = build_vocab(t for split in SPLITS for t in raw[split])
        return cls(vocab, {split: encode_triples(raw[split], vocab, name=split) for split in SPLITS})

    @property
    def train(self):
        return self.splits["train"]

    def neighbors_of(self, entity_id):
        return self.neighbors.neighbors_of(entity_id)

    def filtered_candidates(self, src, rel, gold):
        return self.filters.filtered_candidates(src, rel, gold)

    def _undirected_adjacency(self, entity_id):
        return self.neighbors.pair_arrays(entity_id)[1]

    def hop_distance(self, a, b, max_hops=None):
        """
        Shortest path length between two entities in the undirected training graph.

        Args:
            a (int): start entity
            b (int): end entity
            max_hops (int, optional): stop searching beyond this depth

        Returns:
            int: number of hops, or UNREACHABLE (-1) when no path (within max_hops) exists
        """
        self.neighbors._check(a)
        self.neighbors._check(b)
        if a == b:
            return 0
        seen = {a}
        frontier = deque([(a, 0)])
        while frontier:
            node, depth = frontier.popleft()
            if max_hops is not None and depth >= max_hops:
                continue
            for nxt in self._undirected_adjacency(node):
                nxt = int(nxt)
                if nxt == b:
                    return depth + 1
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, depth + 1))
        return UNREACHABLE

    def hop_distances_from(self, source, max_hops=None):
        """BFS from one entity; returns {entity: hops} for every entity reached."""
        self.neighbors._check(source)
        dist = {source: 0}
        frontier = deque([source])
        while frontier:
            node = frontier.popleft()
            if max_hops is not None and dist[node] >= max_hops:
                continue
            for nxt in self._undirected_adjacency(node):
                nxt = int(nxt)
                if nxt not in dist:
                    dist[nxt] = dist[node] + 1
                    frontier.append(nxt)
        return dist

    def components(self):
        """Connected-component label per entity in the undirected training graph."""
        if self._components is None:
            labels = np.full(self.vocab.num_entities, -1, dtype=np.int64)
            label = 0
            for start in range(self.vocab.num_entities):
                if labels[start] >= 0:
                    continue
                labels[start] = label
                frontier = deque([start])
                while frontier:
                    node = frontier.popleft()
                    for nxt in self._undirected_adjacency(node):
                        if labels[nxt] < 0:
                            labels[nxt] = label
                            frontier.append(int(nxt))
                label += 1
            self._components = labels
        return self._components

    def dataset_stats(self):
        """
        Counts over all splits; average degree is 2 * total triples / entities.

        Returns:
            DatasetStats
        """
        total = sum(len(split) for split in self.splits.values())
        entities = self.vocab.num_entities
        avg_degree = round(2 * total / entities, 1) if entities else 0.0
        return DatasetStats(
            entities=entities,
            relations=self.vocab.num_base_relations,
            triples=total,
            avg_degree=avg_degree,
        )

    def train_avg_degree(self):
        entities = self.vocab.num_entities
        return 2 * len(self.train) / entities if entities else 0.0

    def neighborhood_coverage(self, cap):
        """Fraction of entities whose whole training neighbourhood fits within ``cap`` pairs."""
        degrees = self.neighbors.degrees()
        if not len(degrees):
            return 1.0
        return float(np.mean(degrees <= cap))

    def relation_category(self, relation_id, threshold=1.5):
        """
        Classify a base relation as 1-1, 1-N, N-1 or N-N from training triples.

        Uses the average number of tails per head and heads per tail.
        """
        base = self.vocab.base_relation(relation_id)
        rows = self.train.triples[self.train.triples[:, 1] == base]
        if not len(rows):
            return "1-1"
        tails_per_head = len(rows) / len(np.unique(rows[:, 0]))
        heads_per_tail = len(rows) / len(np.unique(rows[:, 2]))
        head_side = "N" if heads_per_tail >= threshold else "1"
        tail_side = "N" if tails_per_head >= threshold else "1"
        return f"{head_side}-{tail_side}"
