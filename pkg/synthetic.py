"""
Synthetic datasets whose held-out links are decided by the training graph.

composition: r1 and r2 each run one cycle through all entities, so every
    entity has exactly one outgoing and one incoming edge of both; r3(a, c)
    holds exactly when r1(a, b) and r2(b, c). Both query directions of an r3
    fact are decided by a single neighbour pair. Part of the r3 facts is
    trained on, the rest is split into valid and test.
star: a hub linked to every leaf by r1, leaves paired by r2; held-out pairs
    sit at hop distance 2 through the hub.
chain: e0 - e1 - ... - e(n-1) linked by the first relations in turn; test asks
    the last relation between e0 and every other chain entity, so the hop
    histogram is 1, 2, ..., n-1.
"""

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ContractError
from logger import get_logger

logger = get_logger(__name__)

PATTERNS = ("composition", "star", "chain")


@dataclass
class SyntheticDataset:
    """
    Attributes:
        output_dir (str): directory holding train.txt / valid.txt / test.txt
        pattern (str): generator pattern
        counts (dict[str, int]): triples per split
        hop_histogram (dict[int, int]): test triples per training-graph hop
            distance, known from the construction
    """

    output_dir: str
    pattern: str
    counts: dict = field(default_factory=dict)
    hop_histogram: dict = field(default_factory=dict)


def _entity(i):
    return f"e{i}"


def _relation(j):
    return f"r{j + 1}"


def _split_held_out(triples, rng, train_frac, valid_frac):
    order = rng.permutation(len(triples))
    n_train = int(round(train_frac * len(triples)))
    n_valid = int(round(valid_frac * len(triples)))
    shuffled = [triples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]


def _cycle(entities, rng):
    """Successor array of one random cycle through every entity; no entity maps to itself."""
    order = rng.permutation(entities)
    successor = np.empty(entities, dtype=np.int64)
    successor[order] = np.roll(order, -1)
    return successor


def _composition(entities, relations, rng):
    if relations < 3:
        raise ConfigError(f"composition needs at least 3 relations, got {relations}")
    if entities < 10:
        raise ConfigError(f"composition needs at least 10 entities to hold out links, got {entities}")
    r1_target = _cycle(entities, rng)
    r2_target = _cycle(entities, rng)

    train = [(_entity(a), _relation(0), _entity(b)) for a, b in enumerate(r1_target)]
    train += [(_entity(b), _relation(1), _entity(c)) for b, c in enumerate(r2_target)]
    composed = [(_entity(a), _relation(2), _entity(r2_target[r1_target[a]])) for a in range(entities)]
    composed_train, valid, test = _split_held_out(composed, rng, 0.6, 0.2)
    train += composed_train

    # extra relations carry random edges that say nothing about r3
    seen = set(train) | set(valid) | set(test)
    for j in range(3, relations):
        for _ in range(entities // 2):
            s, o = rng.choice(entities, size=2, replace=False)
            triple = (_entity(s), _relation(j), _entity(o))
            if triple not in seen:
                seen.add(triple)
                train.append(triple)

    _check_composition(train, valid + test)
    return train, valid, test, {}


def _check_composition(train, held_out):
    """Every held-out r3 fact must follow from an r1 edge and an r2 edge in train."""
    r1 = {s: o for s, r, o in train if r == _relation(0)}
    r2 = {s: o for s, r, o in train if r == _relation(1)}
    for s, r, o in held_out:
        middle = r1.get(s)
        if r != _relation(2) or middle is None or r2.get(middle) != o:
            raise ContractError(f"held-out triple {(s, r, o)} is not implied by the training graph")


def _star(entities, relations, rng):
    if entities < 5:
        raise ConfigError(f"star needs at least 5 entities, got {entities}")
    leaves = list(range(1, entities))
    train = [(_entity(0), _relation(0), _entity(i)) for i in leaves]
    pairs = [(_entity(a), _relation(1), _entity(b)) for a, b in zip(leaves[0::2], leaves[1::2])]
    pair_train, valid, test = _split_held_out(pairs, rng, 0.5, 0.25)
    train += pair_train
    for j in range(2, relations):
        train += [(_entity(i), _relation(j), _entity(0)) for i in leaves[j - 2 :: relations]]
    return train, valid, test, {2: len(test)}


def _chain(entities, relations, rng):
    query = relations - 1
    train = [(_entity(i), _relation(i % query), _entity(i + 1)) for i in range(entities - 1)]
    test = [(_entity(0), _relation(query), _entity(k)) for k in range(1, entities)]
    return train, [], test, dict(Counter(range(1, entities)))


_BUILDERS = {"composition": _composition, "star": _star, "chain": _chain}


def _write_split(path, triples):
    with open(path, "w", encoding="utf-8") as handle:
        for s, r, o in triples:
            handle.write(f"{s}\t{r}\t{o}\n")


def gen_synthetic(output_dir, entities=200, relations=3, pattern="composition", seed=0):
    """
    Write a synthetic dataset to ``output_dir``.

    Args:
        output_dir (str): created if missing
        entities (int): number of entities, at least 2
        relations (int): number of base relations, at least 2
        pattern (str): "composition", "star" or "chain"
        seed (int): same seed gives identical files

    Returns:
        SyntheticDataset

    Raises:
        ConfigError: unknown pattern or sizes too small for the pattern
    """
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown pattern {pattern!r}, expected one of {PATTERNS}")
    if entities < 2 or relations < 2:
        raise ConfigError(f"need at least 2 entities and 2 relations, got {entities} and {relations}")

    rng = np.random.default_rng(seed)
    train, valid, test, hops = _BUILDERS[pattern](entities, relations, rng)
    if not test:
        raise ConfigError(f"{pattern} with {entities} entities leaves no test triples")

    os.makedirs(output_dir, exist_ok=True)
    splits = {"train": train, "valid": valid, "test": test}
    for name, triples in splits.items():
        _write_split(os.path.join(output_dir, f"{name}.txt"), triples)

    dataset = SyntheticDataset(
        output_dir=output_dir,
        pattern=pattern,
        counts={name: len(triples) for name, triples in splits.items()},
        hop_histogram=hops,
    )
    logger.info(f"Wrote {pattern} dataset to {output_dir}: {dataset.counts}")
    return dataset
