"""
Filtered entity-ranking evaluation and the breakdown analyses.

Every test triple is asked in both directions: (s, r, ?) and (o, r^-1, ?).
Ranks are computed among candidates that are not other known true targets,
with ties at the gold score resolved by average rank unless configured
otherwise.
"""

import json
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_core as tc
from batcher import collate, eval_examples
from errors import ConfigError, ContractError
from logger import get_logger

logger = get_logger(__name__)

TIE_POLICIES = ("average", "pessimistic", "optimistic")

HOP_BUCKETS = ("0", "1", "2", "3", "4", "5+", "unreachable")


@dataclass(frozen=True)
class EvalConfig:
    """
    Attributes:
        tie_policy (str): "average", "pessimistic" or "optimistic"
        eval_batch_size (int): queries scored per forward pass
        eval_seed (int): seeds the per-source neighbourhood truncation
        workers (int): scoring threads
        drop_query_edge (bool): remove each query's own edge from its
            neighbourhood, as training does; for scoring the training split
        progress (bool): show progress bars
    """

    tie_policy: str = "average"
    eval_batch_size: int = 256
    eval_seed: int = 0
    workers: int = 1
    drop_query_edge: bool = False
    progress: bool = True

    def __post_init__(self):
        if self.tie_policy not in TIE_POLICIES:
            raise ConfigError(f"tie_policy must be one of {TIE_POLICIES}, got {self.tie_policy!r}")
        if self.eval_batch_size < 1 or self.workers < 1:
            raise ConfigError("eval_batch_size and workers must be at least 1")


def rank_query(logits, gold, mask=None, tie_policy="average"):
    """
    Rank of the gold entity among eligible candidates.

    Args:
        logits (np.ndarray): [|E|] scores
        gold (int): gold entity id
        mask (np.ndarray, optional): [|E|] bool, eligible candidates; must include gold
        tie_policy (str): "average", "pessimistic" or "optimistic"

    Returns:
        float: rank >= 1 (fractional under the average policy)
    """
    if mask is not None and not mask[gold]:
        raise ContractError(f"gold entity {gold} is filtered out")
    scores = logits if mask is None else logits[mask]
    gold_score = logits[gold]
    greater = int(np.count_nonzero(scores > gold_score))
    equal = int(np.count_nonzero(scores == gold_score))
    if tie_policy == "average":
        return 1.0 + greater + (equal - 1) / 2.0
    if tie_policy == "pessimistic":
        return float(greater + equal)
    if tie_policy == "optimistic":
        return float(1 + greater)
    raise ConfigError(f"unknown tie policy {tie_policy!r}")


@dataclass
class RankingReport:
    mrr: float = 0.0
    mr: float = 0.0
    hits1: float = 0.0
    hits3: float = 0.0
    hits10: float = 0.0
    count: int = 0

    @classmethod
    def from_ranks(cls, ranks):
        ranks = np.asarray(ranks, dtype=np.float64)
        if not len(ranks):
            return cls()
        return cls(
            mrr=float(np.mean(1.0 / ranks)),
            mr=float(np.mean(ranks)),
            hits1=float(np.mean(ranks <= 1)),
            hits3=float(np.mean(ranks <= 3)),
            hits10=float(np.mean(ranks <= 10)),
            count=len(ranks),
        )

    @classmethod
    def merge(cls, reports):
        """Count-weighted average of shard reports."""
        reports = [r for r in reports if r.count]
        if len(reports) == 1:
            return reports[0]
        total = int(np.sum([r.count for r in reports])) if reports else 0
        if not total:
            return cls()
        merged = {
            key: float(np.sum([getattr(r, key) * r.count for r in reports]) / total)
            for key in ("mrr", "mr", "hits1", "hits3", "hits10")
        }
        return cls(count=total, **merged)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self):
        return (
            f"MRR {self.mrr:.4f} | MR {self.mr:.1f} | H@1 {self.hits1:.4f} | "
            f"H@3 {self.hits3:.4f} | H@10 {self.hits10:.4f} | n={self.count}"
        )


@dataclass(frozen=True)
class QueryResult:
    src: int
    predicate: int
    gold: int
    rank: float
    raw_rank: float


@dataclass
class EvaluationResult:
    report: RankingReport
    queries: list = field(default_factory=list)

    def ranks(self):
        return [q.rank for q in self.queries]


@dataclass(frozen=True)
class BreakdownRow:
    """
    Attributes:
        key (str): relation name, hop bucket or category
        count (int): number of queries in the group
        mrr (float): mean reciprocal rank of the group
        triples (int): distinct evaluation triples behind the queries
    """

    key: str
    count: int
    mrr: float
    triples: int = 0


def _score_shard_at(dtype, model, kg, examples, cap, cfg):
    # precision is thread-local, so worker threads take the caller's
    with tc.precision(dtype):
        return _score_shard(model, kg, examples, cap, cfg)


def _score_shard(model, kg, examples, cap, cfg, progress=False):
    results = []
    ranks = []
    mask_token_id = kg.vocab.num_entities
    batch_size = cfg.eval_batch_size
    starts = range(0, len(examples), batch_size)
    for start in tqdm(starts, desc="eval", disable=not progress, leave=False):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, cap, mask_token_id)
        logits = model.forward(batch).logits.data
        for row, example in zip(logits, chunk):
            mask = kg.filtered_candidates(example.src, example.predicate, example.target)
            rank = rank_query(row, example.target, mask, cfg.tie_policy)
            raw_rank = rank_query(row, example.target, None, cfg.tie_policy)
            ranks.append(rank)
            results.append(QueryResult(example.src, example.predicate, example.target, rank, raw_rank))
    return RankingReport.from_ranks(ranks), results


def evaluate_split(model, kg, split, sampling, cfg=None):
    """
    Filtered ranking evaluation of a split.

    Args:
        model (HitterModel): frozen for the duration (put in eval mode here)
        kg (KnowledgeGraph): supplies neighbourhoods and filters
        split (TripleSet): triples to evaluate
        sampling (SamplingConfig): neighbour cap
        cfg (EvalConfig, optional): tie policy, batch size, workers

    Returns:
        EvaluationResult: aggregate report over 2 * len(split) queries plus per-query ranks
    """
    cfg = cfg or EvalConfig()
    was_training = model.training
    model.eval()
    try:
        examples = list(eval_examples(kg, split, sampling, cfg.eval_seed, drop_query_edge=cfg.drop_query_edge))
        cap = sampling.neighbor_cap
        shards = [examples[i :: cfg.workers] for i in range(cfg.workers)] if cfg.workers > 1 else [examples]
        shards = [s for s in shards if s]
        if len(shards) > 1:
            dtype = tc.get_default_dtype()
            with ThreadPoolExecutor(max_workers=len(shards)) as pool:
                outputs = list(pool.map(lambda s: _score_shard_at(dtype, model, kg, s, cap, cfg), shards))
        else:
            outputs = [_score_shard(model, kg, s, cap, cfg, progress=cfg.progress) for s in shards]
    finally:
        model.train(was_training)

    report = RankingReport.merge([o[0] for o in outputs])
    queries = [q for o in outputs for q in o[1]]
    if cfg.workers > 1:
        queries = _unshard(queries, [len(s) for s in shards])
    logger.info(f"Evaluated {split.name or 'split'}: {report.summary()}")
    return EvaluationResult(report, queries)


def _unshard(queries, sizes):
    """Restore the original query order of a round-robin sharding."""
    shards = []
    offset = 0
    for size in sizes:
        shards.append(queries[offset : offset + size])
        offset += size
    ordered = []
    for i in range(max(sizes, default=0)):
        for shard in shards:
            if i < len(shard):
                ordered.append(shard[i])
    return ordered


def _base_triple(query, vocab):
    if vocab.is_reciprocal(query.predicate):
        return (query.gold, vocab.base_relation(query.predicate), query.src)
    return (query.src, query.predicate, query.gold)


def _grouped_rows(groups, keys=None):
    keys = keys if keys is not None else groups.keys()
    rows = []
    for key in keys:
        members = groups.get(key)
        if not members:
            continue
        ranks = np.array([rank for rank, _ in members], dtype=np.float64)
        rows.append(
            BreakdownRow(
                key=key,
                count=len(members),
                mrr=float(np.mean(1.0 / ranks)),
                triples=len({triple for _, triple in members}),
            )
        )
    return rows


def breakdown_by_relation(queries, vocab):
    """
    Per-relation MRR with reciprocal relations folded onto their base relation.

    Returns:
        list[BreakdownRow]: sorted by query count, descending
    """
    groups = defaultdict(list)
    for q in queries:
        name = vocab.relation_names[vocab.base_relation(q.predicate)]
        groups[name].append((q.rank, _base_triple(q, vocab)))
    rows = _grouped_rows(groups)
    return sorted(rows, key=lambda row: (-row.count, row.key))


def hop_bucket(hops):
    if hops < 0:
        return "unreachable"
    if hops >= 5:
        return "5+"
    return str(hops)


def query_hops(queries, kg):
    """
    Hop distance between source and gold of every query in the undirected
    training graph, with 5 standing for "5 or more".
    """
    components = kg.components()
    cache = {}
    hops = []
    for q in queries:
        if components[q.src] != components[q.gold]:
            hops.append(-1)
            continue
        if q.src not in cache:
            cache[q.src] = kg.hop_distances_from(q.src, max_hops=4)
        hops.append(cache[q.src].get(q.gold, 5))
    return hops


def mrr_by_hops(queries, kg):
    """
    MRR grouped by the hop distance of (source, gold) in the training graph.

    Bucket "0" holds queries whose gold entity is the source itself.

    Returns:
        list[BreakdownRow]: non-empty buckets in the order 0, 1, 2, 3, 4, 5+, unreachable
    """
    groups = defaultdict(list)
    for q, hops in zip(queries, query_hops(queries, kg)):
        groups[hop_bucket(hops)].append((q.rank, _base_triple(q, kg.vocab)))
    return _grouped_rows(groups, HOP_BUCKETS)


def breakdown_by_category(queries, kg):
    """MRR per relation category (1-1, 1-N, N-1, N-N) and query direction."""
    groups = defaultdict(list)
    categories = {}
    for q in queries:
        base = kg.vocab.base_relation(q.predicate)
        if base not in categories:
            categories[base] = kg.relation_category(base)
        direction = "subject" if kg.vocab.is_reciprocal(q.predicate) else "object"
        groups[f"{categories[base]}/{direction}"].append((q.rank, _base_triple(q, kg.vocab)))
    return sorted(_grouped_rows(groups), key=lambda row: row.key)


def compare_breakdowns(base_rows, other_rows):
    """
    Join two breakdowns on their group key.

    Returns:
        pd.DataFrame: key, count, base_mrr, other_mrr, gain (other / base - 1)
    """
    base = pd.DataFrame([asdict(r) for r in base_rows], columns=["key", "count", "mrr", "triples"])
    other = pd.DataFrame([asdict(r) for r in other_rows], columns=["key", "count", "mrr", "triples"])
    joined = base.merge(other, on="key", how="outer", suffixes=("_base", "_other"))
    joined = joined.rename(columns={"mrr_base": "base_mrr", "mrr_other": "other_mrr", "count_base": "count"})
    joined["gain"] = joined["other_mrr"] / joined["base_mrr"] - 1.0
    return joined[["key", "count", "base_mrr", "other_mrr", "gain"]]


def nearest_entities(entity_table, entity_id, k, names=None):
    """
    Top-k entities by cosine similarity to ``entity_id``, excluding itself.

    Zero-norm embeddings are excluded with a warning; ties break by entity id.

    Args:
        entity_table (np.ndarray): [|E|, d]
        entity_id (int): query entity
        k (int): number of neighbours, below |E|
        names (list[str], optional): entity names to return instead of ids

    Returns:
        list: k entity names (or ids when names is None)
    """
    table = np.asarray(entity_table, dtype=np.float64)
    if not 0 <= entity_id < len(table):
        raise IndexError(f"entity id {entity_id} out of range")
    if k >= len(table):
        raise ContractError(f"k={k} must be below the entity count {len(table)}")
    norms = np.linalg.norm(table, axis=1)
    if norms[entity_id] == 0:
        logger.warning(f"Entity {entity_id} has a zero-norm embedding, no neighbours")
        return []
    zero = np.nonzero(norms == 0)[0]
    if len(zero):
        logger.warning(f"Excluding {len(zero)} zero-norm embeddings from the neighbour search")
    candidates = np.nonzero((norms > 0) & (np.arange(len(table)) != entity_id))[0]
    sims = table[candidates] @ table[entity_id] / (norms[candidates] * norms[entity_id])
    order = np.lexsort((candidates, -sims))[:k]
    chosen = candidates[order].tolist()
    return [names[i] for i in chosen] if names is not None else chosen


def nearest_table(entity_table, entity_ids, k, names):
    """Nearest-neighbour lists for several entities as a DataFrame (entity, rank, neighbor)."""
    rows = []
    for entity_id in entity_ids:
        for position, neighbor in enumerate(nearest_entities(entity_table, entity_id, k, names), start=1):
            rows.append({"entity": names[entity_id], "rank": position, "neighbor": neighbor})
    return pd.DataFrame(rows, columns=["entity", "rank", "neighbor"])


def queries_frame(queries, vocab):
    return pd.DataFrame(
        [
            {
                "source": vocab.entity_names[q.src],
                "relation": vocab.relation_name(q.predicate),
                "gold": vocab.entity_names[q.gold],
                "rank": q.rank,
                "raw_rank": q.raw_rank,
            }
            for q in queries
        ],
        columns=["source", "relation", "gold", "rank", "raw_rank"],
    )


def queries_from_frame(frame, vocab):
    """Rebuild QueryResults from a ranks CSV written by ``write_reports``."""
    missing = [c for c in ("source", "relation", "gold", "rank", "raw_rank") if c not in frame.columns]
    if missing:
        raise ContractError(f"ranks table lacks columns {missing}")
    return [
        QueryResult(
            src=vocab.entity_id(row.source),
            predicate=vocab.relation_id(row.relation),
            gold=vocab.entity_id(row.gold),
            rank=float(row.rank),
            raw_rank=float(row.raw_rank),
        )
        for row in frame.itertuples(index=False)
    ]


def rows_frame(rows):
    return pd.DataFrame([asdict(r) for r in rows], columns=["key", "count", "mrr", "triples"])


def write_reports(result, kg, output_dir, prefix):
    """
    Write the aggregate JSON and the relation / hop / rank CSVs of an evaluation.

    Returns:
        dict[str, str]: artifact name -> path
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "report": os.path.join(output_dir, f"{prefix}_report.json"),
        "relations": os.path.join(output_dir, f"{prefix}_relations.csv"),
        "hops": os.path.join(output_dir, f"{prefix}_hops.csv"),
        "ranks": os.path.join(output_dir, f"{prefix}_ranks.csv"),
    }
    with open(paths["report"], "w", encoding="utf-8") as handle:
        handle.write(result.report.to_json() + "\n")
    rows_frame(breakdown_by_relation(result.queries, kg.vocab)).to_csv(paths["relations"], index=False)
    rows_frame(mrr_by_hops(result.queries, kg)).to_csv(paths["hops"], index=False)
    queries_frame(result.queries, kg.vocab).to_csv(paths["ranks"], index=False)
    logger.info(f"Wrote {prefix} reports to {output_dir}")
    return paths
