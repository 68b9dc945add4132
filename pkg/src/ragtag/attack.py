"""Tag-poisoning core: class statistics, scoring, candidate pools, selection.

The attack promotes long-tail items and demotes popular ones by appending
tags. For a tag t, an item's original class and its target class, the pieces
are:

    P(t|c)   = (Count(t,c) + eps) / (sum_t' Count(t',c) + eps * |T|)
    A(t)     = ln( P(t|target) / (P(t|orig) + eps) )
    s(t,i)   = cosine(embed(t), embed(document(i)))  on the attacker side
    A'(t,i)  = A(t) * s(t,i)

Counts are item-level presence. Because the selection objective is a sum of
per-tag scores, picking the k highest-scoring pool tags is the exact optimum
over all size-k subsets. Poisoning only ever appends tags; every other item
field is untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ragtag.corpus import Dataset, ItemRecord, PopularityClass
from ragtag.embedding import (
    EmbeddingVector,
    build_item_document,
    cosine_similarity,
    embed_texts,
)

_STRATEGIES = frozenset({"local", "global"})


def default_target_map() -> dict[PopularityClass, PopularityClass]:
    """Promote long-tail, demote popular; mid-tail untouched."""
    return {
        PopularityClass.POPULAR: PopularityClass.LONG_TAIL,
        PopularityClass.LONG_TAIL: PopularityClass.POPULAR,
    }


@dataclass(frozen=True)
class TagStatistics:
    """Item-level tag presence counts per popularity class."""

    counts: Mapping[tuple[str, PopularityClass], int]
    class_totals: Mapping[PopularityClass, int]
    vocabulary_size: int


@dataclass(frozen=True)
class AttackConfig:
    strategy: str
    k: int
    epsilon: float = 1e-6
    local_pool_neighbors: int = 10
    target_map: Mapping[PopularityClass, PopularityClass] = field(
        default_factory=default_target_map
    )

    def __post_init__(self) -> None:
        if self.strategy not in _STRATEGIES:
            raise ValueError(f"unknown attack strategy {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.local_pool_neighbors < 1:
            raise ValueError("local_pool_neighbors must be >= 1")
        for orig, target in self.target_map.items():
            if orig == target:
                raise ValueError(f"target_map maps {orig.value} to itself")


@dataclass(frozen=True)
class CandidatePool:
    """Tags considered for one item, never including its own tags."""

    item_id: int
    tags: frozenset[str]
    provenance: str

    def __post_init__(self) -> None:
        if self.provenance not in _STRATEGIES:
            raise ValueError(f"unknown pool provenance {self.provenance!r}")


@dataclass(frozen=True)
class TagModification:
    """Tags chosen for one item, highest combined score first."""

    item_id: int
    added_tags: tuple[tuple[str, float], ...]
    original_class: PopularityClass
    target_class: PopularityClass


@dataclass(frozen=True)
class AttackPlan:
    config: AttackConfig
    modifications: tuple[TagModification, ...]

    def __post_init__(self) -> None:
        ids = [m.item_id for m in self.modifications]
        if len(ids) != len(set(ids)):
            raise ValueError("attack plan contains more than one modification for an item")


def collect_tag_statistics(dataset: Dataset) -> TagStatistics:
    """Count, per class, how many items carry each tag.

    Every item must already have a popularity class. An item contributes at
    most 1 per tag; assignment multiplicity was discarded at ingest.
    """
    missing = sorted(set(dataset.items) - set(dataset.popularity))
    if missing:
        raise ValueError(f"items without a popularity class: {missing[:5]}")
    counts: dict[tuple[str, PopularityClass], int] = {}
    totals = {cls: 0 for cls in PopularityClass}
    vocabulary: set[str] = set()
    for item_id in sorted(dataset.items):
        cls = dataset.popularity[item_id]
        for tag in dataset.items[item_id].tags:
            counts[(tag, cls)] = counts.get((tag, cls), 0) + 1
            totals[cls] += 1
            vocabulary.add(tag)
    return TagStatistics(counts=counts, class_totals=totals, vocabulary_size=len(vocabulary))


def tag_class_probability(
    tag: str, cls: PopularityClass, stats: TagStatistics, epsilon: float
) -> float:
    """Smoothed probability of observing ``tag`` on an item of class ``cls``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    total = stats.class_totals.get(cls, 0)
    if total == 0 and stats.vocabulary_size == 0:
        return 0.0
    count = stats.counts.get((tag, cls), 0)
    return (count + epsilon) / (total + epsilon * stats.vocabulary_size)


def adversarial_impact(
    tag: str,
    orig: PopularityClass,
    target: PopularityClass,
    stats: TagStatistics,
    epsilon: float,
) -> float:
    """A(t): log-ratio of the tag's target-class odds over its original-class odds."""
    if orig == target:
        raise ValueError("original and target class must differ")
    p_target = tag_class_probability(tag, target, stats, epsilon)
    p_orig = tag_class_probability(tag, orig, stats, epsilon)
    return math.log(p_target / (p_orig + epsilon))


def semantic_relevance(tag: str, item: ItemRecord, provider) -> float:
    """s(t,i): attacker-side cosine between the raw tag string and the item document."""
    tag_vec, doc_vec = embed_texts([tag, build_item_document(item).text], provider)
    return cosine_similarity(tag_vec, doc_vec)


def adversarial_score(impact: float, relevance: float) -> float:
    """A'(t,i) = A(t) * s(t,i)."""
    return impact * relevance


class _ClassIndex:
    """Attacker-side vectors of one popularity class, id-aligned for scans."""

    def __init__(self, ids: Sequence[int], vectors: Mapping[int, EmbeddingVector]):
        self.ids = np.array(sorted(ids), dtype=np.int64)
        if self.ids.size:
            self.matrix = np.stack([vectors[int(i)].values for i in self.ids])
        else:
            self.matrix = np.zeros((0, 0))

    def nearest(self, query: EmbeddingVector, m: int) -> list[int]:
        if self.ids.size == 0:
            return []
        sims = self.matrix @ query.values
        norms = np.linalg.norm(self.matrix, axis=1) * float(np.linalg.norm(query.values))
        sims = sims / norms
        order = np.lexsort((self.ids, -sims))[:m]
        return [int(self.ids[i]) for i in order]


def _class_members(dataset: Dataset, cls: PopularityClass) -> list[int]:
    return sorted(i for i, c in dataset.popularity.items() if c == cls and i in dataset.items)


def _class_tag_union(dataset: Dataset, member_ids: Iterable[int]) -> set[str]:
    tags: set[str] = set()
    for item_id in member_ids:
        tags |= dataset.items[item_id].tags
    return tags


def build_candidate_pool(
    item: ItemRecord,
    dataset: Dataset,
    cfg: AttackConfig,
    attacker_vectors: Mapping[int, EmbeddingVector],
    *,
    _index: "_ClassIndex | None" = None,
) -> CandidatePool:
    """Candidate tags for one item under the configured strategy.

    local: tag union over the M target-class items nearest by attacker-side
    cosine (ties by ascending item id). global: tag union over every
    target-class item. The item's own tags are always removed.
    """
    cls = dataset.popularity.get(item.item_id)
    if cls not in cfg.target_map:
        raise ValueError(f"item {item.item_id} class {cls} has no attack target")
    target = cfg.target_map[cls]
    members = _class_members(dataset, target)
    if cfg.strategy == "global":
        pool = _class_tag_union(dataset, members)
    else:
        index = _index if _index is not None else _ClassIndex(members, attacker_vectors)
        neighbors = index.nearest(attacker_vectors[item.item_id], cfg.local_pool_neighbors)
        pool = _class_tag_union(dataset, neighbors)
    return CandidatePool(
        item_id=item.item_id, tags=frozenset(pool - item.tags), provenance=cfg.strategy
    )


def select_adversarial_tags(
    item_id: int,
    pool: CandidatePool,
    k: int,
    scores: Mapping[str, float],
    *,
    original_class: PopularityClass,
    target_class: PopularityClass,
) -> TagModification:
    """Top-k pool tags by score, ties by ascending tag string.

    The selection objective is additive over tags, so the per-tag top-k is
    the exact argmax over all size-k subsets. A pool smaller than k yields
    all of it; an empty pool yields an empty modification.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    missing = sorted(t for t in pool.tags if t not in scores)
    if missing:
        raise ValueError(f"no score for pool tags: {missing[:5]}")
    ranked = sorted(pool.tags, key=lambda t: (-scores[t], t))[:k]
    return TagModification(
        item_id=item_id,
        added_tags=tuple((t, scores[t]) for t in ranked),
        original_class=original_class,
        target_class=target_class,
    )


def plan_attack(
    dataset: Dataset,
    cfg: AttackConfig,
    provider,
    attacker_vectors: Mapping[int, EmbeddingVector] | None = None,
) -> AttackPlan:
    """Score and select adversarial tags for every attackable item.

    Items whose class appears in the target map are processed in ascending
    id order. Attacker-side item vectors are computed here when not supplied.
    """
    stats = collect_tag_statistics(dataset)
    if attacker_vectors is None:
        ids = sorted(dataset.items)
        docs = [build_item_document(dataset.items[i]).text for i in ids]
        vectors = embed_texts(docs, provider)
        attacker_vectors = dict(zip(ids, vectors))
    indexes = {
        target: _ClassIndex(_class_members(dataset, target), attacker_vectors)
        for target in set(cfg.target_map.values())
    }
    impact_memo: dict[tuple[str, PopularityClass], float] = {}
    modifications = []
    for item_id in sorted(dataset.items):
        cls = dataset.popularity[item_id]
        if cls not in cfg.target_map:
            continue
        target = cfg.target_map[cls]
        item = dataset.items[item_id]
        pool = build_candidate_pool(
            item, dataset, cfg, attacker_vectors, _index=indexes[target]
        )
        scores: dict[str, float] = {}
        for tag in sorted(pool.tags):
            key = (tag, cls)
            if key not in impact_memo:
                impact_memo[key] = adversarial_impact(tag, cls, target, stats, cfg.epsilon)
            relevance = semantic_relevance(tag, item, provider)
            scores[tag] = adversarial_score(impact_memo[key], relevance)
        modifications.append(
            select_adversarial_tags(
                item_id, pool, cfg.k, scores, original_class=cls, target_class=target
            )
        )
    return AttackPlan(config=cfg, modifications=tuple(modifications))


def apply_poisoning(dataset: Dataset, plan: AttackPlan) -> Dataset:
    """New dataset with each modified item's tags grown by its added tags.

    Titles, genres, descriptions, interactions and popularity labels are
    carried over untouched.
    """
    items = dict(dataset.items)
    for mod in plan.modifications:
        if mod.item_id not in items:
            raise ValueError(f"attack plan references unknown item {mod.item_id}")
        item = items[mod.item_id]
        added = frozenset(tag for tag, _ in mod.added_tags)
        items[mod.item_id] = replace(item, tags=item.tags | added)
    return replace(dataset, items=items)


def write_plan(plan: AttackPlan, path: str | Path) -> None:
    """Serialize a plan as line-delimited JSON: config record, then one per item."""
    records = [
        {
            "record": "config",
            "strategy": plan.config.strategy,
            "k": plan.config.k,
            "epsilon": plan.config.epsilon,
            "local_pool_neighbors": plan.config.local_pool_neighbors,
            "target_map": {
                orig.value: target.value for orig, target in sorted(
                    plan.config.target_map.items(), key=lambda p: p[0].value
                )
            },
        }
    ]
    for mod in plan.modifications:
        records.append(
            {
                "record": "modification",
                "item_id": mod.item_id,
                "original_class": mod.original_class.value,
                "target_class": mod.target_class.value,
                "added_tags": [[tag, score] for tag, score in mod.added_tags],
            }
        )
    text = "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_plan(path: str | Path) -> AttackPlan:
    """Inverse of write_plan."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty attack plan file: {path}")
    head = json.loads(lines[0])
    if head.get("record") != "config":
        raise ValueError(f"attack plan must start with a config record: {path}")
    cfg = AttackConfig(
        strategy=head["strategy"],
        k=head["k"],
        epsilon=head["epsilon"],
        local_pool_neighbors=head["local_pool_neighbors"],
        target_map={
            PopularityClass(orig): PopularityClass(target)
            for orig, target in head["target_map"].items()
        },
    )
    modifications = []
    for line in lines[1:]:
        rec = json.loads(line)
        if rec.get("record") != "modification":
            raise ValueError(f"unexpected record kind {rec.get('record')!r} in {path}")
        modifications.append(
            TagModification(
                item_id=rec["item_id"],
                added_tags=tuple((tag, float(score)) for tag, score in rec["added_tags"]),
                original_class=PopularityClass(rec["original_class"]),
                target_class=PopularityClass(rec["target_class"]),
            )
        )
    return AttackPlan(config=cfg, modifications=tuple(modifications))
