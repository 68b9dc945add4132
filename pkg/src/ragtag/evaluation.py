"""Exposure and relevance metrics over recommendation lists.

Exposure side: per-item exposure (binary or rank-discounted), the attacker
objective (mean long-tail exposure minus popular exposure per user),
popularity lift, long-tail coverage, and mean popularity rank. Relevance
side: HR/MRR/nDCG under a leave-last-out protocol, bucketed by the
popularity class of each user's held-out item.

All aggregations iterate users in ascending id order so reports are
bit-reproducible and permutation-invariant over input ordering.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping

from ragtag.corpus import PopularityClass
from ragtag.retrieval import RecommendationList

METRIC_HR = "hr"
METRIC_MRR = "mrr"
METRIC_NDCG = "ndcg"
RELEVANCE_METRICS = (METRIC_HR, METRIC_MRR, METRIC_NDCG)

CLASS_ALL = "all"
CLASS_LABELS = tuple(c.value for c in PopularityClass) + (CLASS_ALL,)

# report row key: (scenario, strategy, k, profile, stage, class label)
RowKey = tuple[str, str, int, str, str, str]


class ExposureMode(enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class EvaluationProtocol:
    split: str = "leave_last_out"
    cutoff: int = 10
    stage: str = "retrieved"

    def __post_init__(self) -> None:
        if self.split != "leave_last_out":
            raise ValueError(f"unknown split {self.split!r}")
        if self.cutoff < 1:
            raise ValueError("cutoff must be >= 1")
        if self.stage not in ("retrieved", "reranked"):
            raise ValueError(f"unknown stage {self.stage!r}")


def exposure(item_id: int, rlist: RecommendationList, mode: ExposureMode) -> float:
    """Visibility of one item in one list: presence, or 1/log2(rank+1)."""
    rank = rlist.rank_of(item_id)
    if rank is None:
        return 0.0
    if mode is ExposureMode.BINARY:
        return 1.0
    return 1.0 / math.log2(rank + 1)


def attack_objective(
    lists: Mapping[int, RecommendationList],
    classes: Mapping[int, PopularityClass],
    mode: ExposureMode,
) -> float:
    """Mean over users of (long-tail exposure sum minus popular exposure sum)."""
    if not lists:
        raise ValueError("lists must be non-empty")
    total = 0.0
    for user_id in sorted(lists):
        rlist = lists[user_id]
        for item_id, _ in rlist.entries:
            cls = classes.get(item_id)
            if cls is PopularityClass.LONG_TAIL:
                total += exposure(item_id, rlist, mode)
            elif cls is PopularityClass.POPULAR:
                total -= exposure(item_id, rlist, mode)
    return total / len(lists)


def popularity_lift(
    lists: Mapping[int, RecommendationList],
    interaction_counts: Mapping[int, int],
    profiles: Mapping[int, frozenset[int] | set[int]],
) -> float:
    """Mean over users of (mean recommended-item count / mean training-item count).

    Users with an empty recommendation list contribute nothing; with no
    contributing user at all the lift is 0.
    """
    lifts = []
    for user_id in sorted(lists):
        rec_ids = lists[user_id].item_ids()
        if not rec_ids:
            continue
        training = profiles.get(user_id)
        if not training:
            raise ValueError(f"user {user_id} has no training items for lift normalization")
        missing = [i for i in rec_ids if i not in interaction_counts]
        if missing:
            raise ValueError(f"recommended items without interaction counts: {missing[:5]}")
        rec_mean = sum(interaction_counts[i] for i in rec_ids) / len(rec_ids)
        base_mean = sum(interaction_counts[i] for i in sorted(training)) / len(training)
        lifts.append(rec_mean / base_mean)
    if not lifts:
        return 0.0
    return sum(lifts) / len(lifts)


def longtail_coverage(
    lists: Mapping[int, RecommendationList],
    classes: Mapping[int, PopularityClass],
    catalog_size: int,
) -> float:
    """Distinct long-tail items recommended to anyone, over the catalog size."""
    if catalog_size < 0:
        raise ValueError("catalog_size must be non-negative")
    if catalog_size == 0:
        return 0.0
    seen: set[int] = set()
    for rlist in lists.values():
        for item_id, _ in rlist.entries:
            if classes.get(item_id) is PopularityClass.LONG_TAIL:
                seen.add(item_id)
    return len(seen) / catalog_size


def popularity_ranks(interaction_counts: Mapping[int, int]) -> dict[int, int]:
    """1-based ranks, most-interacted item first, ties by ascending item id."""
    ordered = sorted(interaction_counts, key=lambda i: (-interaction_counts[i], i))
    return {item_id: pos for pos, item_id in enumerate(ordered, start=1)}


def mean_popularity_rank(
    lists: Mapping[int, RecommendationList], popularity_rank: Mapping[int, int]
) -> float:
    """Mean popularity rank over every recommendation slot across all users."""
    total = 0
    slots = 0
    for user_id in sorted(lists):
        for item_id, _ in lists[user_id].entries:
            rank = popularity_rank.get(item_id)
            if rank is None:
                raise ValueError(f"recommended item {item_id} has no popularity rank")
            total += rank
            slots += 1
    if slots == 0:
        return 0.0
    return total / slots


def relevance_metrics(
    lists: Mapping[int, RecommendationList],
    test_items: Mapping[int, int],
    classes: Mapping[int, PopularityClass],
    protocol: EvaluationProtocol,
) -> dict[tuple[str, str], float]:
    """HR/MRR/nDCG at the protocol cutoff, bucketed by test-item class.

    Each user contributes HR 1, MRR 1/p, nDCG 1/log2(p+1) when the held-out
    item sits at 1-based position p within the cutoff, zero otherwise. The
    "all" bucket averages over every user; empty buckets report 0.
    """
    sums: dict[tuple[str, str], float] = {
        (label, metric): 0.0 for label in CLASS_LABELS for metric in RELEVANCE_METRICS
    }
    sizes: dict[str, int] = {label: 0 for label in CLASS_LABELS}
    for user_id in sorted(test_items):
        rlist = lists.get(user_id)
        if rlist is None:
            raise ValueError(f"no recommendation list for evaluated user {user_id}")
        if rlist.stage != protocol.stage:
            raise ValueError(
                f"list stage {rlist.stage!r} does not match protocol stage {protocol.stage!r}"
            )
        test_item = test_items[user_id]
        cls = classes.get(test_item)
        if cls is None:
            raise ValueError(f"test item {test_item} has no popularity class")
        rank = rlist.head(protocol.cutoff).rank_of(test_item)
        if rank is None:
            hr = mrr = ndcg = 0.0
        else:
            hr = 1.0
            mrr = 1.0 / rank
            ndcg = 1.0 / math.log2(rank + 1)
        for label in (cls.value, CLASS_ALL):
            sizes[label] += 1
            sums[(label, METRIC_HR)] += hr
            sums[(label, METRIC_MRR)] += mrr
            sums[(label, METRIC_NDCG)] += ndcg
    out: dict[tuple[str, str], float] = {}
    for label in CLASS_LABELS:
        for metric in RELEVANCE_METRICS:
            out[(label, metric)] = sums[(label, metric)] / sizes[label] if sizes[label] else 0.0
    return out


@dataclass(frozen=True)
class MetricsReport:
    """Full experiment grid: metric values per (scenario, strategy, k, profile, stage, class)."""

    rows: Mapping[RowKey, Mapping[str, float]]
    config_digest: str
    seed: int

    def sorted_keys(self) -> list[RowKey]:
        return sorted(self.rows)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"record": "manifest", "config_digest": self.config_digest, "seed": self.seed},
                sort_keys=True,
            )
        ]
        for key in self.sorted_keys():
            scenario, strategy, k, profile, stage, label = key
            lines.append(
                json.dumps(
                    {
                        "record": "row",
                        "scenario": scenario,
                        "strategy": strategy,
                        "k": k,
                        "profile": profile,
                        "stage": stage,
                        "class": label,
                        "metrics": dict(sorted(self.rows[key].items())),
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty report")
        manifest = json.loads(lines[0])
        if manifest.get("record") != "manifest":
            raise ValueError("report must start with a manifest record")
        rows: dict[RowKey, dict[str, float]] = {}
        for line in lines[1:]:
            rec = json.loads(line)
            if rec.get("record") != "row":
                raise ValueError(f"unexpected record kind {rec.get('record')!r} in report")
            key = (
                rec["scenario"],
                rec["strategy"],
                int(rec["k"]),
                rec["profile"],
                rec["stage"],
                rec["class"],
            )
            if key in rows:
                raise ValueError(f"duplicate report row {key}")
            rows[key] = {m: float(v) for m, v in rec["metrics"].items()}
        return cls(rows=rows, config_digest=manifest["config_digest"], seed=int(manifest["seed"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scenario", "strategy", "k", "profile", "stage", "class", "metric", "value"])
        for key in self.sorted_keys():
            scenario, strategy, k, profile, stage, label = key
            for metric in sorted(self.rows[key]):
                writer.writerow(
                    [scenario, strategy, k, profile, stage, label, metric, repr(self.rows[key][metric])]
                )
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table, one row per grid key, metrics as columns."""
        metrics = sorted({m for row in self.rows.values() for m in row})
        header = ["scenario", "strategy", "k", "profile", "stage", "class"] + metrics
        body = []
        for key in self.sorted_keys():
            row = self.rows[key]
            cells = [key[0], key[1], str(key[2]), key[3], key[4], key[5]]
            cells += [f"{row[m]:.4f}" if m in row else "-" for m in metrics]
            body.append(cells)
        widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
                  for i in range(len(header))]
        def fmt(cells: list[str]) -> str:
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"
