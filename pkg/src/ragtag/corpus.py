"""MovieLens-style catalog ingestion, activity filtering and popularity classes.

Everything here is pure and deterministic: datasets are immutable values,
and all orderings are fixed (item id ascending, file order for interactions).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, TextIO

__all__ = [
    "PopularityClass",
    "Interaction",
    "ItemRecord",
    "Dataset",
    "DatasetStats",
    "ParseError",
    "parse_dataset",
    "filter_users",
    "classify_popularity",
    "assign_popularity",
    "dataset_stats",
    "item_interaction_counts",
    "load_movielens_dir",
]

NO_GENRES_SENTINEL = "(no genres listed)"


class PopularityClass(enum.Enum):
    """Three-way partition of the catalog by interaction count."""

    POPULAR = "popular"
    MID_TAIL = "mid_tail"
    LONG_TAIL = "long_tail"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


class ParseError(ValueError):
    """Raised for malformed input rows; the message names the offending line."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int

    def __post_init__(self) -> None:
        if not (0.5 <= self.rating <= 5.0):
            raise ValueError(f"rating {self.rating} outside [0.5, 5.0]")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemRecord:
    item_id: int
    title: str
    genres: tuple[str, ...]
    tags: frozenset[str] = frozenset()
    description: str | None = None


@dataclass(frozen=True)
class Dataset:
    """Immutable world state: users, items, interactions and (optional) classes.

    ``popularity`` is empty until :func:`assign_popularity` attaches a total
    item partition; operations that need classes state that precondition.
    """

    users: frozenset[int]
    items: dict[int, ItemRecord]
    interactions: tuple[Interaction, ...]
    popularity: dict[int, PopularityClass] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    interactions_per_user: float
    interactions_per_item: float
    density_percent: float


def _rows(stream: str | TextIO) -> Iterable[tuple[int, list[str]]]:
    """Yield (1-based line number, fields) for each non-header CSV row."""
    fh = io.StringIO(stream) if isinstance(stream, str) else stream
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return
    for fields in reader:
        if not fields:
            continue
        yield reader.line_num, fields


def _int_field(raw: str, what: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ParseError(f"{what} line {line}: not an integer: {raw!r}") from None


def _float_field(raw: str, what: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ParseError(f"{what} line {line}: not a number: {raw!r}") from None


def parse_dataset(
    ratings_stream: str | TextIO,
    movies_stream: str | TextIO,
    tags_stream: str | TextIO,
) -> Dataset:
    """Parse the three MovieLens CSV streams into an unfiltered dataset.

    Layouts: ratings ``userId,movieId,rating,timestamp``; movies
    ``movieId,title,genres`` with pipe-separated genres; tags
    ``userId,movieId,tag,timestamp``. One header line each, RFC-4180 quoting.
    Tag strings are lowercased and trimmed and folded into item-level sets
    (assigner identity and timestamps are discarded). Items never referenced
    by any interaction are retained; :func:`filter_users` prunes them.
    """
    titles: dict[int, str] = {}
    genres: dict[int, tuple[str, ...]] = {}
    for line, fields in _rows(movies_stream):
        if len(fields) != 3:
            raise ParseError(f"movies line {line}: expected 3 columns, got {len(fields)}")
        item_id = _int_field(fields[0], "movies", line)
        if item_id in titles:
            raise ParseError(f"movies line {line}: duplicate item id {item_id}")
        titles[item_id] = fields[1]
        raw_genres = fields[2]
        if raw_genres == NO_GENRES_SENTINEL or not raw_genres:
            genres[item_id] = ()
        else:
            genres[item_id] = tuple(g for g in raw_genres.split("|") if g)

    interactions: list[Interaction] = []
    users: set[int] = set()
    for line, fields in _rows(ratings_stream):
        if len(fields) != 4:
            raise ParseError(f"ratings line {line}: expected 4 columns, got {len(fields)}")
        user_id = _int_field(fields[0], "ratings", line)
        item_id = _int_field(fields[1], "ratings", line)
        rating = _float_field(fields[2], "ratings", line)
        timestamp = _int_field(fields[3], "ratings", line)
        if item_id not in titles:
            raise ParseError(f"ratings line {line}: unknown item id {item_id}")
        try:
            interactions.append(Interaction(user_id, item_id, rating, timestamp))
        except ValueError as exc:
            raise ParseError(f"ratings line {line}: {exc}") from None
        users.add(user_id)

    item_tags: dict[int, set[str]] = {item_id: set() for item_id in titles}
    for line, fields in _rows(tags_stream):
        if len(fields) != 4:
            raise ParseError(f"tags line {line}: expected 4 columns, got {len(fields)}")
        item_id = _int_field(fields[1], "tags", line)
        if item_id not in titles:
            raise ParseError(f"tags line {line}: unknown item id {item_id}")
        tag = fields[2].strip().lower()
        if tag:
            item_tags[item_id].add(tag)

    items = {
        item_id: ItemRecord(
            item_id=item_id,
            title=titles[item_id],
            genres=genres[item_id],
            tags=frozenset(item_tags[item_id]),
        )
        for item_id in titles
    }
    return Dataset(users=frozenset(users), items=items, interactions=tuple(interactions))


def filter_users(d: Dataset, min_interactions: int, max_interactions: int) -> Dataset:
    """Retain users whose interaction count lies in the closed interval.

    Interactions of removed users are dropped, and items left with zero
    interactions are pruned. Idempotent for fixed bounds.
    """
    if min_interactions > max_interactions:
        raise ValueError("min_interactions must be <= max_interactions")
    counts = Counter(i.user_id for i in d.interactions)
    kept_users = {u for u, c in counts.items() if min_interactions <= c <= max_interactions}
    interactions = tuple(i for i in d.interactions if i.user_id in kept_users)
    kept_items = {i.item_id for i in interactions}
    items = {iid: rec for iid, rec in d.items.items() if iid in kept_items}
    popularity = {iid: cls for iid, cls in d.popularity.items() if iid in kept_items}
    return Dataset(
        users=frozenset(kept_users),
        items=items,
        interactions=interactions,
        popularity=popularity,
    )


def item_interaction_counts(d: Dataset) -> dict[int, int]:
    """Interaction count per item, zero included for never-interacted items."""
    counts = dict.fromkeys(d.items, 0)
    for i in d.interactions:
        counts[i.item_id] += 1
    return counts


def classify_popularity(
    d: Dataset, popular_frac: float = 0.10, longtail_frac: float = 0.60
) -> dict[int, PopularityClass]:
    """Partition items into popular / mid-tail / long-tail by interaction count.

    Items are sorted by count descending with ties broken by ascending item
    id; the top ``ceil(popular_frac * n)`` become popular and the bottom
    ``floor(longtail_frac * n)`` become long-tail. The partition is total.
    """
    if popular_frac <= 0 or longtail_frac <= 0:
        raise ValueError("class fractions must be positive")
    if popular_frac + longtail_frac >= 1:
        raise ValueError("popular_frac + longtail_frac must be < 1")
    counts = item_interaction_counts(d)
    ranked = sorted(counts, key=lambda iid: (-counts[iid], iid))
    n = len(ranked)
    if n == 0:
        return {}
    n_popular = math.ceil(popular_frac * n)
    n_longtail = math.floor(longtail_frac * n)
    classes: dict[int, PopularityClass] = {}
    for pos, iid in enumerate(ranked):
        if pos < n_popular:
            classes[iid] = PopularityClass.POPULAR
        elif pos >= n - n_longtail:
            classes[iid] = PopularityClass.LONG_TAIL
        else:
            classes[iid] = PopularityClass.MID_TAIL
    return classes


def assign_popularity(d: Dataset, classes: dict[int, PopularityClass]) -> Dataset:
    """Return a dataset with the given total popularity partition attached."""
    missing = set(d.items) - set(classes)
    extra = set(classes) - set(d.items)
    if missing or extra:
        raise ValueError(
            f"popularity map must be total over items ({len(missing)} missing, {len(extra)} unknown)"
        )
    return replace(d, popularity=dict(classes))


def dataset_stats(d: Dataset) -> DatasetStats:
    """Exact corpus counts plus full-precision ratios (round at display time)."""
    n_users = len(d.users)
    n_items = len(d.items)
    n_inter = len(d.interactions)
    return DatasetStats(
        n_users=n_users,
        n_items=n_items,
        n_interactions=n_inter,
        interactions_per_user=n_inter / n_users if n_users else 0.0,
        interactions_per_item=n_inter / n_items if n_items else 0.0,
        density_percent=100.0 * n_inter / (n_users * n_items) if n_users and n_items else 0.0,
    )


def load_movielens_dir(path) -> Dataset:
    """Parse ``ratings.csv``, ``movies.csv`` and ``tags.csv`` from a directory."""
    from pathlib import Path

    base = Path(path)
    with open(base / "ratings.csv", encoding="utf-8", newline="") as ratings, open(
        base / "movies.csv", encoding="utf-8", newline=""
    ) as movies, open(base / "tags.csv", encoding="utf-8", newline="") as tags:
        return parse_dataset(ratings, movies, tags)
