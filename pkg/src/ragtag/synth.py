"""Seeded synthetic corpus in MovieLens CSV layout.

Interaction counts are skewed so a popularity partition emerges, and item
metadata (titles, genres, tags) is themed per realized class: heavily
interacted items share a "blockbuster" vocabulary, rarely interacted ones an
"indie" vocabulary. That gives the tag-poisoning pipeline real signal to
move: class-exclusive tags carry impact, and shared vocabulary makes tag/item
cosines meaningful. Everything is a pure function of the seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ragtag.corpus import Dataset, PopularityClass, classify_popularity, parse_dataset

POPULAR_TAG_POOL = (
    "blockbuster franchise superhero explosions spectacle stunts sequel "
    "villain heist chase armor warships"
).split()

LONGTAIL_TAG_POOL = (
    "indie arthouse meditative minimalist docudrama experimental slowburn "
    "melancholy pastoral introspective handheld improvised"
).split()

MIDTAIL_TAG_POOL = "ensemble heartfelt witty nostalgic roadtrip smalltown courtroom".split()

_POPULAR_TITLE_WORDS = "Iron Strike Galaxy Force Crown Velocity Titan Legion Omega Vortex".split()
_LONGTAIL_TITLE_WORDS = "Quiet Harvest Lantern Winter Sonata Orchard Pilgrim Ashes Meadow Ferry".split()
_MIDTAIL_TITLE_WORDS = "Summer Letters Junction Harbor Parade Garden Station Avenue".split()

_POPULAR_GENRES = ("Action", "Adventure", "Sci-Fi", "Thriller")
_LONGTAIL_GENRES = ("Drama", "Documentary", "Romance")
_MIDTAIL_GENRES = ("Comedy", "Drama", "Crime")

_CLASS_WEIGHT = {
    PopularityClass.POPULAR: 40.0,
    PopularityClass.MID_TAIL: 6.0,
    PopularityClass.LONG_TAIL: 1.0,
}

_RATING_CHOICES = (2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
_BASE_TIMESTAMP = 1_500_000_000


@dataclass(frozen=True)
class SynthCorpus:
    """The three CSV payloads plus the generation parameters that shaped them."""

    ratings_csv: str
    movies_csv: str
    tags_csv: str
    seed: int
    popular_frac: float
    longtail_frac: float

    def dataset(self) -> Dataset:
        return parse_dataset(self.ratings_csv, self.movies_csv, self.tags_csv)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ratings.csv").write_text(self.ratings_csv, encoding="utf-8")
        (out / "movies.csv").write_text(self.movies_csv, encoding="utf-8")
        (out / "tags.csv").write_text(self.tags_csv, encoding="utf-8")
        return out


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def generate_corpus(
    seed: int,
    *,
    n_users: int = 40,
    n_items: int = 60,
    popular_frac: float = 0.10,
    longtail_frac: float = 0.60,
    min_ratings_per_user: int = 20,
    max_ratings_per_user: int = 40,
) -> SynthCorpus:
    """Build a seeded corpus whose metadata is themed by realized popularity.

    Ratings are drawn first with tier-weighted item sampling; items are then
    classified with the given fractions and metadata is written from each
    item's realized class, so tag themes always align with the classes a
    downstream run will assign (when it uses the same fractions).
    """
    if n_users < 2 or n_items < 5:
        raise ValueError("corpus too small to be useful")
    if max_ratings_per_user > n_items:
        raise ValueError("max_ratings_per_user cannot exceed n_items")
    rng = np.random.default_rng(seed)
    item_ids = list(range(1, n_items + 1))

    # intended tiers steer sampling; realized classes drive metadata below
    n_pop = math.ceil(popular_frac * n_items)
    n_lt = math.floor(longtail_frac * n_items)
    tier_weight = np.ones(n_items)
    tier_weight[:n_pop] = _CLASS_WEIGHT[PopularityClass.POPULAR]
    tier_weight[n_pop : n_items - n_lt] = _CLASS_WEIGHT[PopularityClass.MID_TAIL]
    probs = tier_weight / tier_weight.sum()

    rated: dict[int, set[int]] = {}
    rating_rows: list[list] = []
    for user_id in range(1, n_users + 1):
        n_r = int(rng.integers(min_ratings_per_user, max_ratings_per_user + 1))
        picks = rng.choice(n_items, size=n_r, replace=False, p=probs)
        rated[user_id] = {item_ids[int(p)] for p in picks}
    # every item needs at least one interaction to survive filtering
    missing = [i for i in item_ids if not any(i in items for items in rated.values())]
    for item_id in missing:
        for user_id in range(1, n_users + 1):
            if item_id not in rated[user_id]:
                rated[user_id].add(item_id)
                break
    for user_id in sorted(rated):
        for item_id in sorted(rated[user_id]):
            rating = float(rng.choice(_RATING_CHOICES))
            ts = _BASE_TIMESTAMP + int(rng.integers(0, 5_000_000))
            rating_rows.append([user_id, item_id, rating, ts])

    ratings_csv = _csv_text(["userId", "movieId", "rating", "timestamp"], rating_rows)
    movies_stub = _csv_text(
        ["movieId", "title", "genres"], [[i, f"Item {i}", "Drama"] for i in item_ids]
    )
    tags_stub = _csv_text(["userId", "movieId", "tag", "timestamp"], [])
    realized = classify_popularity(
        parse_dataset(ratings_csv, movies_stub, tags_stub), popular_frac, longtail_frac
    )

    movie_rows: list[list] = []
    tag_rows: list[list] = []
    for item_id in item_ids:
        cls = realized[item_id]
        if cls is PopularityClass.POPULAR:
            words, genres, pool = _POPULAR_TITLE_WORDS, _POPULAR_GENRES, POPULAR_TAG_POOL
        elif cls is PopularityClass.LONG_TAIL:
            words, genres, pool = _LONGTAIL_TITLE_WORDS, _LONGTAIL_GENRES, LONGTAIL_TAG_POOL
        else:
            words, genres, pool = _MIDTAIL_TITLE_WORDS, _MIDTAIL_GENRES, MIDTAIL_TAG_POOL
        pair = rng.choice(len(words), size=2, replace=False)
        year = int(rng.integers(1980, 2023))
        # one tag-pool "flavor" token in the title ties tags to documents
        flavor = pool[int(rng.integers(len(pool)))]
        title = f"{words[int(pair[0])]} {words[int(pair[1])]} {flavor.capitalize()} {item_id} ({year})"
        n_genres = int(rng.integers(1, 3))
        picked = rng.choice(len(genres), size=n_genres, replace=False)
        genre_str = "|".join(genres[int(g)] for g in sorted(picked))
        movie_rows.append([item_id, title, genre_str])
        n_tags = int(rng.integers(3, 6))
        tag_picks = rng.choice(len(pool), size=n_tags, replace=False)
        for t in sorted(tag_picks):
            tagger = int(rng.integers(1, n_users + 1))
            ts = _BASE_TIMESTAMP + int(rng.integers(0, 5_000_000))
            tag_rows.append([tagger, item_id, pool[int(t)], ts])

    return SynthCorpus(
        ratings_csv=ratings_csv,
        movies_csv=_csv_text(["movieId", "title", "genres"], movie_rows),
        tags_csv=_csv_text(["userId", "movieId", "tag", "timestamp"], tag_rows),
        seed=seed,
        popular_frac=popular_frac,
        longtail_frac=longtail_frac,
    )
