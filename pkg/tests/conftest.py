"""Shared fixtures.

SYNTH-A is a six-item corpus small enough to verify every derived quantity
by hand. Interaction counts are 6,5,4,3,2,1 for items 1..6; with fractions
(0.20, 0.34) items 1-2 are popular, 3-4 mid-tail, 5-6 long-tail. Per-class
tag counts (item-level presence):

    popular:   hero 2, battle 1, franchise 1, spectacle 1   (total 5)
    mid_tail:  ensemble 1, witty 2                          (total 3)
    long_tail: indie 1, quiet 2, meditative 1               (total 4)

Vocabulary size 9. Leave-last-out holdouts: u1->6, u2->5, u3->4, u4->3,
u5->2; user 6 has a single interaction and stays train-only.
"""

import numpy as np
import pytest

from ragtag.corpus import (
    Dataset,
    Interaction,
    ItemRecord,
    PopularityClass,
    assign_popularity,
    classify_popularity,
)
from ragtag.embedding import EmbeddingVector, ProviderConfig, build_provider

SYNTH_A_FRACS = (0.20, 0.34)

SYNTH_A_TAG_COUNTS = {
    ("hero", PopularityClass.POPULAR): 2,
    ("battle", PopularityClass.POPULAR): 1,
    ("franchise", PopularityClass.POPULAR): 1,
    ("spectacle", PopularityClass.POPULAR): 1,
    ("ensemble", PopularityClass.MID_TAIL): 1,
    ("witty", PopularityClass.MID_TAIL): 2,
    ("indie", PopularityClass.LONG_TAIL): 1,
    ("quiet", PopularityClass.LONG_TAIL): 2,
    ("meditative", PopularityClass.LONG_TAIL): 1,
}

SYNTH_A_CLASS_TOTALS = {
    PopularityClass.POPULAR: 5,
    PopularityClass.MID_TAIL: 3,
    PopularityClass.LONG_TAIL: 4,
}

SYNTH_A_VOCAB = 9

SYNTH_A_CLASSES = {
    1: PopularityClass.POPULAR,
    2: PopularityClass.POPULAR,
    3: PopularityClass.MID_TAIL,
    4: PopularityClass.MID_TAIL,
    5: PopularityClass.LONG_TAIL,
    6: PopularityClass.LONG_TAIL,
}

SYNTH_A_HOLDOUTS = {1: 6, 2: 5, 3: 4, 4: 3, 5: 2}

_SYNTH_A_ITEMS = [
    (1, "Steel Vanguard (2011)", ("Action", "Adventure"), {"hero", "battle", "franchise"}),
    (2, "Crimson Armada (2013)", ("Action", "Sci-Fi"), {"hero", "spectacle"}),
    (3, "Harbor Lights (2005)", ("Comedy", "Drama"), {"ensemble", "witty"}),
    (4, "Paper Compass (2008)", ("Comedy",), {"witty"}),
    (5, "Winter Orchard (2017)", ("Drama",), {"indie", "quiet"}),
    (6, "Silent Meadow (2019)", ("Drama", "Documentary"), {"quiet", "meditative"}),
]

# (user, item, rating, timestamp); timestamps increase within each user so
# the last-listed interaction is the leave-last-out holdout
_SYNTH_A_RATINGS = [
    (1, 1, 4.0, 100), (1, 2, 3.5, 200), (1, 3, 4.5, 300),
    (1, 4, 2.0, 400), (1, 5, 3.0, 500), (1, 6, 5.0, 600),
    (2, 1, 5.0, 110), (2, 2, 4.0, 210), (2, 3, 3.0, 310),
    (2, 4, 3.5, 410), (2, 5, 4.5, 510),
    (3, 1, 3.0, 120), (3, 2, 2.5, 220), (3, 3, 5.0, 320), (3, 4, 4.0, 420),
    (4, 1, 4.5, 130), (4, 2, 3.0, 230), (4, 3, 2.0, 330),
    (5, 1, 2.5, 140), (5, 2, 4.5, 240),
    (6, 1, 3.5, 150),
]


def build_synth_a() -> Dataset:
    items = {
        item_id: ItemRecord(
            item_id=item_id, title=title, genres=genres, tags=frozenset(tags)
        )
        for item_id, title, genres, tags in _SYNTH_A_ITEMS
    }
    interactions = tuple(Interaction(u, i, r, ts) for u, i, r, ts in _SYNTH_A_RATINGS)
    d = Dataset(
        users=frozenset(u for u, _, _, _ in _SYNTH_A_RATINGS),
        items=items,
        interactions=interactions,
    )
    return assign_popularity(d, classify_popularity(d, *SYNTH_A_FRACS))


@pytest.fixture
def synth_a() -> Dataset:
    return build_synth_a()


def make_provider(dim: int = 64, seed: int = 11, cache_path=None, model: str = "t"):
    cfg = ProviderConfig(
        kind="deterministic",
        model_name=model,
        dim=dim,
        seed=seed,
        cache_path=str(cache_path) if cache_path else None,
    )
    return build_provider(cfg)


@pytest.fixture
def provider():
    return make_provider()


def vec(*values: float) -> EmbeddingVector:
    arr = np.asarray(values, dtype=np.float64)
    return EmbeddingVector(values=arr, dim=arr.size, provider_id="manual")
