"""User profile vectors: rating-weighted and temporal-decay-weighted averages.

Both strategies produce a convex combination of the user's interacted-item
embeddings, so the profile always lies in their convex hull and is invariant
to the order of the interaction list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .corpus import Interaction
from .embedding import EmbeddingVector

__all__ = [
    "UserProfile",
    "rating_weighted_profile",
    "decay_weighted_profile",
    "decay_weight",
    "SECONDS_PER_DAY",
]

SECONDS_PER_DAY = 86400


@dataclass(frozen=True, eq=False)
class UserProfile:
    user_id: int
    vector: EmbeddingVector
    strategy: str  # "rating" | "decay"
    reference_time: int | None = None  # decay only


def _weighted_profile(
    interactions: Iterable[Interaction],
    item_vectors: Mapping[int, EmbeddingVector],
    weights: list[float],
    strategy: str,
    reference_time: int | None = None,
) -> UserProfile:
    interactions = list(interactions)
    if not interactions:
        raise ValueError("profile requires at least one interaction")
    user_ids = {i.user_id for i in interactions}
    if len(user_ids) != 1:
        raise ValueError(f"interactions span multiple users: {sorted(user_ids)}")
    first = None
    total = None
    weight_sum = 0.0
    for interaction, w in zip(interactions, weights):
        vec = item_vectors.get(interaction.item_id)
        if vec is None:
            raise ValueError(f"missing embedding for item {interaction.item_id}")
        if first is None:
            first = vec
            total = np.zeros_like(vec.values)
        total = total + w * vec.values
        weight_sum += w
    profile = total / weight_sum
    vector = EmbeddingVector(values=profile, dim=first.dim, provider_id=first.provider_id)
    return UserProfile(
        user_id=interactions[0].user_id,
        vector=vector,
        strategy=strategy,
        reference_time=reference_time,
    )


def rating_weighted_profile(
    interactions: Iterable[Interaction],
    item_vectors: Mapping[int, EmbeddingVector],
) -> UserProfile:
    """Profile = sum(rating * item vector) / sum(rating).

    Ratings are at least 0.5, so the weight sum is always positive.
    """
    interactions = list(interactions)
    weights = [i.rating for i in interactions]
    return _weighted_profile(interactions, item_vectors, weights, "rating")


def decay_weight(time_diff_days: float, lam: float, alpha: float) -> float:
    """Temporal weight exp(-lam * days) raised to the power alpha."""
    return math.exp(-lam * time_diff_days) ** alpha


def decay_weighted_profile(
    interactions: Iterable[Interaction],
    item_vectors: Mapping[int, EmbeddingVector],
    lam: float = 0.01,
    alpha: float = 1.2,
    reference_time: int = 0,
) -> UserProfile:
    """Recency-weighted profile with exponential decay in days.

    ``time_diff`` is measured in days from ``reference_time`` (which must not
    precede any interaction), giving a ~69-day half-life at the default
    lam=0.01 before the power factor alpha sharpens it.
    """
    if lam <= 0:
        raise ValueError("lam must be > 0")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    interactions = list(interactions)
    if interactions and reference_time < max(i.timestamp for i in interactions):
        raise ValueError("reference_time precedes an interaction timestamp")
    weights = [
        decay_weight((reference_time - i.timestamp) / SECONDS_PER_DAY, lam, alpha)
        for i in interactions
    ]
    return _weighted_profile(interactions, item_vectors, weights, "decay", reference_time)
