"""Cosine-similarity retrieval and pluggable reranking.

Retrieval scores every candidate item against a user profile and keeps the
top K. Reranking refines a retrieved list through one of three backends:
``identity`` (truncate only), ``scripted`` (order read from a JSON fixture),
or ``remote_llm`` (chat-completion call whose reply is parsed as an ordered
list of candidate ids). A remote reply that is not a permutation of a subset
of the candidates is an error, never a silent fallback.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ragtag.embedding import EmbeddingVector
from ragtag.profiles import UserProfile

RETRIEVED = "retrieved"
RERANKED = "reranked"
_STAGES = frozenset({RETRIEVED, RERANKED})

_RERANKER_KINDS = frozenset({"identity", "scripted", "remote_llm"})

DEFAULT_RERANK_PROMPT = (
    "A user recently watched these movies:\n{recent}\n\n"
    "Candidate recommendations, one per line as 'id: title':\n{candidates}\n\n"
    "Reorder the candidates from most to least suitable for this user. "
    "Reply with candidate ids only, one per line, best first."
)

_INT_RE = re.compile(r"-?\d+")


class RerankError(Exception):
    """Reranker backend failed or returned an invalid ordering."""


@dataclass(frozen=True)
class RecommendationList:
    """Ranked recommendations for one user at one pipeline stage."""

    user_id: int
    entries: tuple[tuple[int, float], ...]
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in _STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        seen: set[int] = set()
        prev: tuple[int, float] | None = None
        for item_id, score in self.entries:
            if item_id in seen:
                raise ValueError(f"duplicate item {item_id} in recommendation list")
            seen.add(item_id)
            if prev is not None:
                prev_id, prev_score = prev
                # strict order: descending score, ties by ascending item id
                if score > prev_score or (score == prev_score and item_id < prev_id):
                    raise ValueError(
                        f"entries out of order at item {item_id} "
                        f"(score {score!r} after {prev_score!r})"
                    )
            prev = (item_id, score)

    def item_ids(self) -> tuple[int, ...]:
        return tuple(item_id for item_id, _ in self.entries)

    def rank_of(self, item_id: int) -> int | None:
        """1-based rank of ``item_id``, or None when absent."""
        for pos, (candidate, _) in enumerate(self.entries, start=1):
            if candidate == item_id:
                return pos
        return None

    def head(self, n: int) -> "RecommendationList":
        """Same list truncated to its first ``n`` entries."""
        if n < 0:
            raise ValueError("n must be non-negative")
        return RecommendationList(self.user_id, self.entries[:n], self.stage)


@dataclass(frozen=True)
class RerankerSpec:
    """Which reranker backend to run and how."""

    kind: str
    cutoff: int = 10
    fixture_path: str | None = None
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env: str | None = None
    prompt_template: str = DEFAULT_RERANK_PROMPT

    def __post_init__(self) -> None:
        if self.kind not in _RERANKER_KINDS:
            raise ValueError(f"unknown reranker kind {self.kind!r}")
        if self.cutoff < 1:
            raise ValueError("cutoff must be >= 1")
        if self.kind == "scripted" and not self.fixture_path:
            raise ValueError("scripted reranker requires fixture_path")
        if self.kind == "remote_llm":
            if not self.endpoint_url or not self.model_name:
                raise ValueError("remote_llm reranker requires endpoint_url and model_name")


class ItemIndex:
    """Dense matrix over item embeddings for vectorized cosine scoring."""

    def __init__(self, item_vectors: Mapping[int, EmbeddingVector]):
        if not item_vectors:
            raise ValueError("item_vectors must be non-empty")
        ids = np.array(sorted(item_vectors), dtype=np.int64)
        dims = {item_vectors[i].dim for i in item_vectors}
        if len(dims) != 1:
            raise ValueError(f"mixed embedding dimensions in index: {sorted(dims)}")
        matrix = np.stack([item_vectors[int(i)].values for i in ids])
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0.0):
            bad = int(ids[int(np.argmax(norms == 0.0))])
            raise ValueError(f"item {bad} has a zero-norm embedding")
        self.ids = ids
        self.matrix = matrix / norms[:, None]
        self.dim = dims.pop()

    def __len__(self) -> int:
        return len(self.ids)

    def cosine_scores(self, vector: np.ndarray) -> np.ndarray:
        """Cosine similarity of ``vector`` against every indexed item."""
        if vector.shape != (self.dim,):
            raise ValueError(f"profile dimension {vector.shape} does not match index dim {self.dim}")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise ValueError("cannot score a zero-norm profile vector")
        return np.clip(self.matrix @ (vector / norm), -1.0, 1.0)


def retrieve_top_k(
    profile: UserProfile,
    item_vectors: Mapping[int, EmbeddingVector] | ItemIndex,
    exclude: frozenset[int] | set[int],
    k: int,
) -> RecommendationList:
    """Top-k items by cosine similarity to the profile, skipping ``exclude``.

    Ordering is descending score with ties broken by ascending item id. An
    empty candidate set after exclusion yields an empty list, not an error.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    index = item_vectors if isinstance(item_vectors, ItemIndex) else ItemIndex(item_vectors)
    scores = index.cosine_scores(profile.vector.values)
    if exclude:
        keep = ~np.isin(index.ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        ids = index.ids[keep]
        scores = scores[keep]
    else:
        ids = index.ids
    if ids.size == 0:
        return RecommendationList(profile.user_id, (), RETRIEVED)
    order = np.lexsort((ids, -scores))[:k]
    entries = tuple((int(ids[i]), float(scores[i])) for i in order)
    return RecommendationList(profile.user_id, entries, RETRIEVED)


def _positional_entries(item_ids: Sequence[int]) -> tuple[tuple[int, float], ...]:
    # scripted/remote backends return an order, not scores; use 1/position
    return tuple((item_id, 1.0 / pos) for pos, item_id in enumerate(item_ids, start=1))


def _rerank_scripted(rlist: RecommendationList, spec: RerankerSpec) -> RecommendationList:
    try:
        fixture = json.loads(Path(spec.fixture_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RerankError(f"cannot read rerank fixture {spec.fixture_path}: {exc}") from exc
    key = str(rlist.user_id)
    if key not in fixture:
        raise RerankError(f"rerank fixture has no entry for user {rlist.user_id}")
    candidates = set(rlist.item_ids())
    ordered = [int(i) for i in fixture[key] if int(i) in candidates]
    return RecommendationList(
        rlist.user_id, _positional_entries(ordered[: spec.cutoff]), RERANKED
    )


def _render_prompt(
    spec: RerankerSpec,
    rlist: RecommendationList,
    titles: Mapping[int, str],
    recent_titles: Sequence[str],
) -> str:
    lines = []
    for item_id in rlist.item_ids():
        title = titles.get(item_id)
        if title is None:
            raise RerankError(f"no title available for candidate item {item_id}")
        lines.append(f"{item_id}: {title}")
    recent = "\n".join(recent_titles) if recent_titles else "(none)"
    return spec.prompt_template.format(recent=recent, candidates="\n".join(lines))


def parse_rerank_reply(content: str, candidates: Sequence[int]) -> list[int]:
    """Extract an ordered id list from a reranker reply.

    The reply must contain at least one integer, every integer must name a
    candidate, and no id may repeat: a permutation of a subset of the input.
    """
    parsed = [int(tok) for tok in _INT_RE.findall(content)]
    if not parsed:
        raise RerankError(f"reranker reply contains no item ids: {content!r}")
    allowed = set(candidates)
    seen: set[int] = set()
    for item_id in parsed:
        if item_id not in allowed:
            raise RerankError(f"reranker reply names non-candidate item {item_id}")
        if item_id in seen:
            raise RerankError(f"reranker reply repeats item {item_id}")
        seen.add(item_id)
    return parsed


def _rerank_remote(
    rlist: RecommendationList,
    spec: RerankerSpec,
    titles: Mapping[int, str],
    recent_titles: Sequence[str],
    transport,
    sleep,
) -> RecommendationList:
    from ragtag.enrichment import chat_completion  # local import: optional backend

    prompt = _render_prompt(spec, rlist, titles, recent_titles)
    content = chat_completion(
        endpoint_url=spec.endpoint_url,
        model_name=spec.model_name,
        prompt=prompt,
        api_key_env=spec.api_key_env,
        transport=transport,
        sleep=sleep,
    )
    ordered = parse_rerank_reply(content, rlist.item_ids())
    return RecommendationList(
        rlist.user_id, _positional_entries(ordered[: spec.cutoff]), RERANKED
    )


def rerank(
    rlist: RecommendationList,
    spec: RerankerSpec,
    *,
    titles: Mapping[int, str] | None = None,
    recent_titles: Sequence[str] = (),
    transport=None,
    sleep=time.sleep,
) -> RecommendationList:
    """Refine a retrieved list to at most ``spec.cutoff`` entries.

    ``titles`` and ``recent_titles`` feed the remote prompt and are ignored
    by the identity and scripted backends.
    """
    if rlist.stage != RETRIEVED:
        raise ValueError(f"rerank expects a retrieved list, got stage {rlist.stage!r}")
    if spec.kind == "identity":
        return RecommendationList(rlist.user_id, rlist.entries[: spec.cutoff], RERANKED)
    if spec.kind == "scripted":
        return _rerank_scripted(rlist, spec)
    return _rerank_remote(rlist, spec, titles or {}, recent_titles, transport, sleep)
