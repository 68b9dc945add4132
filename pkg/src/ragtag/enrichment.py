"""Description generation and keyword auto-tagging for the augmented arm.

Descriptions come from a chat-completion endpoint (or a replay/deterministic
stand-in) driven by a fixed prompt. Tags are then extracted from the
generated descriptions with a tf-idf pipeline: lowercase, tokenize on
non-alphanumeric boundaries, drop stopwords and short tokens, apply a
noun/adjective keep filter, merge counts by a light stem, and emit the
top-scoring surface forms.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ragtag.corpus import Dataset, ItemRecord
from ragtag.embedding import ProviderError, retry_with_backoff

PROMPT_TEMPLATE = (
    "Write a detailed and engaging description for the movie titled {title}, "
    "which falls under the genres {genres}. Use your knowledge about the movie "
    "to include important themes, characters, and plot points. Make the "
    "description appealing to potential viewers."
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DEFAULT_N_TAGS = 5

DEFAULT_STOPWORDS = frozenset(
    """
    a about above after again against all also am an and any are as at be
    because been before being below between both but by can could did do does
    doing down during each few find for from further had has have having he
    her here hers herself him himself his how i if in into is it its itself
    just like me more most movie my myself no nor not now of off on once only
    or other our ours ourselves out over own same she should so some story
    such than that the their theirs them themselves then there these they
    this those through to too under until up very viewers was we were what
    when where which while who whom why will with you your yours yourself
    film films one two three first second new old make makes made making get
    gets got take takes took go goes went come comes came see sees saw way
    ways much many still even back well
    """.split()
)

# -ing/-ly words kept by the noun heuristic despite their suffix
_NOUN_SUFFIX_EXCEPTIONS = frozenset(
    """
    king ring thing spring string wing sibling darling duckling wedding
    building painting ending beginning feeling meaning evening morning being
    family anomaly assembly butterfly firefly lullaby
    """.split()
)


class EnrichmentError(Exception):
    """Description generation failed for one item."""

    def __init__(self, item_id: int, message: str):
        super().__init__(f"item {item_id}: {message}")
        self.item_id = item_id


@dataclass(frozen=True)
class EnrichmentRecord:
    """One generated description plus the tags extracted from it."""

    item_id: int
    prompt: str
    description: str
    generated_tags: tuple[str, ...]
    provider_id: str
    content_hash: str

    def __post_init__(self) -> None:
        if len(set(self.generated_tags)) != len(self.generated_tags):
            raise ValueError(f"item {self.item_id}: generated tags must be distinct")
        for tag in self.generated_tags:
            if tag != tag.lower():
                raise ValueError(f"item {self.item_id}: tag {tag!r} is not lowercase")


@dataclass(frozen=True)
class GenerationConfig:
    """Which text-generation backend to use and how to reach it."""

    kind: str
    model_name: str = "synthetic-writer"
    endpoint_url: str | None = None
    api_key_env: str | None = None
    fixture_dir: str | None = None
    seed: int = 0
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "replay", "deterministic"):
            raise ValueError(f"unknown generation provider kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError("remote generation requires endpoint_url")
        if self.kind == "replay" and not self.fixture_dir:
            raise ValueError("replay generation requires fixture_dir")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def build_description_prompt(item: ItemRecord) -> str:
    """The description prompt with title and comma-joined genres substituted."""
    if not item.title:
        raise ValueError(f"item {item.item_id} has no title")
    return PROMPT_TEMPLATE.format(title=item.title, genres=", ".join(item.genres))


def chat_completion(
    *,
    endpoint_url: str,
    model_name: str,
    prompt: str,
    api_key_env: str | None = None,
    transport=None,
    sleep: Callable[[float], None] = time.sleep,
    timeout: float = 60.0,
) -> str:
    """One chat-completion round trip, returning the reply text.

    POSTs ``{"model": ..., "messages": [{"role": "user", "content": ...}]}``
    and reads ``choices[0].message.content``. Non-200 responses are retried
    with backoff; a malformed 200 body is an error, not a retry.
    """
    import os

    if transport is None:
        from ragtag.embedding import _requests_transport

        transport = _requests_transport
    headers = {"Content-Type": "application/json"}
    if api_key_env:
        key = os.environ.get(api_key_env)
        if not key:
            raise ProviderError(f"credential environment variable {api_key_env} is not set")
        headers["Authorization"] = f"Bearer {key}"
    payload = {"model": model_name, "messages": [{"role": "user", "content": prompt}]}
    body = retry_with_backoff(
        lambda: transport(endpoint_url, payload, headers, timeout),
        sleep=sleep,
        describe="chat completion",
    )
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProviderError(f"malformed chat completion response: {body!r}") from None
    if not isinstance(content, str):
        raise ProviderError(f"chat completion content is not text: {content!r}")
    return content


class RemoteTextGenerationProvider:
    """Live chat-completion backend."""

    def __init__(self, config: GenerationConfig, transport=None, sleep=time.sleep):
        self.config = config
        self._transport = transport
        self._sleep = sleep

    @property
    def provider_id(self) -> str:
        return f"remote:{self.config.model_name}"

    def complete(self, prompt: str, item_id: int) -> str:
        return chat_completion(
            endpoint_url=self.config.endpoint_url,
            model_name=self.config.model_name,
            prompt=prompt,
            api_key_env=self.config.api_key_env,
            transport=self._transport,
            sleep=self._sleep,
        )


class ReplayTextGenerationProvider:
    """Reads canned responses from ``fixture_dir/<item_id>.json``.

    Fixture files hold the chat-completion wire shape, so a recorded live
    response can be replayed byte-for-byte.
    """

    def __init__(self, config: GenerationConfig):
        self.fixture_dir = Path(config.fixture_dir)

    @property
    def provider_id(self) -> str:
        return f"replay:{self.fixture_dir.name}"

    def complete(self, prompt: str, item_id: int) -> str:
        path = self.fixture_dir / f"{item_id}.json"
        if not path.is_file():
            raise ProviderError(f"no replay fixture at {path}")
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
            content = body["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed replay fixture {path}: {exc}") from exc
        if not isinstance(content, str):
            raise ProviderError(f"replay fixture {path} content is not text")
        return content


_THEME_LEXICON = (
    "betrayal courage legacy revenge redemption survival mystery obsession "
    "sacrifice loyalty ambition exile wonder dread justice deception memory "
    "destiny rebellion solitude fortune honor chaos mercy vengeance secrets "
    "shadows frontier voyage heist conspiracy romance rivalry prophecy "
    "wilderness machines spirits outlaws dynasty uprising refuge labyrinth "
    "masquerade requiem paradox mirage tempest ember atlas relic cipher"
).split()

_TITLE_RE = re.compile(r"movie titled (?P<title>.+?), which falls under the genres")


class DeterministicTextGenerationProvider:
    """Offline stand-in: seeded theme words woven around the prompt's title.

    Output depends only on (seed, item_id, prompt), so augmented runs are
    reproducible without any endpoint.
    """

    def __init__(self, config: GenerationConfig):
        self.config = config

    @property
    def provider_id(self) -> str:
        return f"deterministic:{self.config.model_name}:s{self.config.seed}"

    def complete(self, prompt: str, item_id: int) -> str:
        import numpy as np

        match = _TITLE_RE.search(prompt)
        title = match.group("title") if match else "This film"
        digest = hashlib.blake2b(
            f"{self.config.seed}:{item_id}".encode("utf-8"), digest_size=8
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        words = [
            _THEME_LEXICON[i]
            for i in rng.choice(len(_THEME_LEXICON), size=8, replace=False)
        ]
        return (
            f"{title} follows a tale of {words[0]} and {words[1]}. "
            f"The plot explores {words[2]}, {words[3]}, and {words[4]} as its "
            f"characters confront {words[5]}. Anyone drawn to {words[6]} and "
            f"{words[7]} will find it rewarding."
        )


def build_generation_provider(config: GenerationConfig, *, transport=None, sleep=time.sleep):
    if config.kind == "remote":
        return RemoteTextGenerationProvider(config, transport=transport, sleep=sleep)
    if config.kind == "replay":
        return ReplayTextGenerationProvider(config)
    return DeterministicTextGenerationProvider(config)


def generate_description(item: ItemRecord, provider) -> EnrichmentRecord:
    """Fetch one description; tags are filled in later by the corpus pass."""
    prompt = build_description_prompt(item)
    try:
        description = provider.complete(prompt, item.item_id)
    except ProviderError as exc:
        raise EnrichmentError(item.item_id, str(exc)) from exc
    if not description.strip():
        raise EnrichmentError(item.item_id, "empty description")
    return EnrichmentRecord(
        item_id=item.item_id,
        prompt=prompt,
        description=description,
        generated_tags=(),
        provider_id=provider.provider_id,
        content_hash=hashlib.sha256(description.encode("utf-8")).hexdigest(),
    )


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumeric boundaries."""
    return _TOKEN_RE.findall(text.lower())


def light_stem(token: str) -> str:
    """Merge trivial plurals: strip one trailing 's' from words of length >= 4,
    unless the word ends in 'ss'."""
    if len(token) >= 4 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def default_keep_filter(token: str) -> bool:
    """Noun/adjective heuristic: reject adverb/verb-looking -ly/-ing forms."""
    if token in _NOUN_SUFFIX_EXCEPTIONS:
        return True
    return not (token.endswith("ly") or token.endswith("ing"))


@dataclass(frozen=True)
class TfidfModel:
    document_frequencies: Mapping[str, int]
    n_documents: int

    def __post_init__(self) -> None:
        for term, df in self.document_frequencies.items():
            if not 1 <= df <= self.n_documents:
                raise ValueError(f"document frequency of {term!r} out of range: {df}")


def compute_tfidf(corpus: Sequence[Sequence[str]]) -> TfidfModel:
    """Document frequencies over token lists; idf is smoothed at query time."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    df: dict[str, int] = {}
    for tokens in corpus:
        for term in set(tokens):
            df[term] = df.get(term, 0) + 1
    return TfidfModel(document_frequencies=df, n_documents=len(corpus))


def idf(model: TfidfModel, term: str) -> float:
    import math

    df = model.document_frequencies.get(term, 0)
    return math.log((1 + model.n_documents) / (1 + df)) + 1.0


def scoring_tokens(
    description: str,
    stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    keep_filter: Callable[[str], bool] = default_keep_filter,
) -> list[str]:
    """Stemmed tokens that survive the stopword/length/keep gates.

    This is the token stream tf-idf models should be computed over, so that
    document frequencies line up with auto_tag's scoring terms.
    """
    kept = [
        t
        for t in tokenize(description)
        if t not in stopwords and len(t) >= 3 and keep_filter(t)
    ]
    return [light_stem(t) for t in kept]


def auto_tag(
    description: str,
    model: TfidfModel,
    n_tags: int = DEFAULT_N_TAGS,
    stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    keep_filter: Callable[[str], bool] = default_keep_filter,
) -> list[str]:
    """Top tf-idf keywords of one description, as readable surface forms.

    Counts are merged under a light stem; each stem emits its most frequent
    surface form. Ordering is score-descending with lexicographic ties, so
    the output is a deterministic function of the inputs.
    """
    if n_tags < 0:
        raise ValueError("n_tags must be >= 0")
    if n_tags == 0:
        return []
    surviving = [
        t
        for t in tokenize(description)
        if t not in stopwords and len(t) >= 3 and keep_filter(t)
    ]
    stem_tf: dict[str, int] = {}
    surface_counts: dict[str, dict[str, int]] = {}
    for token in surviving:
        stem = light_stem(token)
        stem_tf[stem] = stem_tf.get(stem, 0) + 1
        per = surface_counts.setdefault(stem, {})
        per[token] = per.get(token, 0) + 1
    scored = []
    for stem, tf in stem_tf.items():
        surface = min(surface_counts[stem], key=lambda s: (-surface_counts[stem][s], s))
        scored.append((tf * idf(model, stem), surface))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [surface for _, surface in scored[:n_tags]]


def enrich_items(
    items: Mapping[int, ItemRecord],
    provider,
    *,
    n_tags: int = DEFAULT_N_TAGS,
    stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    keep_filter: Callable[[str], bool] = default_keep_filter,
    max_in_flight: int = 4,
) -> dict[int, EnrichmentRecord]:
    """Generate a description per item, then tag all of them in one tf-idf pass.

    Generation runs concurrently up to ``max_in_flight``; results are keyed
    by item id so completion order never changes the output. The first
    failing item (by id) aborts the batch.
    """
    ids = sorted(items)
    if not ids:
        return {}
    records: dict[int, EnrichmentRecord] = {}
    errors: dict[int, EnrichmentError] = {}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {item_id: pool.submit(generate_description, items[item_id], provider) for item_id in ids}
        for item_id, future in futures.items():
            try:
                records[item_id] = future.result()
            except EnrichmentError as exc:
                errors[item_id] = exc
    if errors:
        raise errors[min(errors)]
    corpus = [scoring_tokens(records[i].description, stopwords, keep_filter) for i in ids]
    model = compute_tfidf(corpus)
    for item_id in ids:
        tags = auto_tag(records[item_id].description, model, n_tags, stopwords, keep_filter)
        records[item_id] = replace(records[item_id], generated_tags=tuple(tags))
    return records


def apply_enrichment(dataset: Dataset, records: Mapping[int, EnrichmentRecord]) -> Dataset:
    """New dataset with descriptions installed and generated tags appended."""
    items = dict(dataset.items)
    for item_id in sorted(records):
        if item_id not in items:
            raise ValueError(f"enrichment references unknown item {item_id}")
        record = records[item_id]
        item = items[item_id]
        items[item_id] = replace(
            item,
            description=record.description,
            tags=item.tags | frozenset(record.generated_tags),
        )
    return replace(dataset, items=items)
