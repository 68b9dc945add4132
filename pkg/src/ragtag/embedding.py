"""Text embedding providers, a persistent content-addressed cache, and cosine.

Two provider kinds are supported: ``deterministic`` (a seeded random
projection of bag-of-token counts; fully offline and reproducible) and
``remote`` (an HTTP embeddings endpoint speaking the common
``{"model": ..., "input": [...]}`` wire shape). Experiments configure two
independent slots: a system-side provider for retrieval/profiles and an
attacker-side provider for candidate pools and relevance scoring.

Vectors are cached on disk keyed by a digest of
``(provider_id, model_name, text)``, so clean and poisoned item states
coexist and unchanged documents are never re-embedded.
"""

from __future__ import annotations

import hashlib
import os
import re
import struct
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ItemRecord

__all__ = [
    "EmbeddingVector",
    "ProviderConfig",
    "ItemDocument",
    "ProviderError",
    "CacheError",
    "EmbeddingCache",
    "DeterministicProvider",
    "RemoteProvider",
    "build_provider",
    "build_item_document",
    "embed_texts",
    "cosine_similarity",
    "cache_key",
]

_TOKEN_RE = re.compile(r"[a-z0-9]+")

CACHE_MAGIC = b"RAGTAGEC"
CACHE_VERSION = 1

# Transport signature: (url, json_payload, headers, timeout) -> (status, body).
Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


class ProviderError(RuntimeError):
    """Remote provider failure that survived the bounded retry policy."""


class CacheError(RuntimeError):
    """Embedding cache file is unreadable or structurally corrupt."""


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    dim: int
    provider_id: str

    def __post_init__(self) -> None:
        if len(self.values) != self.dim:
            raise ValueError(f"vector length {len(self.values)} != dim {self.dim}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vector contains non-finite values")


@dataclass(frozen=True)
class ProviderConfig:
    kind: str  # "deterministic" | "remote"
    model_name: str
    dim: int
    seed: int | None = None  # deterministic only
    endpoint_url: str | None = None  # remote only
    api_key_env: str | None = None  # remote only
    max_in_flight: int = 4
    cache_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("deterministic", "remote"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.kind == "deterministic" and self.seed is None:
            raise ValueError("deterministic provider requires a seed")
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError("remote provider requires endpoint_url")


@dataclass(frozen=True)
class ItemDocument:
    """Canonical text rendering of an item; the unique embedding key per state."""

    item_id: int
    text: str


def build_item_document(item: ItemRecord) -> ItemDocument:
    """Render an item's metadata to its canonical document text.

    Tags are sorted lexicographically and an absent description renders an
    empty line, so the text is a stable function of the item state and any
    tag change alters exactly the Tags line.
    """
    text = (
        f"Title: {item.title}\n"
        f"Genres: {', '.join(item.genres)}\n"
        f"Tags: {', '.join(sorted(item.tags))}\n"
        f"Description: {item.description or ''}"
    )
    return ItemDocument(item_id=item.item_id, text=text)


def cache_key(provider_id: str, model_name: str, text: str) -> bytes:
    """Content address of one embedding: digest of provider, model and text."""
    h = hashlib.sha256()
    for part in (provider_id, model_name, text):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


class EmbeddingCache:
    """Append-only vector store: versioned header + length-prefixed records.

    Record layout: u32 payload length, 32-byte key digest, u32 dim, then
    ``dim`` little-endian float64 values. Writes are serialized through a
    single lock; reads are safe from any thread once loaded.
    """

    _HEADER = struct.Struct("<8sI")
    _LEN = struct.Struct("<I")
    _REC_HEAD = struct.Struct("<32sI")

    def __init__(self, path: str | Path | None = None):
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._vectors: dict[bytes, np.ndarray] = {}
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        raw = self._path.read_bytes()
        if len(raw) < self._HEADER.size:
            raise CacheError(f"{self._path}: truncated header")
        magic, version = self._HEADER.unpack_from(raw, 0)
        if magic != CACHE_MAGIC:
            raise CacheError(f"{self._path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise CacheError(f"{self._path}: unsupported version {version}")
        offset = self._HEADER.size
        while offset < len(raw):
            if offset + self._LEN.size > len(raw):
                raise CacheError(f"{self._path}: truncated record length at byte {offset}")
            (length,) = self._LEN.unpack_from(raw, offset)
            offset += self._LEN.size
            if offset + length > len(raw):
                raise CacheError(f"{self._path}: truncated record at byte {offset}")
            key, dim = self._REC_HEAD.unpack_from(raw, offset)
            values = np.frombuffer(
                raw, dtype="<f8", count=dim, offset=offset + self._REC_HEAD.size
            ).copy()
            values.setflags(write=False)
            self._vectors[key] = values
            offset += length

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, key: bytes) -> np.ndarray | None:
        return self._vectors.get(key)

    def put(self, key: bytes, values: np.ndarray) -> None:
        values = np.ascontiguousarray(values, dtype=np.float64)
        record = self._REC_HEAD.pack(key, len(values)) + values.astype("<f8").tobytes()
        with self._lock:
            if key in self._vectors:
                return
            if self._path is not None:
                new_file = not self._path.exists()
                if new_file:
                    self._path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._path, "ab") as fh:
                    if new_file:
                        fh.write(self._HEADER.pack(CACHE_MAGIC, CACHE_VERSION))
                    fh.write(self._LEN.pack(len(record)))
                    fh.write(record)
            stored = values.copy()
            stored.setflags(write=False)
            self._vectors[key] = stored

    def digest(self) -> str:
        """Hex digest of the persisted file (or of in-memory records)."""
        if self._path is not None and self._path.exists():
            return hashlib.sha256(self._path.read_bytes()).hexdigest()
        h = hashlib.sha256()
        for key in sorted(self._vectors):
            h.update(key)
            h.update(self._vectors[key].astype("<f8").tobytes())
        return h.hexdigest()


@dataclass
class ProviderStats:
    batches: int = 0
    texts: int = 0


class _BaseProvider:
    """Shared plumbing: cache handle and embed-call accounting."""

    def __init__(self, config: ProviderConfig, cache: EmbeddingCache | None = None):
        self.config = config
        self.cache = cache if cache is not None else EmbeddingCache(config.cache_path)
        self.stats = ProviderStats()

    @property
    def provider_id(self) -> str:
        raise NotImplementedError

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def _count(self, n_texts: int) -> None:
        self.stats.batches += 1
        self.stats.texts += n_texts


class DeterministicProvider(_BaseProvider):
    """Seeded random projection of token counts, L2-normalized.

    Each token maps to a fixed Gaussian direction derived from (seed, token);
    a text embeds to the normalized count-weighted sum. No network, no model
    weights, and coarse lexical similarity is preserved: texts sharing tokens
    have higher cosine than token-disjoint ones.
    """

    def __init__(self, config: ProviderConfig, cache: EmbeddingCache | None = None):
        super().__init__(config, cache)
        self._token_vectors: dict[str, np.ndarray] = {}

    @property
    def provider_id(self) -> str:
        c = self.config
        return f"deterministic:{c.model_name}:d{c.dim}:s{c.seed}"

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_vectors.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.config.seed}:{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.config.dim)
            self._token_vectors[token] = vec
        return vec

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        self._count(len(texts))
        out = []
        for text in texts:
            counts = Counter(_TOKEN_RE.findall(text.lower()))
            if not counts:
                raise ValueError(f"cannot embed text without tokens: {text!r}")
            vec = np.zeros(self.config.dim)
            for token, count in counts.items():
                vec += count * self._token_vector(token)
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:  # pragma: no cover - measure-zero event
                raise ValueError("degenerate zero-norm projection")
            out.append(vec / norm)
        return out


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {}
    return resp.status_code, body


def retry_with_backoff(
    attempt: Callable[[], tuple[int, dict]],
    *,
    attempts: int = 3,
    backoff_start: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
    describe: str = "request",
) -> dict:
    """Run an HTTP attempt up to ``attempts`` times with exponential backoff.

    Non-200 statuses and transport exceptions both count as failures; the
    final failure is raised as :class:`ProviderError`.
    """
    last = "no attempt made"
    for i in range(attempts):
        if i > 0:
            sleep(backoff_start * 2 ** (i - 1))
        try:
            status, body = attempt()
        except Exception as exc:  # transport-level failure
            last = f"{type(exc).__name__}: {exc}"
            continue
        if status == 200:
            return body
        last = f"HTTP {status}"
    raise ProviderError(f"{describe} failed after {attempts} attempts ({last})")


class RemoteProvider(_BaseProvider):
    """Client for an HTTP embeddings endpoint.

    POSTs ``{"model": ..., "input": [texts...]}`` and expects
    ``{"data": [{"index": i, "embedding": [...]}, ...]}``. Credentials are
    read from the environment variable named in the config at call time.
    Batches are chunked and fetched concurrently up to ``max_in_flight``;
    output order is by input index, never completion order.
    """

    CHUNK_SIZE = 64

    def __init__(
        self,
        config: ProviderConfig,
        cache: EmbeddingCache | None = None,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(config, cache)
        self._transport = transport or _requests_transport
        self._sleep = sleep

    @property
    def provider_id(self) -> str:
        return f"remote:{self.config.model_name}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if not key:
                raise ProviderError(
                    f"credential environment variable {self.config.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _fetch_chunk(self, texts: Sequence[str], start: int) -> list[np.ndarray]:
        payload = {"model": self.config.model_name, "input": list(texts)}
        headers = self._headers()
        body = retry_with_backoff(
            lambda: self._transport(self.config.endpoint_url, payload, headers, 60.0),
            sleep=self._sleep,
            describe=f"embedding chunk at index {start}",
        )
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise ProviderError(f"malformed embedding response for chunk at index {start}")
        out: list[np.ndarray | None] = [None] * len(texts)
        for entry in data:
            idx = entry.get("index")
            emb = entry.get("embedding")
            if not isinstance(idx, int) or not 0 <= idx < len(texts) or emb is None:
                raise ProviderError(f"malformed embedding entry in chunk at index {start}")
            vec = np.asarray(emb, dtype=np.float64)
            if vec.shape != (self.config.dim,):
                raise ProviderError(
                    f"dimension mismatch at index {start + idx}: "
                    f"got {vec.shape[0] if vec.ndim == 1 else vec.shape}, expected {self.config.dim}"
                )
            out[idx] = vec
        if any(v is None for v in out):
            raise ProviderError(f"missing embedding indices in chunk at index {start}")
        return out  # type: ignore[return-value]

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        self._count(len(texts))
        chunks = [
            (start, texts[start : start + self.CHUNK_SIZE])
            for start in range(0, len(texts), self.CHUNK_SIZE)
        ]
        results: dict[int, list[np.ndarray]] = {}
        failures: dict[int, str] = {}
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            futures = {pool.submit(self._fetch_chunk, chunk, start): (start, len(chunk)) for start, chunk in chunks}
            for future, (start, size) in futures.items():
                try:
                    results[start] = future.result()
                except ProviderError as exc:
                    failures[start] = f"indices {start}..{start + size - 1}: {exc}"
        if failures:
            detail = "; ".join(failures[s] for s in sorted(failures))
            raise ProviderError(f"embedding failed for {detail}")
        out: list[np.ndarray] = []
        for start, _ in chunks:
            out.extend(results[start])
        return out


def build_provider(
    config: ProviderConfig,
    *,
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> _BaseProvider:
    """Construct the provider matching ``config.kind``."""
    if config.kind == "deterministic":
        return DeterministicProvider(config)
    return RemoteProvider(config, transport=transport, sleep=sleep)


def embed_texts(texts: Sequence[str], provider: _BaseProvider) -> list[EmbeddingVector]:
    """Embed texts in order, consulting the provider's cache per content hash.

    Only cache misses reach the provider; fetched vectors are persisted so a
    second pass over an unchanged corpus performs zero provider calls.
    """
    for i, text in enumerate(texts):
        if not isinstance(text, str) or not text:
            raise ValueError(f"texts[{i}] must be a non-empty string")
    model = provider.config.model_name
    pid = provider.provider_id
    keys = [cache_key(pid, model, text) for text in texts]
    missing_positions = []
    seen_keys: set[bytes] = set()
    for pos, key in enumerate(keys):
        if provider.cache.get(key) is None and key not in seen_keys:
            missing_positions.append(pos)
            seen_keys.add(key)
    if missing_positions:
        fetched = provider.embed_batch([texts[pos] for pos in missing_positions])
        for pos, values in zip(missing_positions, fetched):
            provider.cache.put(keys[pos], values)
    out = []
    for key in keys:
        values = provider.cache.get(key)
        out.append(EmbeddingVector(values=values, dim=len(values), provider_id=pid))
    return out


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Raises ``ValueError`` on dimension mismatch or zero-norm input, for which
    the similarity is undefined.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} != {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    value = float(np.dot(a.values, b.values) / (na * nb))
    return max(-1.0, min(1.0, value))
