"""Experiment configuration and the full grid runner.

A run walks: ingest -> filter -> classify -> (enrich for the augmented arm)
-> embed -> profile -> retrieve -> rerank -> evaluate, once as a reference
and once per (attack strategy, k) cell, then assembles a single report over
the grid (scenario x strategy x k x profile x stage x class). Everything is
derived from one seed; with deterministic providers two runs of the same
config produce byte-identical report files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from ragtag import corpus
from ragtag.attack import AttackConfig, apply_poisoning, plan_attack, write_plan
from ragtag.corpus import Dataset, Interaction, PopularityClass
from ragtag.embedding import (
    EmbeddingVector,
    ProviderConfig,
    build_item_document,
    build_provider,
    embed_texts,
)
from ragtag.enrichment import (
    GenerationConfig,
    apply_enrichment,
    build_generation_provider,
    enrich_items,
)
from ragtag.evaluation import (
    CLASS_ALL,
    CLASS_LABELS,
    EvaluationProtocol,
    ExposureMode,
    MetricsReport,
    RowKey,
    attack_objective,
    longtail_coverage,
    mean_popularity_rank,
    popularity_lift,
    popularity_ranks,
    relevance_metrics,
)
from ragtag.profiles import decay_weighted_profile, rating_weighted_profile
from ragtag.retrieval import (
    RERANKED,
    RETRIEVED,
    ItemIndex,
    RecommendationList,
    RerankerSpec,
    rerank,
    retrieve_top_k,
)

SCENARIO_BASELINE = "baseline"
SCENARIO_ATTACKED = "attacked"
SCENARIO_AUGMENTED = "attacked_augmented"
_SCENARIOS = (SCENARIO_BASELINE, SCENARIO_ATTACKED, SCENARIO_AUGMENTED)

STRATEGY_NONE = "none"

_PROFILE_STRATEGIES = ("decay", "rating")

_RECENT_TITLES_FOR_PROMPT = 5


class ConfigError(Exception):
    """Invalid or unreadable experiment configuration."""


class RunError(Exception):
    """A pipeline stage failed; carries the stage name and original cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    ratings_path: str
    movies_path: str
    tags_path: str
    output_dir: str
    seed: int
    min_interactions: int
    max_interactions: int
    popular_frac: float
    longtail_frac: float
    system_provider: ProviderConfig
    attacker_provider: ProviderConfig
    generation: GenerationConfig
    profile_strategies: tuple[str, ...]
    decay_lambda: float
    decay_alpha: float
    retrieval_k: int
    reranker: RerankerSpec
    attack_strategies: tuple[str, ...]
    attack_k_values: tuple[int, ...]
    epsilon: float
    local_pool_neighbors: int
    cutoff: int
    scenarios: tuple[str, ...]
    n_tags: int
    offline: bool
    config_digest: str


@dataclass(frozen=True)
class RunManifest:
    config_digest: str
    seed: int
    cache_digests: Mapping[str, str]
    started_at: str
    finished_at: str
    artifacts: Mapping[str, str]


def _derive_seed(seed: int, role: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{role}".encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def _section(raw: dict, key: str, path: str) -> dict:
    value = raw.pop(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config key {path!r} must be an object")
    return dict(value)


def _reject_unknown(section: dict, path: str) -> None:
    if section:
        key = sorted(section)[0]
        raise ConfigError(f"unknown config key {path + '.' + key if path else key!r}")


def _get(section: dict, key: str, default, path: str, kind=None):
    value = section.pop(key, default)
    if kind is not None and value is not None and not isinstance(value, kind):
        raise ConfigError(f"config key {path}.{key} has the wrong type")
    return value


def _provider_from(section: dict, role: str, seed: int, output_dir: str, offline: bool) -> ProviderConfig:
    path = f"providers.{role}"
    kind = _get(section, "kind", "deterministic", path, str)
    if offline and kind == "remote":
        raise ConfigError(f"config key {path}.kind: remote providers are forbidden in offline mode")
    cache_default = str(Path(output_dir) / "cache" / f"{role}.bin")
    try:
        cfg = ProviderConfig(
            kind=kind,
            model_name=_get(section, "model_name", f"toy-{role}", path, str),
            dim=_get(section, "dim", 256, path, int),
            seed=_get(section, "seed", _derive_seed(seed, role), path, int),
            endpoint_url=_get(section, "endpoint_url", None, path, str),
            api_key_env=_get(section, "api_key_env", None, path, str),
            max_in_flight=_get(section, "max_in_flight", 4, path, int),
            cache_path=_get(section, "cache_path", cache_default, path, str),
        )
    except ValueError as exc:
        raise ConfigError(f"config section {path}: {exc}") from exc
    _reject_unknown(section, path)
    return cfg


def load_config(
    path: str | Path,
    *,
    seed: int | None = None,
    out: str | None = None,
    offline: bool | None = None,
    scenario: str | None = None,
) -> ExperimentConfig:
    """Parse, validate and default-fill a JSON experiment config.

    Keyword arguments are command-line overrides applied before validation,
    so the config digest always reflects the values a run actually used.
    Unknown keys anywhere are rejected by name.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    raw = dict(raw)

    dataset = _section(raw, "dataset", "dataset")
    ds_dir = _get(dataset, "dir", None, "dataset", str)
    ratings = _get(dataset, "ratings", None, "dataset", str)
    movies = _get(dataset, "movies", None, "dataset", str)
    tags = _get(dataset, "tags", None, "dataset", str)
    _reject_unknown(dataset, "dataset")
    if ds_dir is not None:
        if any(v is not None for v in (ratings, movies, tags)):
            raise ConfigError("config key dataset: give either dir or explicit file paths, not both")
        base = Path(ds_dir)
        ratings, movies, tags = (str(base / f"{n}.csv") for n in ("ratings", "movies", "tags"))
    if not all((ratings, movies, tags)):
        raise ConfigError("config key dataset: missing ratings/movies/tags paths")

    # always pop the file values so overrides don't leave "unknown" keys behind
    file_out = _get(raw, "output_dir", None, "", str)
    file_seed = _get(raw, "seed", 0, "", int)
    file_offline = bool(_get(raw, "offline", False, ""))
    output_dir = out if out is not None else file_out
    if not output_dir:
        raise ConfigError("config key output_dir is required")
    run_seed = seed if seed is not None else file_seed
    run_offline = offline if offline is not None else file_offline

    filt = _section(raw, "filter", "filter")
    min_i = _get(filt, "min_interactions", 20, "filter", int)
    max_i = _get(filt, "max_interactions", 100, "filter", int)
    _reject_unknown(filt, "filter")
    if min_i < 1 or max_i < min_i:
        raise ConfigError("config section filter: need 1 <= min_interactions <= max_interactions")

    pop = _section(raw, "popularity", "popularity")
    popular_frac = float(_get(pop, "popular_frac", 0.10, "popularity", (int, float)))
    longtail_frac = float(_get(pop, "longtail_frac", 0.60, "popularity", (int, float)))
    _reject_unknown(pop, "popularity")
    if not (0 < popular_frac < 1 and 0 < longtail_frac < 1 and popular_frac + longtail_frac < 1):
        raise ConfigError(
            "config section popularity: fractions must be in (0,1) and sum below 1"
        )

    providers = _section(raw, "providers", "providers")
    system = _provider_from(
        _section(providers, "system", "providers.system"), "system", run_seed, output_dir, run_offline
    )
    attacker = _provider_from(
        _section(providers, "attacker", "providers.attacker"), "attacker", run_seed, output_dir, run_offline
    )
    gen_section = _section(providers, "generation", "providers.generation")
    gen_kind = _get(gen_section, "kind", "deterministic", "providers.generation", str)
    if run_offline and gen_kind == "remote":
        raise ConfigError(
            "config key providers.generation.kind: remote providers are forbidden in offline mode"
        )
    try:
        generation = GenerationConfig(
            kind=gen_kind,
            model_name=_get(gen_section, "model_name", "synthetic-writer", "providers.generation", str),
            endpoint_url=_get(gen_section, "endpoint_url", None, "providers.generation", str),
            api_key_env=_get(gen_section, "api_key_env", None, "providers.generation", str),
            fixture_dir=_get(gen_section, "fixture_dir", None, "providers.generation", str),
            seed=_get(gen_section, "seed", _derive_seed(run_seed, "generation"), "providers.generation", int),
            max_in_flight=_get(gen_section, "max_in_flight", 4, "providers.generation", int),
        )
    except ValueError as exc:
        raise ConfigError(f"config section providers.generation: {exc}") from exc
    _reject_unknown(gen_section, "providers.generation")
    _reject_unknown(providers, "providers")

    prof = _section(raw, "profiles", "profiles")
    strategies = tuple(_get(prof, "strategies", list(_PROFILE_STRATEGIES), "profiles", list))
    decay_lambda = float(_get(prof, "lambda", 0.01, "profiles", (int, float)))
    decay_alpha = float(_get(prof, "alpha", 1.2, "profiles", (int, float)))
    _reject_unknown(prof, "profiles")
    if not strategies or any(s not in _PROFILE_STRATEGIES for s in strategies):
        raise ConfigError("config key profiles.strategies must be a non-empty subset of decay/rating")
    if decay_lambda <= 0 or decay_alpha <= 0:
        raise ConfigError("config section profiles: lambda and alpha must be > 0")

    retr = _section(raw, "retrieval", "retrieval")
    retrieval_k = _get(retr, "k", 50, "retrieval", int)
    _reject_unknown(retr, "retrieval")
    if retrieval_k < 1:
        raise ConfigError("config key retrieval.k must be >= 1")

    proto = _section(raw, "protocol", "protocol")
    split = _get(proto, "split", "leave_last_out", "protocol", str)
    cutoff = _get(proto, "cutoff", 10, "protocol", int)
    _reject_unknown(proto, "protocol")
    if split != "leave_last_out":
        raise ConfigError(f"config key protocol.split: unknown split {split!r}")
    if cutoff < 1:
        raise ConfigError("config key protocol.cutoff must be >= 1")

    rr = _section(raw, "reranker", "reranker")
    rr_kind = _get(rr, "kind", "identity", "reranker", str)
    if run_offline and rr_kind == "remote_llm":
        raise ConfigError("config key reranker.kind: remote_llm is forbidden in offline mode")
    try:
        reranker_kwargs = dict(
            kind=rr_kind,
            cutoff=_get(rr, "cutoff", cutoff, "reranker", int),
            fixture_path=_get(rr, "fixture_path", None, "reranker", str),
            endpoint_url=_get(rr, "endpoint_url", None, "reranker", str),
            model_name=_get(rr, "model_name", None, "reranker", str),
            api_key_env=_get(rr, "api_key_env", None, "reranker", str),
        )
        template = _get(rr, "prompt_template", None, "reranker", str)
        if template is not None:
            reranker_kwargs["prompt_template"] = template
        reranker = RerankerSpec(**reranker_kwargs)
    except ValueError as exc:
        raise ConfigError(f"config section reranker: {exc}") from exc
    _reject_unknown(rr, "reranker")

    att = _section(raw, "attack", "attack")
    attack_strategies = tuple(_get(att, "strategies", ["local", "global"], "attack", list))
    k_values = tuple(_get(att, "k_values", [1, 3, 5], "attack", list))
    epsilon = float(_get(att, "epsilon", 1e-6, "attack", (int, float)))
    neighbors = _get(att, "local_pool_neighbors", 10, "attack", int)
    _reject_unknown(att, "attack")
    if any(s not in ("local", "global") for s in attack_strategies):
        raise ConfigError("config key attack.strategies must contain only local/global")
    if any(not isinstance(k, int) or k < 0 for k in k_values):
        raise ConfigError("config key attack.k_values must be non-negative integers")
    if epsilon <= 0:
        raise ConfigError("config key attack.epsilon must be > 0")
    if neighbors < 1:
        raise ConfigError("config key attack.local_pool_neighbors must be >= 1")

    enr = _section(raw, "enrichment", "enrichment")
    n_tags = _get(enr, "n_tags", 5, "enrichment", int)
    _reject_unknown(enr, "enrichment")
    if n_tags < 0:
        raise ConfigError("config key enrichment.n_tags must be >= 0")

    scenarios_raw = _get(raw, "scenarios", [SCENARIO_BASELINE, SCENARIO_ATTACKED], "", list)
    scenarios = tuple(scenarios_raw)
    if scenario is not None:
        if scenario not in _SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}")
        scenarios = (scenario,)
    if not scenarios or any(s not in _SCENARIOS for s in scenarios):
        raise ConfigError(f"config key scenarios must be a non-empty subset of {_SCENARIOS}")

    _reject_unknown(raw, "")

    resolved = {
        "dataset": {"ratings": ratings, "movies": movies, "tags": tags},
        "output_dir": output_dir,
        "seed": run_seed,
        "offline": run_offline,
        "filter": {"min_interactions": min_i, "max_interactions": max_i},
        "popularity": {"popular_frac": popular_frac, "longtail_frac": longtail_frac},
        "providers": {
            "system": _provider_dict(system),
            "attacker": _provider_dict(attacker),
            "generation": _generation_dict(generation),
        },
        "profiles": {"strategies": list(strategies), "lambda": decay_lambda, "alpha": decay_alpha},
        "retrieval": {"k": retrieval_k},
        "reranker": {
            "kind": reranker.kind,
            "cutoff": reranker.cutoff,
            "fixture_path": reranker.fixture_path,
            "endpoint_url": reranker.endpoint_url,
            "model_name": reranker.model_name,
            "api_key_env": reranker.api_key_env,
            "prompt_template": reranker.prompt_template,
        },
        "attack": {
            "strategies": list(attack_strategies),
            "k_values": list(k_values),
            "epsilon": epsilon,
            "local_pool_neighbors": neighbors,
        },
        "protocol": {"split": split, "cutoff": cutoff},
        "enrichment": {"n_tags": n_tags},
        "scenarios": list(scenarios),
    }
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode("utf-8")).hexdigest()

    return ExperimentConfig(
        ratings_path=ratings,
        movies_path=movies,
        tags_path=tags,
        output_dir=output_dir,
        seed=run_seed,
        min_interactions=min_i,
        max_interactions=max_i,
        popular_frac=popular_frac,
        longtail_frac=longtail_frac,
        system_provider=system,
        attacker_provider=attacker,
        generation=generation,
        profile_strategies=strategies,
        decay_lambda=decay_lambda,
        decay_alpha=decay_alpha,
        retrieval_k=retrieval_k,
        reranker=reranker,
        attack_strategies=attack_strategies,
        attack_k_values=k_values,
        epsilon=epsilon,
        local_pool_neighbors=neighbors,
        cutoff=cutoff,
        scenarios=scenarios,
        n_tags=n_tags,
        offline=run_offline,
        config_digest=digest,
    )


def _provider_dict(cfg: ProviderConfig) -> dict:
    return {
        "kind": cfg.kind,
        "model_name": cfg.model_name,
        "dim": cfg.dim,
        "seed": cfg.seed,
        "endpoint_url": cfg.endpoint_url,
        "api_key_env": cfg.api_key_env,
        "max_in_flight": cfg.max_in_flight,
        "cache_path": cfg.cache_path,
    }


def _generation_dict(cfg: GenerationConfig) -> dict:
    return {
        "kind": cfg.kind,
        "model_name": cfg.model_name,
        "endpoint_url": cfg.endpoint_url,
        "api_key_env": cfg.api_key_env,
        "fixture_dir": cfg.fixture_dir,
        "seed": cfg.seed,
        "max_in_flight": cfg.max_in_flight,
    }


def split_leave_last_out(dataset: Dataset) -> tuple[tuple[Interaction, ...], dict[int, int]]:
    """Hold out each user's most recent interaction (ties by item id).

    Users with a single interaction stay entirely in training and are not
    evaluated. Training order is (user, timestamp, item) ascending.
    """
    by_user: dict[int, list[Interaction]] = {}
    for inter in dataset.interactions:
        by_user.setdefault(inter.user_id, []).append(inter)
    train: list[Interaction] = []
    test_items: dict[int, int] = {}
    for user_id in sorted(by_user):
        inters = sorted(by_user[user_id], key=lambda i: (i.timestamp, i.item_id))
        if len(inters) < 2:
            train.extend(inters)
            continue
        test_items[user_id] = inters[-1].item_id
        train.extend(inters[:-1])
    return tuple(train), test_items


def embed_item_documents(dataset: Dataset, provider) -> dict[int, EmbeddingVector]:
    """Embed every item's document, in ascending id order, through the cache."""
    ids = sorted(dataset.items)
    docs = [build_item_document(dataset.items[i]).text for i in ids]
    return dict(zip(ids, embed_texts(docs, provider)))


def expected_row_keys(cfg: ExperimentConfig) -> set[RowKey]:
    """The exact grid the report must contain, no more and no less."""
    cells: list[tuple[str, str, int]] = []
    for scenario in cfg.scenarios:
        if scenario in (SCENARIO_BASELINE, SCENARIO_AUGMENTED):
            cells.append((scenario, STRATEGY_NONE, 0))
        if scenario in (SCENARIO_ATTACKED, SCENARIO_AUGMENTED):
            for strategy in cfg.attack_strategies:
                for k in cfg.attack_k_values:
                    cells.append((scenario, strategy, k))
    keys: set[RowKey] = set()
    for scenario, strategy, k in cells:
        for profile in cfg.profile_strategies:
            for stage in (RETRIEVED, RERANKED):
                for label in CLASS_LABELS:
                    keys.add((scenario, strategy, k, profile, stage, label))
    return keys


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_lists(
    path: Path, cell: tuple[str, str, int, str, str], lists: Mapping[int, RecommendationList]
) -> None:
    scenario, strategy, k, profile, stage = cell
    records = [
        {
            "record": "cell",
            "scenario": scenario,
            "strategy": strategy,
            "k": k,
            "profile": profile,
            "stage": stage,
        }
    ]
    for user_id in sorted(lists):
        records.append(
            {
                "record": "list",
                "user_id": user_id,
                "entries": [[item_id, score] for item_id, score in lists[user_id].entries],
            }
        )
    _atomic_write(path, "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n")


def read_lists(path: str | Path) -> tuple[tuple[str, str, int, str, str], dict[int, RecommendationList]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty lists file: {path}")
    head = json.loads(lines[0])
    if head.get("record") != "cell":
        raise ValueError(f"lists file must start with a cell record: {path}")
    cell = (head["scenario"], head["strategy"], int(head["k"]), head["profile"], head["stage"])
    lists: dict[int, RecommendationList] = {}
    for line in lines[1:]:
        rec = json.loads(line)
        if rec.get("record") != "list":
            raise ValueError(f"unexpected record kind {rec.get('record')!r} in {path}")
        lists[int(rec["user_id"])] = RecommendationList(
            user_id=int(rec["user_id"]),
            entries=tuple((int(i), float(s)) for i, s in rec["entries"]),
            stage=cell[4],
        )
    return cell, lists


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Ingest, filter and classify the corpus described by the config."""
    try:
        with open(cfg.ratings_path, encoding="utf-8") as r, open(
            cfg.movies_path, encoding="utf-8"
        ) as m, open(cfg.tags_path, encoding="utf-8") as t:
            ds = corpus.parse_dataset(r, m, t)
    except OSError as exc:
        raise corpus.ParseError(f"cannot read dataset: {exc}") from exc
    ds = corpus.filter_users(ds, cfg.min_interactions, cfg.max_interactions)
    classes = corpus.classify_popularity(ds, cfg.popular_frac, cfg.longtail_frac)
    return corpus.assign_popularity(ds, classes)


class _Runner:
    """Single-run state: dataset arms, providers, split, per-cell evaluation."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.artifacts: dict[str, str] = {}
        self.rows: dict[RowKey, dict[str, float]] = {}
        self._stage = "init"

    def _enter(self, stage: str) -> None:
        self._stage = stage

    def _fail(self, exc: Exception) -> RunError:
        partial = {
            "record": "partial_manifest",
            "failed_stage": self._stage,
            "error": str(exc),
            "config_digest": self.cfg.config_digest,
            "seed": self.cfg.seed,
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        try:
            _atomic_write(self.out / "manifest.partial.json", json.dumps(partial, indent=2) + "\n")
        except OSError:
            pass
        return RunError(self._stage, exc)

    def run(self) -> RunManifest:
        started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        try:
            manifest = self._run_inner()
        except RunError:
            raise
        except Exception as exc:
            raise self._fail(exc) from exc
        finished = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        manifest_obj = RunManifest(
            config_digest=self.cfg.config_digest,
            seed=self.cfg.seed,
            cache_digests=manifest,
            started_at=started,
            finished_at=finished,
            artifacts=dict(sorted(self.artifacts.items())),
        )
        payload = {
            "record": "manifest",
            "config_digest": manifest_obj.config_digest,
            "seed": manifest_obj.seed,
            "cache_digests": dict(manifest_obj.cache_digests),
            "started_at": manifest_obj.started_at,
            "finished_at": manifest_obj.finished_at,
            "artifacts": manifest_obj.artifacts,
        }
        _atomic_write(self.out / "manifest.json", json.dumps(payload, indent=2) + "\n")
        return manifest_obj

    def _run_inner(self) -> dict[str, str]:
        cfg = self.cfg
        self._enter("ingest")
        dataset = load_dataset(cfg)
        if not dataset.items:
            raise ValueError("no items survive filtering; relax the filter bounds")

        self._enter("providers")
        system = build_provider(cfg.system_provider)
        attacker = build_provider(cfg.attacker_provider)

        self._enter("split")
        train, test_items = split_leave_last_out(dataset)
        if not train:
            raise ValueError("empty training split")
        train_by_user: dict[int, list[Interaction]] = {}
        for inter in train:
            train_by_user.setdefault(inter.user_id, []).append(inter)
        reference_time = max(i.timestamp for i in train)
        train_item_sets = {
            u: frozenset(i.item_id for i in inters) for u, inters in train_by_user.items()
        }

        counts = corpus.item_interaction_counts(dataset)
        pop_ranks = popularity_ranks(counts)
        classes = dataset.popularity
        catalog_size = len(dataset.items)

        arms: dict[str, Dataset] = {}
        if SCENARIO_BASELINE in cfg.scenarios or SCENARIO_ATTACKED in cfg.scenarios:
            arms["original"] = dataset
        if SCENARIO_AUGMENTED in cfg.scenarios:
            self._enter("enrich")
            gen = build_generation_provider(cfg.generation)
            records = enrich_items(
                dataset.items, gen, n_tags=cfg.n_tags, max_in_flight=cfg.generation.max_in_flight
            )
            arms["augmented"] = apply_enrichment(dataset, records)
            lines = [
                json.dumps(
                    {
                        "record": "enrichment",
                        "item_id": rec.item_id,
                        "provider_id": rec.provider_id,
                        "content_hash": rec.content_hash,
                        "description": rec.description,
                        "generated_tags": list(rec.generated_tags),
                    },
                    sort_keys=True,
                )
                for _, rec in sorted(records.items())
            ]
            path = self.out / "enrichment.jsonl"
            _atomic_write(path, "\n".join(lines) + "\n")
            self.artifacts["enrichment"] = str(path)

        for scenario in cfg.scenarios:
            arm = arms["augmented"] if scenario == SCENARIO_AUGMENTED else arms["original"]
            cells: list[tuple[str, int]] = []
            if scenario in (SCENARIO_BASELINE, SCENARIO_AUGMENTED):
                cells.append((STRATEGY_NONE, 0))
            if scenario in (SCENARIO_ATTACKED, SCENARIO_AUGMENTED):
                cells.extend(
                    (s, k) for s in cfg.attack_strategies for k in cfg.attack_k_values
                )
            for strategy, k in cells:
                data = arm
                if strategy != STRATEGY_NONE and k > 0:
                    self._enter("attack")
                    attack_cfg = AttackConfig(
                        strategy=strategy,
                        k=k,
                        epsilon=cfg.epsilon,
                        local_pool_neighbors=cfg.local_pool_neighbors,
                    )
                    plan = plan_attack(arm, attack_cfg, attacker)
                    data = apply_poisoning(arm, plan)
                    plan_path = self.out / "plans" / f"{scenario}_{strategy}_k{k}.jsonl"
                    plan_path.parent.mkdir(parents=True, exist_ok=True)
                    write_plan(plan, plan_path)
                    self.artifacts[f"plan_{scenario}_{strategy}_k{k}"] = str(plan_path)
                self._evaluate_cell(
                    scenario,
                    strategy,
                    k,
                    data,
                    system,
                    train_by_user,
                    train_item_sets,
                    test_items,
                    reference_time,
                    counts,
                    pop_ranks,
                    classes,
                    catalog_size,
                )

        self._enter("report")
        expected = expected_row_keys(cfg)
        missing = expected - set(self.rows)
        extra = set(self.rows) - expected
        if missing or extra:
            raise ValueError(
                f"report grid mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
            )
        report = MetricsReport(rows=self.rows, config_digest=cfg.config_digest, seed=cfg.seed)
        report_path = self.out / "report.jsonl"
        _atomic_write(report_path, report.to_jsonl())
        csv_path = self.out / "report.csv"
        _atomic_write(csv_path, report.to_csv())
        table_path = self.out / "report.txt"
        _atomic_write(table_path, report.to_table())
        self.artifacts["report_jsonl"] = str(report_path)
        self.artifacts["report_csv"] = str(csv_path)
        self.artifacts["report_table"] = str(table_path)
        return {"system": system.cache.digest(), "attacker": attacker.cache.digest()}

    def _evaluate_cell(
        self,
        scenario: str,
        strategy: str,
        k: int,
        data: Dataset,
        system,
        train_by_user: Mapping[int, list[Interaction]],
        train_item_sets: Mapping[int, frozenset[int]],
        test_items: Mapping[int, int],
        reference_time: int,
        counts: Mapping[int, int],
        pop_ranks: Mapping[int, int],
        classes: Mapping[int, PopularityClass],
        catalog_size: int,
    ) -> None:
        cfg = self.cfg
        self._enter("embed")
        vectors = embed_item_documents(data, system)
        index = ItemIndex(vectors)
        titles = {i: rec.title for i, rec in data.items.items()}
        for profile_strategy in cfg.profile_strategies:
            self._enter("profile")
            retrieved: dict[int, RecommendationList] = {}
            for user_id in sorted(train_by_user):
                inters = sorted(
                    train_by_user[user_id], key=lambda i: (i.timestamp, i.item_id)
                )
                if profile_strategy == "decay":
                    profile = decay_weighted_profile(
                        inters,
                        vectors,
                        lam=cfg.decay_lambda,
                        alpha=cfg.decay_alpha,
                        reference_time=reference_time,
                    )
                else:
                    profile = rating_weighted_profile(inters, vectors)
                self._enter("retrieve")
                retrieved[user_id] = retrieve_top_k(
                    profile, index, train_item_sets[user_id], cfg.retrieval_k
                )
                self._enter("profile")
            self._enter("rerank")
            reranked: dict[int, RecommendationList] = {}
            for user_id in sorted(retrieved):
                recent = sorted(
                    train_by_user[user_id],
                    key=lambda i: (i.timestamp, i.item_id),
                    reverse=True,
                )[:_RECENT_TITLES_FOR_PROMPT]
                reranked[user_id] = rerank(
                    retrieved[user_id],
                    cfg.reranker,
                    titles=titles,
                    recent_titles=[titles[i.item_id] for i in recent],
                )
            self._enter("evaluate")
            # both stages are measured on cutoff-truncated lists
            before = {u: rl.head(cfg.cutoff) for u, rl in retrieved.items()}
            for stage, lists in ((RETRIEVED, before), (RERANKED, reranked)):
                cell = (scenario, strategy, k, profile_strategy, stage)
                path = self.out / "lists" / ("_".join(map(str, cell)) + ".jsonl")
                write_lists(path, cell, lists)
                self.artifacts["lists_" + "_".join(map(str, cell))] = str(path)
                protocol = EvaluationProtocol(cutoff=cfg.cutoff, stage=stage)
                rel = relevance_metrics(lists, test_items, classes, protocol)
                for label in CLASS_LABELS:
                    key: RowKey = (scenario, strategy, k, profile_strategy, stage, label)
                    self.rows[key] = {
                        metric: rel[(label, metric)] for metric in ("hr", "mrr", "ndcg")
                    }
                all_key: RowKey = (scenario, strategy, k, profile_strategy, stage, CLASS_ALL)
                self.rows[all_key].update(
                    {
                        "objective_binary": attack_objective(lists, classes, ExposureMode.BINARY),
                        "objective_continuous": attack_objective(
                            lists, classes, ExposureMode.CONTINUOUS
                        ),
                        "plift": popularity_lift(lists, counts, train_item_sets),
                        "lt_coverage": longtail_coverage(lists, classes, catalog_size),
                        "mean_pop_rank": mean_popularity_rank(lists, pop_ranks),
                    }
                )


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Execute the full grid and persist plans, lists, report and manifest.

    Any stage failure writes ``manifest.partial.json`` naming the stage and
    raises :class:`RunError`; the report is only ever written whole.
    """
    return _Runner(cfg).run()
