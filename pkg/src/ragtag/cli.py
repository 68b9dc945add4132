"""Command-line surface over the experiment harness.

Subcommands mirror the pipeline stages (ingest, enrich, embed, attack,
recommend, evaluate) plus `run` for the full grid and `report` to re-render
a stored report. Exit codes: 0 success, 1 validation/config error, 2
provider failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ragtag import corpus, harness
from ragtag.attack import AttackConfig, plan_attack, write_plan
from ragtag.corpus import ParseError
from ragtag.embedding import ProviderError, build_provider
from ragtag.enrichment import EnrichmentError, build_generation_provider, enrich_items
from ragtag.evaluation import MetricsReport
from ragtag.harness import ConfigError, RunError, load_config
from ragtag.retrieval import RerankError

_PROVIDER_FAILURES = (ProviderError, EnrichmentError, RerankError)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract reserves 2 for providers
    def error(self, message: str):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ragtag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "parse, filter and classify the corpus; print its stats"),
        ("enrich", "generate descriptions and auto-tags; write enrichment.jsonl"),
        ("embed", "embed all item documents through the cache"),
        ("attack", "write attack plans for every configured (strategy, k)"),
        ("recommend", "write baseline recommendation lists"),
        ("evaluate", "print baseline metrics as an aligned table"),
        ("run", "execute the full experiment grid"),
        ("report", "re-render report.csv and report.txt from report.jsonl"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "report", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--offline", action="store_true", default=None,
                       help="forbid remote providers; require fixtures")
        p.add_argument("--scenario", default=None,
                       help="restrict the run to one scenario")
    return parser


def _config(args) -> harness.ExperimentConfig:
    return load_config(
        args.config,
        seed=args.seed,
        out=args.out,
        offline=args.offline,
        scenario=args.scenario,
    )


def _cmd_ingest(args) -> int:
    cfg = _config(args)
    dataset = harness.load_dataset(cfg)
    stats = corpus.dataset_stats(dataset)
    print(
        json.dumps(
            {
                "n_users": stats.n_users,
                "n_items": stats.n_items,
                "n_interactions": stats.n_interactions,
                "interactions_per_user": stats.interactions_per_user,
                "interactions_per_item": stats.interactions_per_item,
                "density_percent": stats.density_percent,
            },
            indent=2,
        )
    )
    return 0


def _cmd_enrich(args) -> int:
    cfg = _config(args)
    dataset = harness.load_dataset(cfg)
    provider = build_generation_provider(cfg.generation)
    records = enrich_items(
        dataset.items, provider, n_tags=cfg.n_tags, max_in_flight=cfg.generation.max_in_flight
    )
    out = Path(cfg.output_dir) / "enrichment.jsonl"
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
    harness._atomic_write(out, "\n".join(lines) + "\n")
    print(f"enriched {len(records)} items -> {out}")
    return 0


def _cmd_embed(args) -> int:
    cfg = _config(args)
    dataset = harness.load_dataset(cfg)
    provider = build_provider(cfg.system_provider)
    vectors = harness.embed_item_documents(dataset, provider)
    print(
        json.dumps(
            {"embedded": len(vectors), "cache_digest": provider.cache.digest()}, indent=2
        )
    )
    return 0


def _cmd_attack(args) -> int:
    cfg = _config(args)
    dataset = harness.load_dataset(cfg)
    attacker = build_provider(cfg.attacker_provider)
    plan_dir = Path(cfg.output_dir) / "plans"
    plan_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for strategy in cfg.attack_strategies:
        for k in cfg.attack_k_values:
            if k < 1:
                continue
            attack_cfg = AttackConfig(
                strategy=strategy,
                k=k,
                epsilon=cfg.epsilon,
                local_pool_neighbors=cfg.local_pool_neighbors,
            )
            plan = plan_attack(dataset, attack_cfg, attacker)
            path = plan_dir / f"attacked_{strategy}_k{k}.jsonl"
            write_plan(plan, path)
            written.append(str(path))
            print(f"{strategy} k={k}: {sum(1 for m in plan.modifications if m.added_tags)} "
                  f"items modified -> {path}")
    if not written:
        print("no attack cells configured (k_values all zero)")
    return 0


def _run_restricted(args, scenarios: tuple[str, ...]) -> harness.RunManifest:
    cfg = _config(args)
    if args.scenario is None:
        cfg = replace(cfg, scenarios=scenarios)
    return harness.run_experiment(cfg)


def _cmd_recommend(args) -> int:
    manifest = _run_restricted(args, (harness.SCENARIO_BASELINE,))
    lists = {k: v for k, v in manifest.artifacts.items() if k.startswith("lists_")}
    for name in sorted(lists):
        print(lists[name])
    return 0


def _cmd_evaluate(args) -> int:
    manifest = _run_restricted(args, (harness.SCENARIO_BASELINE,))
    report_path = manifest.artifacts["report_table"]
    print(Path(report_path).read_text(encoding="utf-8"), end="")
    return 0


def _cmd_run(args) -> int:
    cfg = _config(args)
    manifest = harness.run_experiment(cfg)
    print(
        json.dumps(
            {
                "config_digest": manifest.config_digest,
                "seed": manifest.seed,
                "report": manifest.artifacts["report_jsonl"],
                "table": manifest.artifacts["report_table"],
                "manifest": str(Path(cfg.output_dir) / "manifest.json"),
            },
            indent=2,
        )
    )
    return 0


def _cmd_report(args) -> int:
    if args.config:
        out_dir = Path(args.out or _config(args).output_dir)
    elif args.out:
        out_dir = Path(args.out)
    else:
        raise ConfigError("report requires --config or --out")
    source = out_dir / "report.jsonl"
    if not source.is_file():
        raise ConfigError(f"no report found at {source}")
    report = MetricsReport.from_jsonl(source.read_text(encoding="utf-8"))
    harness._atomic_write(out_dir / "report.csv", report.to_csv())
    harness._atomic_write(out_dir / "report.txt", report.to_table())
    print(report.to_table(), end="")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "enrich": _cmd_enrich,
    "embed": _cmd_embed,
    "attack": _cmd_attack,
    "recommend": _cmd_recommend,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _PROVIDER_FAILURES as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 2
    except RunError as exc:
        kind = "provider error" if isinstance(exc.cause, _PROVIDER_FAILURES) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, _PROVIDER_FAILURES) else 1
    except (ConfigError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
