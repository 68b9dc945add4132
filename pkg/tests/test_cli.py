import json
from pathlib import Path

import pytest

from ragtag.cli import main
from ragtag.synth import generate_corpus


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-corpus")
    generate_corpus(
        1, n_users=8, n_items=12, min_ratings_per_user=5, max_ratings_per_user=8
    ).write(root)
    return root


@pytest.fixture
def config_path(corpus_dir, tmp_path):
    body = {
        "dataset": {"dir": str(corpus_dir)},
        "output_dir": str(tmp_path / "out"),
        "offline": True,
        "filter": {"min_interactions": 2, "max_interactions": 100},
        "providers": {"system": {"dim": 16}, "attacker": {"dim": 16}},
        "retrieval": {"k": 8},
        "protocol": {"cutoff": 5},
        "attack": {"strategies": ["local"], "k_values": [1]},
        "scenarios": ["baseline"],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(body), encoding="utf-8")
    return path


def out_dir(config_path):
    return Path(json.loads(config_path.read_text())["output_dir"])


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "ragtag" in capsys.readouterr().out

    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_missing_config_flag(self, capsys):
        assert main(["ingest"]) == 1
        assert "--config" in capsys.readouterr().err


class TestValidationFailures:
    def test_unknown_config_key(self, config_path, capsys):
        body = json.loads(config_path.read_text())
        body["surprise"] = 1
        config_path.write_text(json.dumps(body))
        assert main(["ingest", "--config", str(config_path)]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_unparseable_config(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{oops")
        assert main(["ingest", "--config", str(path)]) == 1
        assert "not valid JSON" in capsys.readouterr().err

    def test_missing_dataset_files(self, config_path, tmp_path, capsys):
        body = json.loads(config_path.read_text())
        body["dataset"] = {"dir": str(tmp_path / "nowhere")}
        config_path.write_text(json.dumps(body))
        assert main(["ingest", "--config", str(config_path)]) == 1
        assert "cannot read dataset" in capsys.readouterr().err

    def test_bad_scenario_flag(self, config_path, capsys):
        code = main(["run", "--config", str(config_path), "--scenario", "nope"])
        assert code == 1
        assert "unknown scenario" in capsys.readouterr().err

    def test_run_failure_without_provider_cause(self, config_path, tmp_path, capsys):
        body = json.loads(config_path.read_text())
        body["filter"] = {"min_interactions": 99, "max_interactions": 100}
        config_path.write_text(json.dumps(body))
        assert main(["run", "--config", str(config_path)]) == 1
        assert "stage ingest" in capsys.readouterr().err


class TestProviderFailures:
    def test_rerank_provider_failure(self, config_path, tmp_path, capsys):
        body = json.loads(config_path.read_text())
        fixture = tmp_path / "orders.json"
        fixture.write_text("{}")
        body["reranker"] = {"kind": "scripted", "fixture_path": str(fixture)}
        config_path.write_text(json.dumps(body))
        assert main(["evaluate", "--config", str(config_path)]) == 2
        assert "provider error" in capsys.readouterr().err

    def test_unreachable_embedding_endpoint(self, config_path, monkeypatch, capsys):
        monkeypatch.setenv("EMB_KEY", "k")
        body = json.loads(config_path.read_text())
        body["offline"] = False
        body["providers"]["system"] = {
            "kind": "remote",
            "model_name": "m",
            "endpoint_url": "http://127.0.0.1:9/v1/embeddings",
            "api_key_env": "EMB_KEY",
        }
        config_path.write_text(json.dumps(body))
        assert main(["embed", "--config", str(config_path)]) == 2
        assert "provider error" in capsys.readouterr().err


class TestCommands:
    def test_ingest_prints_stats(self, config_path, capsys):
        assert main(["ingest", "--config", str(config_path)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["n_items"] == 12
        assert stats["n_users"] == 8
        assert stats["density_percent"] > 0

    def test_embed_reports_cache_digest(self, config_path, capsys):
        assert main(["embed", "--config", str(config_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["embedded"] == 12
        assert len(payload["cache_digest"]) == 64
        assert (out_dir(config_path) / "cache" / "system.bin").is_file()

    def test_enrich_writes_records(self, config_path, capsys):
        assert main(["enrich", "--config", str(config_path)]) == 0
        path = out_dir(config_path) / "enrichment.jsonl"
        assert str(path) in capsys.readouterr().out
        records = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(records) == 12
        assert all(r["record"] == "enrichment" for r in records)

    def test_attack_writes_plans(self, config_path, capsys):
        assert main(["attack", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "local k=1" in out
        assert (out_dir(config_path) / "plans" / "attacked_local_k1.jsonl").is_file()

    def test_attack_with_no_positive_k(self, config_path, capsys):
        body = json.loads(config_path.read_text())
        body["attack"]["k_values"] = [0]
        config_path.write_text(json.dumps(body))
        assert main(["attack", "--config", str(config_path)]) == 0
        assert "no attack cells" in capsys.readouterr().out

    def test_recommend_prints_list_paths(self, config_path, capsys):
        assert main(["recommend", "--config", str(config_path)]) == 0
        paths = capsys.readouterr().out.splitlines()
        assert paths
        assert all(Path(p).is_file() for p in paths)

    def test_evaluate_prints_table(self, config_path, capsys):
        assert main(["evaluate", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "scenario" in out.splitlines()[0]
        assert "baseline" in out

    def test_run_prints_manifest_summary(self, config_path, capsys):
        assert main(["run", "--config", str(config_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert Path(payload["report"]).is_file()
        assert Path(payload["manifest"]).is_file()
        manifest = json.loads(Path(payload["manifest"]).read_text())
        assert manifest["config_digest"] == payload["config_digest"]

    def test_run_seed_override_lands_in_manifest(self, config_path, capsys):
        assert main(["run", "--config", str(config_path), "--seed", "5"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["seed"] == 5
        assert json.loads(Path(payload["manifest"]).read_text())["seed"] == 5

    def test_report_rerenders_from_out_dir(self, config_path, capsys):
        assert main(["run", "--config", str(config_path)]) == 0
        capsys.readouterr()
        out = out_dir(config_path)
        (out / "report.csv").unlink()
        assert main(["report", "--out", str(out)]) == 0
        assert (out / "report.csv").is_file()
        assert "scenario" in capsys.readouterr().out.splitlines()[0]

    def test_report_requires_some_location(self, capsys):
        assert main(["report"]) == 1
        assert "requires --config or --out" in capsys.readouterr().err

    def test_report_missing_source(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path / "void")]) == 1
        assert "no report found" in capsys.readouterr().err
