import json
from pathlib import Path

import pytest
import yaml

from cxrkit.cli import run_command


def write_config(tmp: Path) -> Path:
    cfg = {
        "paths": {
            "data_root": str(tmp / "data"),
            "output_root": str(tmp / "out"),
        },
        "seeds": {"split_seed": 3, "global_seed": 0, "tsne_seed": 0},
        "split": {"test_fraction": 0.3},
        "segmentation": {"fallback": "constant"},
        "model": {
            "model_id": "tiny-cli",
            "backbone_kind": "tiny_test_cnn",
            "head_layer_widths": [64, 16, 2],
        },
        "training": {
            "initial_learning_rate": 3e-3,
            "lr_decay_per_epoch": 0.95,
            "l2_coefficient": 1e-4,
            "epochs": 2,
            "batch_size": 8,
        },
        "retrieval": {"k": 4, "perplexity": 3, "iterations": 250},
        "bootstrap": {
            "n_train_resamples": 2,
            "n_bootstraps_each": 2,
            "metrics": ["accuracy"],
        },
        "compare": {
            "models": [
                {"name": "tiny_pre", "backbone_kind": "tiny_test_cnn",
                 "head_layer_widths": [64, 16, 2], "init_seed": 0},
                {"name": "tiny_raw", "backbone_kind": "tiny_test_cnn",
                 "head_layer_widths": [64, 16, 2], "init_seed": 1,
                 "preprocessing": False},
            ]
        },
        "synthetic": {"n_patients": 10, "scans_per_patient": 2, "seed": 1},
    }
    path = tmp / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Run the documented command chain once; tests inspect the artifacts."""
    tmp = tmp_path_factory.mktemp("cli")
    config = write_config(tmp)
    for command in (
        "synth",
        "ingest",
        "split",
        "preprocess",
        "train",
        "evaluate",
        "embed",
        "index",
        "project",
        "compare",
        "bootstrap",
        "report",
    ):
        code = run_command([command, "--config", str(config)])
        assert code == 0, f"{command} exited {code}"
    return tmp, config


class TestUsage:
    def test_unknown_command_exits_one(self, capsys):
        assert run_command(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_command_exits_one(self):
        assert run_command([]) == 1

    def test_missing_config_file_exits_one(self):
        assert run_command(["split", "--config", "/no/such/config.yaml"]) == 1


class TestChainArtifacts:
    def test_ingest_and_split_outputs(self, chain):
        tmp, _ = chain
        out = tmp / "out"
        assert (out / "manifest.clean.csv").exists()
        split = json.loads((out / "split.json").read_text())
        assert len(split["train_ids"]) + len(split["test_ids"]) == 20

    def test_preprocess_cache_written(self, chain):
        tmp, _ = chain
        cached = list((tmp / "out" / "cache").glob("*.canon.cxi"))
        assert len(cached) == 20

    def test_train_registers_checkpoint(self, chain):
        tmp, _ = chain
        out = tmp / "out"
        assert (out / "checkpoints" / "tiny-cli.ckpt").exists()
        registry = json.loads((out / "registry.json").read_text())
        active = [e for e in registry["entries"] if e["is_active"]]
        assert [e["model_id"] for e in active] == ["tiny-cli"]
        log_lines = (out / "training_log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) >= 2  # one structured record per epoch

    def test_evaluate_bundle(self, chain):
        tmp, _ = chain
        out = tmp / "out" / "report" / "evaluate" / "tiny-cli"
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert (out / "roc.tsv").exists()
        assert (out / "histogram.tsv").exists()

    def test_embed_index_project_outputs(self, chain):
        tmp, _ = chain
        out = tmp / "out"
        emb_lines = (out / "embeddings.tsv").read_text().strip().splitlines()
        assert len(emb_lines) == 2 + 20  # header pair + one row per scan
        index_head = (out / "index.tsv").read_text().splitlines()[1]
        assert "dim=16" in index_head
        proj_lines = (out / "projection.tsv").read_text().strip().splitlines()
        assert len(proj_lines) == 1 + 20

    def test_compare_artifacts(self, chain):
        tmp, _ = chain
        out = tmp / "out" / "compare"
        table = (out / "comparison.tsv").read_text().strip().splitlines()
        assert len(table) == 4  # header, two models, vote
        assert (out / "scores_tiny_pre.tsv").exists()
        assert (out / "scores_tiny_raw.tsv").exists()

    def test_bootstrap_output(self, chain):
        tmp, _ = chain
        text = (tmp / "out" / "bootstrap_cis.tsv").read_text()
        line = [l for l in text.splitlines() if l.startswith("accuracy")][0]
        fields = line.split("\t")
        assert int(fields[4]) == 4  # 2 resamples x 2 bootstraps

    def test_report_emits_curves_histograms_table_figures(self, chain):
        tmp, _ = chain
        report_dir = tmp / "out" / "report"
        assert (report_dir / "comparison.tsv").exists()
        assert (report_dir / "tiny_pre" / "roc.tsv").exists()
        assert (report_dir / "tiny_pre" / "pr.tsv").exists()
        assert (report_dir / "tiny_pre" / "histogram.tsv").exists()
        assert (report_dir / "tsne.tsv").exists()
        assert (report_dir / "distance_stats.tsv").exists()
        assert (report_dir / "bootstrap_cis.tsv").exists()
        figures = list((report_dir / "figures").glob("*.png"))
        assert len(figures) >= 5
        assert (report_dir / "figures" / "tsne.png").exists()

    def test_service_loads_chain_artifacts(self, chain):
        from fastapi.testclient import TestClient

        from cxrkit.config import load_config
        from cxrkit.service import ServicePaths, create_app, load_service_state

        tmp, config = chain
        cfg = load_config(config)
        paths = ServicePaths(
            registry=cfg.path("registry_file"),
            index=cfg.path("index_file"),
            embeddings=cfg.path("embeddings_file"),
            projection=cfg.path("projection_file"),
            manifest=cfg.path("clean_manifest"),
            mask_weights=cfg.path("mask_weights"),
            cache_dir=cfg.path("cache_dir"),
        )
        client = TestClient(create_app(load_service_state(paths)))
        health = client.get("/health").json()
        assert health["model_loaded"] is True
        assert health["index_size"] > 0
        assert client.get("/projection").status_code == 200
        some_scan = json.loads((tmp / "out" / "split.json").read_text())["test_ids"][0]
        similar = client.get(f"/scans/{some_scan}/similar").json()
        assert len(similar["neighbors"]) == 4


class TestDeterminism:
    def test_split_with_seed_twice_identical(self, chain, tmp_path):
        tmp, config = chain
        split_path = tmp / "out" / "split.json"
        first = split_path.read_bytes()
        assert run_command(["split", "--config", str(config), "--seed", "3"]) == 0
        second = split_path.read_bytes()
        assert run_command(["split", "--config", str(config), "--seed", "3"]) == 0
        assert split_path.read_bytes() == second
        # different seed changes the split
        assert run_command(["split", "--config", str(config), "--seed", "4"]) == 0
        assert split_path.read_bytes() != second
        # restore the chain's split for later tests
        split_path.write_bytes(first)


class TestRuntimeErrors:
    def test_evaluate_without_checkpoint_exits_two(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run_command(["synth", "--config", str(config)]) == 0
        assert run_command(["ingest", "--config", str(config)]) == 0
        assert run_command(["split", "--config", str(config)]) == 0
        code = run_command(["evaluate", "--config", str(config)])
        assert code == 2
        assert "no checkpoint" in capsys.readouterr().err

    def test_split_before_ingest_exits_two(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run_command(["split", "--config", str(config)]) == 2
        assert "ingest" in capsys.readouterr().err

    def test_report_with_nothing_exits_two(self, tmp_path):
        config = write_config(tmp_path)
        assert run_command(["report", "--config", str(config)]) == 2


class TestConfigHandling:
    def test_env_path_override(self, tmp_path, monkeypatch):
        from cxrkit.config import load_config

        config = write_config(tmp_path)
        monkeypatch.setenv("CXRKIT_SPLIT_FILE", str(tmp_path / "elsewhere.json"))
        cfg = load_config(config)
        assert cfg.path("split_file") == tmp_path / "elsewhere.json"

    def test_command_logs_resolved_config(self, tmp_path, capsys):
        config = write_config(tmp_path)
        run_command(["synth", "--config", str(config)])
        err = capsys.readouterr().err
        start = [l for l in err.splitlines() if '"command_start"' in l]
        assert start
        payload = json.loads(start[0])
        assert payload["config"]["model_id"] == "tiny-cli"
