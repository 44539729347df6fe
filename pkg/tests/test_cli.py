import filecmp
import json
import os

import pytest
import yaml

from fedrec_lab.cli import main
from fedrec_lab.config import (
    ConfigError,
    apply_overrides,
    config_from_dict,
    load_preset,
)
from fedrec_lab.runner import RunArtifacts, StageError, emit_report, run_experiment

TINY = {
    "name": "tiny",
    "dataset": {"source": "synthetic", "format": "ml-100k",
                "synthetic": {"users": 12, "items": 160, "interactions": 300,
                              "seed": 3}},
    "model": {"kind": "ncf", "embed_dim": 8, "ffn_dims": [16, 8, 4]},
    "train": {"lr": 0.001, "local_epochs": 2, "batch_size": 32,
              "neg_ratio": "1:4", "global_epochs": 3, "participants": 12},
    "attack": {"gamma": 0.2, "shadow_epochs": 2, "attack_users": 4},
    "sweep": {"lambda_grid": [0.0, 0.1], "mu_grid": [0.5],
              "gamma_grid": [0.5]},
    "seeds": {"master": 1},
    "stages": ["ingest", "train", "attack", "analyze", "report"],
}


def tiny_config(**updates):
    raw = json.loads(json.dumps(TINY))
    raw.update(updates)
    return config_from_dict(raw)


class TestConfig:
    def test_valid_round_trip(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "cfg.yaml"
        cfg.save(path)
        reloaded = config_from_dict(yaml.safe_load(path.read_text()))
        assert reloaded.as_dict() == cfg.as_dict()

    def test_field_level_diagnostics_collected(self):
        raw = json.loads(json.dumps(TINY))
        raw["defense"] = {"ldp_lambda": -1, "mu": -2, "penalty_scope": "nope"}
        raw["stages"] = ["report", "train"]
        with pytest.raises(ConfigError) as err:
            config_from_dict(raw)
        msg = str(err.value)
        assert "ldp_lambda" in msg and "mu" in msg
        assert "penalty_scope" in msg and "stages" in msg

    def test_unknown_stage_rejected(self):
        raw = json.loads(json.dumps(TINY))
        raw["stages"] = ["fly"]
        with pytest.raises(ConfigError, match="fly"):
            config_from_dict(raw)

    def test_overrides_apply_dot_paths(self):
        raw = apply_overrides(TINY, ["train.lr=0.01", "defense.mu=0.4",
                                     "dataset.max_users=5"])
        cfg = config_from_dict(raw)
        assert cfg.train.lr == 0.01 and cfg.mu == 0.4
        assert cfg.dataset.max_users == 5

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides(TINY, ["no-equals-sign"])

    def test_presets_ship_and_parse(self):
        for name in ("toy", "ml100k-sub", "ml100k-full"):
            cfg = config_from_dict(load_preset(name))
            assert cfg.train.lr == 0.001
        assert config_from_dict(load_preset("ml100k-sub")).dataset.max_users == 100

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigError, match="ml100k-sub"):
            load_preset("missing")

    def test_seed_block_from_master_is_complete(self):
        cfg = tiny_config()
        seeds = cfg.seeds.as_dict()
        assert len(seeds) == 9
        assert len(set(seeds.values())) == 9


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "tiny"
    art = run_experiment(tiny_config(), out_dir=str(out))
    return art


class TestPipeline:
    def test_all_stages_complete(self, tiny_run):
        manifest = json.load(open(os.path.join(tiny_run.root, "manifest.json")))
        assert manifest["completed"] == TINY["stages"]
        assert manifest["failed"] is None

    def test_ingest_stats_match_synthetic_spec(self, tiny_run):
        stats = json.load(open(os.path.join(tiny_run.root, "ingest", "stats.json")))
        assert stats["users"] == 12 and stats["items"] == 160
        assert stats["interactions"] == 300

    def test_attack_jsonl_schema(self, tiny_run):
        with open(os.path.join(tiny_run.root, "attack", "imia.jsonl")) as fh:
            rows = [json.loads(line) for line in fh]
        assert len(rows) == 4
        for row in rows:
            assert {"user", "touched", "predicted", "iterations",
                    "precision", "recall", "f1"} <= set(row)

    def test_report_files_rendered(self, tiny_run):
        rep = os.path.join(tiny_run.root, "report")
        names = set(os.listdir(rep))
        assert {"attack_f1.csv", "buckets.csv", "summary.json",
                "summary.md"} <= names
        assert {"curve.png", "deviation.png", "buckets.png"} <= names

    def test_metric_reports_reproduce_byte_identical(self, tiny_run, tmp_path):
        art2 = run_experiment(tiny_config(), out_dir=str(tmp_path / "again"))
        for name in ("attack_f1.csv", "buckets.csv", "summary.json", "summary.md"):
            a = os.path.join(tiny_run.root, "report", name)
            b = os.path.join(art2.root, "report", name)
            assert filecmp.cmp(a, b, shallow=False), name

    def test_json_report_roundtrip_reemit_identical(self, tiny_run, tmp_path):
        # reload the emitted metrics json and re-emit: identical bytes
        art = RunArtifacts(root=tiny_run.root, config=tiny_run.config)
        before = open(os.path.join(tiny_run.root, "report", "summary.json"),
                      "rb").read()
        emit_report(art)
        after = open(os.path.join(tiny_run.root, "report", "summary.json"),
                     "rb").read()
        assert before == after

    def test_figures_are_valid_png(self, tiny_run):
        for name in ("curve.png", "deviation.png", "buckets.png"):
            with open(os.path.join(tiny_run.root, "report", name), "rb") as fh:
                assert fh.read(8) == b"\x89PNG\r\n\x1a\n"


class TestSweep:
    def test_sweep_grids_produce_report_tables(self, tmp_path):
        cfg = tiny_config(stages=["ingest", "train", "attack", "sweep",
                                  "analyze", "report"])
        art = run_experiment(cfg, out_dir=str(tmp_path / "sweep"))
        sweep = json.load(open(os.path.join(art.root, "sweep", "summary.json")))
        assert [r["lambda"] for r in sweep["lambda"]] == [0.0, 0.1]
        assert [r["mu"] for r in sweep["mu"]] == [0.5]
        assert [r["gamma"] for r in sweep["gamma"]] == [0.5]
        rep = os.listdir(os.path.join(art.root, "report"))
        assert {"ldp_grid.csv", "defender_grid.csv", "gamma.csv",
                "deviation.csv", "cost_effectiveness.csv",
                "ldp_tradeoff.png", "mu_tradeoff.png", "gamma.png"} <= set(rep)
        metrics = json.load(open(os.path.join(art.root, "analyze",
                                              "metrics.json")))
        assert "cost_effectiveness" in metrics


class TestEmitReportErrors:
    def test_empty_artifacts_error_lists_missing_stages(self, tmp_path):
        art = RunArtifacts(root=str(tmp_path / "empty"), config=tiny_config())
        os.makedirs(art.root, exist_ok=True)
        with pytest.raises(StageError) as err:
            emit_report(art)
        assert "ingest" in str(err.value) and "train" in str(err.value)

    def test_attack_without_trace_is_stage_error(self, tmp_path):
        cfg = tiny_config(stages=["ingest", "attack"])
        with pytest.raises(StageError, match="train"):
            run_experiment(cfg, out_dir=str(tmp_path / "half"))
        manifest = json.load(open(tmp_path / "half" / "manifest.json"))
        assert manifest["failed"]["stage"] == "attack"
        assert manifest["completed"] == ["ingest"]


class TestCliEntry:
    def test_synth_subcommand(self, tmp_path, capsys):
        path = tmp_path / "synth.data"
        rc = main(["synth", str(path), "--users", "10", "--items", "200",
                   "--interactions", "250", "--seed", "2"])
        assert rc == 0 and path.exists()

    def test_config_error_exit_code_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train: {lr: -5}\n")
        rc = main(["ingest", "--config", str(bad)])
        assert rc == 1
        assert "config error" in capsys.readouterr().err

    def test_ingest_pipeline_prefix(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        with open(cfg, "w") as fh:
            yaml.safe_dump(TINY, fh)
        rc = main(["ingest", "--config", str(cfg), "--out",
                   str(tmp_path / "out")])
        assert rc == 0
        assert os.path.exists(tmp_path / "out" / "ingest" / "stats.json")
        assert not os.path.exists(tmp_path / "out" / "train")

    def test_report_stage_error_exit_code_2(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        raw = json.loads(json.dumps(TINY))
        raw["stages"] = ["report"]
        with open(cfg, "w") as fh:
            yaml.safe_dump(raw, fh)
        rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_replay_verifies_reports(self, tmp_path, capsys):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.yaml"
        raw = json.loads(json.dumps(TINY))
        raw["attack"]["attack_users"] = 2
        raw["train"]["global_epochs"] = 2
        with open(cfg, "w") as fh:
            yaml.safe_dump(raw, fh)
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        rc = main(["replay", str(out), "--scratch", str(tmp_path / "replay")])
        assert rc == 0
        assert "replay ok" in capsys.readouterr().out
