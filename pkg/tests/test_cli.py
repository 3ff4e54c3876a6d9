import json
import math

import numpy as np
import pytest

from flowad import cli
from flowad.config import ConfigError, RunConfig, config_from_dict, load_config, save_config
from flowad.dataio import SeriesPanel, write_panel


@pytest.fixture()
def workdir(tmp_path):
    rs = np.random.RandomState(5)
    T = 288 * 5
    t = np.arange(T)
    base = np.sin(2 * np.pi * t / 288)
    values = np.column_stack([base + rs.normal(0, 0.1, T),
                              0.7 * base + rs.normal(0, 0.1, T),
                              -0.5 * base + rs.normal(0, 0.1, T)])
    panel = SeriesPanel(1546300800 + 300 * np.arange(T),
                        ["s0", "s1", "s2"], values)
    write_panel(panel, tmp_path / "panel.csv")
    cfg = {
        "seed": 11,
        "window": {"context_len": 24, "pred_len": 6, "stride": 6},
        "model": {"hidden": [12], "n_blocks": 2, "st_hidden": 8, "st_layers": 1},
        "train": {"max_epochs": 4, "batch_size": 32, "learning_rate": 5e-3,
                  "patience": 3},
        "synth": {"alpha": 0.08, "beta": 1.0, "steps": 600},
        "eval": {"alphas": [0.1], "betas": [1.0], "replicates": 1,
                 "test_fraction": 0.25, "ar_lag": 6},
    }
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    return tmp_path


def run(args):
    return cli.main([str(a) for a in args])


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        path = tmp_path / "c.json"
        save_config(RunConfig(), path)
        cfg = load_config(path)
        assert cfg.window.context_len == 72
        assert cfg.model.hidden == [128, 64]
        assert cfg.threshold.mode == "static"

    def test_unknown_key_names_field(self):
        with pytest.raises(ConfigError, match="window.bogus"):
            config_from_dict({"window": {"bogus": 3}})

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError, match="threshold.mode"):
            config_from_dict({"threshold": {"mode": "magic"}})

    def test_invalid_q_rejected(self):
        with pytest.raises(ConfigError, match="threshold.q"):
            config_from_dict({"threshold": {"q": 0.5}})


class TestPipeline:
    def test_full_pipeline_smoke(self, workdir, capsys):
        cfgargs = ["--config", workdir / "config.json", "--out", workdir]
        assert run(["cluster", "--data", workdir / "panel.csv", *cfgargs]) == 0
        assert (workdir / "clusters.csv").exists()

        assert run(["train", "--data", workdir / "panel.csv", *cfgargs]) == 0
        ckpt = workdir / "model_all.ckpt"
        assert ckpt.exists()

        assert run(["synth", "--data", workdir / "panel.csv", *cfgargs]) == 0
        assert (workdir / "values.csv").exists()
        assert (workdir / "labels.csv").exists()

        assert run(["score", "--checkpoint", ckpt, "--data",
                    workdir / "values.csv", *cfgargs]) == 0
        scores = workdir / "scores.csv"
        assert scores.exists()

        assert run(["detect", "--scores", scores, "--mode", "static",
                    "--labels", workdir / "labels.csv", *cfgargs]) == 0
        assert (workdir / "flags.csv").exists()

        assert run(["diagnose", "--flags", workdir / "flags.csv",
                    "--history", workdir / "values.csv", *cfgargs]) == 0
        assert (workdir / "diagnosis.csv").exists()

        assert run(["report", "--scores", scores, *cfgargs]) == 0
        report = (workdir / "report.csv").read_text().strip().splitlines()
        n_scores = len(scores.read_text().strip().splitlines()) - 1
        assert len(report) - 1 == math.ceil(n_scores / 3)  # 15 min / 5 min cadence

        assert run(["generate", "--checkpoint", ckpt, "--data",
                    workdir / "panel.csv", "--length", "400", *cfgargs]) == 0
        assert run(["classify", "--values", workdir / "generated_values.csv",
                    "--labels", workdir / "generated_labels.csv", *cfgargs]) == 0
        metrics = (workdir / "classifier_metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("precision,recall,f1,auc")
        capsys.readouterr()

    def test_alpha_zero_then_static_detect_fails(self, workdir, capsys):
        cfgargs = ["--config", workdir / "config.json", "--out", workdir]
        assert run(["train", "--data", workdir / "panel.csv", "--epochs", "1",
                    *cfgargs]) == 0
        assert run(["synth", "--data", workdir / "panel.csv", "--alpha", "0",
                    *cfgargs]) == 0
        assert run(["score", "--checkpoint", workdir / "model_all.ckpt",
                    "--data", workdir / "values.csv", *cfgargs]) == 0
        code = run(["detect", "--scores", workdir / "scores.csv",
                    "--mode", "static", "--labels", workdir / "labels.csv",
                    *cfgargs])
        assert code == 1
        assert "SPOT" in capsys.readouterr().err

    def test_idempotent_outputs(self, workdir, capsys):
        cfgargs = ["--config", workdir / "config.json", "--out", workdir]
        assert run(["train", "--data", workdir / "panel.csv", "--epochs", "2",
                    *cfgargs]) == 0
        first = (workdir / "model_all.ckpt").read_bytes()
        assert run(["train", "--data", workdir / "panel.csv", "--epochs", "2",
                    *cfgargs]) == 0
        assert (workdir / "model_all.ckpt").read_bytes() == first
        capsys.readouterr()

    def test_invalid_config_nonzero_exit(self, workdir, capsys):
        bad = workdir / "bad.json"
        bad.write_text('{"threshold": {"mode": "nope"}}')
        code = run(["cluster", "--data", workdir / "panel.csv",
                    "--config", bad, "--out", workdir])
        assert code == 1
        assert "threshold.mode" in capsys.readouterr().err

    def test_missing_file_nonzero_exit(self, workdir, capsys):
        code = run(["score", "--checkpoint", workdir / "nope.ckpt",
                    "--data", workdir / "panel.csv", "--out", workdir])
        assert code == 1
        capsys.readouterr()

    def test_init_config(self, workdir):
        assert run(["init-config", "--out", workdir / "sub"]) == 0
        cfg = load_config(workdir / "sub" / "config.json")
        assert cfg.train.max_epochs == 300
