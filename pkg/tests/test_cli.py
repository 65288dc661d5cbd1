import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from tesfit.cli import main
from tesfit.data import read_features, read_proxies


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = run_cli("synth", "--out", out, "--seed", "3", "--classes", "3", "--dim", "8",
                   "--per-class", "40", "--margin", "6.0", "--proxy-noise", "0.05")
    assert code == 0
    return out


class TestSynth:
    def test_writes_readable_files(self, synth_dir):
        ds = read_features(synth_dir / "data")
        assert ds.n == 120 and ds.dim == 8 and ds.n_classes == 3
        proxies = read_proxies(synth_dir / "proxies")
        assert proxies.z.shape == (8, 3)

    def test_same_seed_identical_files(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("synth", "--out", tmp_path / name, "--seed", "9") == 0
        for fname in ("data.tesf", "data.tesl", "data.names", "proxies.tesf"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()

    def test_dim_below_classes_is_usage_error(self, tmp_path):
        assert run_cli("synth", "--out", tmp_path / "x", "--classes", "5", "--dim", "3") == 2


class TestTrain:
    def test_ce_on_separable_data(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_cli("train", "--features", synth_dir / "data", "--out", out,
                       "--loss", "CE", "--epochs", "40", "--lr", "0.05",
                       "--lr-backbone", "1e-3", "--seed", "0")
        assert code == 0
        printed = capsys.readouterr().out
        assert "top1" in printed
        metrics = (out / "metrics.csv").read_text().splitlines()
        top1 = float(metrics[1].split(",")[0])
        assert top1 >= 0.99
        assert (out / "snapshot.tesm").exists()
        assert (out / "trace.json").exists()
        assert (out / "confusion.csv").exists()

    def test_tes_requires_proxy_file(self, synth_dir, tmp_path):
        code = run_cli("train", "--features", synth_dir / "data", "--out", tmp_path / "r",
                       "--loss", "TES", "--epochs", "2")
        assert code == 2

    def test_rerun_byte_identical(self, synth_dir, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run_cli("train", "--features", synth_dir / "data", "--proxies",
                           synth_dir / "proxies", "--out", out, "--loss", "TES",
                           "--epochs", "5", "--lr", "0.05", "--seed", "7")
            assert code == 0
            outs.append(out)
        for fname in ("snapshot.tesm", "trace.json", "confusion.csv", "metrics.csv",
                      "trace_initial.tesm", "trace_final.tesm"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname

    def test_missing_features_usage_error(self, tmp_path):
        assert run_cli("train", "--features", tmp_path / "nope", "--out", tmp_path) == 2

    def test_config_file_with_override(self, synth_dir, tmp_path):
        config = {
            "features": str(synth_dir / "data"),
            "out": str(tmp_path / "from_config"),
            "loss": "CE",
            "epochs": 3,
            "lr": 0.05,
            "hyperparams": {"lambda_v": 0.2},
        }
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text(yaml.safe_dump(config))
        assert run_cli("train", "--config", cfg_path) == 0
        # flag overrides the config file value
        assert run_cli("train", "--config", cfg_path, "--out", tmp_path / "override") == 0
        assert (tmp_path / "override" / "snapshot.tesm").exists()

    def test_unknown_config_key_rejected(self, synth_dir, tmp_path):
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text(yaml.safe_dump({"features": str(synth_dir / "data"),
                                            "learning_rate_typo": 0.1}))
        assert run_cli("train", "--config", cfg_path) == 2


class TestEvalZeroshot:
    def test_eval_snapshot(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run_cli("train", "--features", synth_dir / "data", "--out", run_dir,
                       "--loss", "CE", "--epochs", "10", "--lr", "0.05") == 0
        code = run_cli("eval", "--snapshot", run_dir / "snapshot.tesm",
                       "--features", synth_dir / "data", "--out", tmp_path / "ev")
        assert code == 0
        assert (tmp_path / "ev" / "confusion.csv").exists()

    def test_zeroshot(self, synth_dir, capsys):
        code = run_cli("zeroshot", "--features", synth_dir / "data",
                       "--proxies", synth_dir / "proxies")
        assert code == 0
        top1 = float(capsys.readouterr().out.split()[1])
        assert top1 >= 0.9  # margin-6 clusters vs near-true proxies


class TestVerify:
    def test_fresh_run_all_bounds_hold(self, tmp_path, capsys):
        code = run_cli("verify", "--out", tmp_path / "v", "--seed", "1",
                       "--theorem2-draws", "50")
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "v" / "bounds.csv")))
        names = {r["name"] for r in rows}
        assert any(n.startswith("theorem1") for n in names)
        assert any(n.startswith("proposition1") for n in names)
        assert any(n.startswith("corollary1") for n in names)
        assert "theorem2" in names
        for r in rows:
            if r["applicable"] == "True" and r["asserted"] == "True":
                assert r["holds"] == "True"

    def test_trace_mode(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run_cli("train", "--features", synth_dir / "data", "--out", run_dir,
                       "--loss", "CE", "--epochs", "5", "--lr", "0.01",
                       "--momentum", "0", "--val-fraction", "0.2") == 0
        code = run_cli("verify", "--out", tmp_path / "v2", "--trace", run_dir / "trace.json",
                       "--features", synth_dir / "data")
        assert code == 0

    def test_corrupted_trace_is_format_failure(self, synth_dir, tmp_path):
        bad = tmp_path / "trace.json"
        bad.write_text("{not json")
        assert run_cli("verify", "--out", tmp_path / "v3", "--trace", bad,
                       "--features", synth_dir / "data") == 1

    def test_diverging_run_is_runtime_failure(self, synth_dir, tmp_path):
        # runaway weight decay overflows the parameters to non-finite values
        code = run_cli("train", "--features", synth_dir / "data", "--out", tmp_path / "nan",
                       "--loss", "CE", "--epochs", "15", "--lr", "1.0",
                       "--weight-decay", "1e30")
        assert code == 1


class TestGradcheckCmd:
    def test_passes_by_default(self, capsys):
        assert run_cli("gradcheck", "--points", "2") == 0
        out = capsys.readouterr().out
        # one row per loss kind and point
        assert out.count("\n") >= 7 * 2

    def test_detects_injected_sign_flip(self):
        from tesfit.pipeline import gradcheck_suite

        def corrupt(kind, group, grad):
            if kind == "CE" and group == "classifier":
                return -grad
            return grad

        rows = gradcheck_suite(points=2, corrupt=corrupt)
        bad = [r for kind, _, r in rows if kind == "CE"]
        assert any(r.max_rel_error > 1e-5 for r in bad)


class TestSubsampleCommands:
    def test_fewshot_transform(self, synth_dir, tmp_path):
        out_prefix = tmp_path / "few"
        code = run_cli("fewshot", "--input", synth_dir / "data", "--out", out_prefix,
                       "--fraction", "0.1", "--min-per-class", "10", "--seed", "1")
        assert code == 0
        ds = read_features(out_prefix)
        assert ds.class_counts().tolist() == [10, 10, 10]  # floor binds for 40 per class

    def test_longtail_transform(self, synth_dir, tmp_path):
        out_prefix = tmp_path / "tail"
        code = run_cli("longtail", "--input", synth_dir / "data", "--out", out_prefix,
                       "--ratio", "10", "--seed", "1")
        assert code == 0
        ds = read_features(out_prefix)
        assert ds.class_counts().tolist() == [40, 13, 4]


class TestGridCmd:
    def test_grid_outputs_and_best_reproduction(self, synth_dir, tmp_path):
        out = tmp_path / "grid"
        code = run_cli("grid", "--features", synth_dir / "data", "--out", out,
                       "--loss", "CE", "--epochs", "2", "--seed", "0")
        assert code == 0
        rows = list(csv.DictReader(open(out / "grid.csv")))
        assert len(rows) == 7  # LR grid only
        best = yaml.safe_load((out / "best.yaml").read_text())
        rerun_out = tmp_path / "rerun"
        code = run_cli("train", "--features", synth_dir / "data", "--out", rerun_out,
                       "--loss", "CE", "--epochs", "2", "--lr", str(best["lr"]),
                       "--seed", str(best["seed"]))
        assert code == 0
        best_row = max(rows, key=lambda r: (float(r["val_top1"]), -float(r["lr"])))
        metrics = (rerun_out / "metrics.csv").read_text().splitlines()[1]
        assert float(metrics.split(",")[0]) == pytest.approx(float(best_row["val_top1"]))

    def test_empty_validation_usage_error(self, synth_dir, tmp_path):
        code = run_cli("grid", "--features", synth_dir / "data", "--out", tmp_path / "g",
                       "--loss", "CE", "--epochs", "1", "--val-fraction", "0.001")
        assert code == 2
