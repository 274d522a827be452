import json
import os

import numpy as np

from qivreg.cli import main

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "qivreg", "configs")


def write_dataset(path, rng, n=80, p=15, noise=0.4, constant_col=None):
    X = rng.standard_normal((n, p))
    if constant_col is not None:
        X[:, constant_col] = 2.5
    beta = np.zeros(p)
    beta[:3] = [1.2, -0.8, 0.6]
    y = X @ beta + noise * rng.standard_normal(n)
    header = "y," + ",".join(f"x{j}" for j in range(1, p + 1))
    lines = [header] + [
        ",".join(repr(float(v)) for v in [yy, *xx]) for yy, xx in zip(y, X)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return X, y, beta


def read_bytes_excluding_manifest(outdir):
    blobs = {}
    for name in sorted(os.listdir(outdir)):
        if name == "manifest.json":
            continue
        with open(os.path.join(outdir, name), "rb") as fh:
            blobs[name] = fh.read()
    return blobs


def manifest_without_timestamps(outdir):
    with open(os.path.join(outdir, "manifest.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    doc.pop("timestamps")
    return doc


class TestSelect:
    def test_happy_path(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out = tmp_path / "out"
        assert main(["select", "--input", str(data), "--output-dir", str(out), "--seed", "3"]) == 0
        assert (out / "beta_full.csv").exists()
        assert (out / "selected_indices.csv").exists()
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["outputs"]) == {"beta_full.csv", "selected_indices.csv"}

    def test_fixed_lambda_flag(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out = tmp_path / "out"
        assert main(["select", "--input", str(data), "--output-dir", str(out), "--lambda", "5.0"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resolved_options"]["lambda_used"] == 5.0

    def test_constant_column_exit_code_no_outputs(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng, constant_col=4)
        out = tmp_path / "out"
        code = main(["select", "--input", str(data), "--output-dir", str(out)])
        assert code == 2
        assert not out.exists() or not os.listdir(out)

    def test_missing_file_io_code(self, tmp_path):
        code = main(["select", "--input", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path / "o")])
        assert code == 4

    def test_deterministic_outputs(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        for out in (out1, out2):
            assert main(["select", "--input", str(data), "--output-dir", str(out), "--seed", "9"]) == 0
        assert read_bytes_excluding_manifest(out1) == read_bytes_excluding_manifest(out2)
        assert manifest_without_timestamps(out1) == manifest_without_timestamps(out2)


class TestFit:
    def test_writes_fit_and_theta(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out = tmp_path / "out"
        assert main(["fit", "--input", str(data), "--output-dir", str(out), "--seed", "4"]) == 0
        doc = json.loads((out / "fit.json").read_text())
        assert {"standardization", "selection", "plan", "plm", "ls_theta_raw"} <= set(doc)
        theta_lines = (out / "theta.csv").read_text().strip().splitlines()
        assert theta_lines[0] == "index,theta,ci_lo,ci_hi"
        assert len(theta_lines) == len(doc["selection"]["selected"]) + 1

    def test_method_m2_records_rank_one(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out = tmp_path / "out"
        assert main(["fit", "--input", str(data), "--output-dir", str(out), "--method", "m2"]) == 0
        doc = json.loads((out / "fit.json").read_text())
        assert doc["plan"]["rank"] == 1
        assert doc["plan"]["method"] == "method2"

    def test_fixed_bandwidth_recorded(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        out = tmp_path / "out"
        assert main(["fit", "--input", str(data), "--output-dir", str(out), "--bandwidth", "0.5"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resolved_options"]["bandwidth_used"] == 0.5
        doc = json.loads((out / "fit.json").read_text())
        assert doc["gcv_used"] is False
        assert doc["bandwidth"] == 0.5


class TestPredict:
    def test_round_trip_on_training_data(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        X, y, _ = write_dataset(data, rng)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--input", str(data), "--output-dir", str(fit_out)]) == 0
        pred_out = tmp_path / "pred"
        assert main([
            "predict", "--fit", str(fit_out / "fit.json"),
            "--input", str(data), "--output-dir", str(pred_out),
        ]) == 0
        lines = (pred_out / "predictions.csv").read_text().strip().splitlines()
        assert lines[0] == "row_id,y_adjusted,y_working,y_ls"
        assert len(lines) == len(y) + 1
        # in-sample reproduction: adjusted - working equals centered g exactly,
        # so their training means agree
        vals = np.array([[float(c) for c in ln.split(",")[1:]] for ln in lines[1:]])
        assert abs(np.mean(vals[:, 0] - vals[:, 1])) < 1e-10
        pe = json.loads((pred_out / "prediction_error.json").read_text())
        assert set(pe) == {"pe_adjusted", "pe_working", "pe_ls"}

    def test_missing_columns_exit(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        write_dataset(data, rng)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--input", str(data), "--output-dir", str(fit_out)]) == 0
        short = tmp_path / "short.csv"
        header = "x1,x2,x3"
        rows = ["0.1,0.2,0.3", "0.4,0.5,0.6"]
        short.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
        code = main([
            "predict", "--fit", str(fit_out / "fit.json"),
            "--input", str(short), "--output-dir", str(tmp_path / "po"),
        ])
        assert code == 2

    def test_predictions_match_fit_in_sample_values(self, tmp_path, rng):
        data = tmp_path / "d.csv"
        X, y, _ = write_dataset(data, rng)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--input", str(data), "--output-dir", str(fit_out), "--bandwidth", "0.9"]) == 0
        pred_out = tmp_path / "pred"
        assert main([
            "predict", "--fit", str(fit_out / "fit.json"),
            "--input", str(data), "--output-dir", str(pred_out),
        ]) == 0
        from qivreg.estimator import QuasiIVRegressor

        model = QuasiIVRegressor(bandwidth=0.9).fit(X, y)
        lines = (pred_out / "predictions.csv").read_text().strip().splitlines()[1:]
        got = np.array([float(ln.split(",")[1]) for ln in lines])
        expect = model.predict(X, mode="adjusted")
        assert np.max(np.abs(got - expect)) < 1e-10


class TestSimulate:
    def test_bundled_config_runs_within_budget(self, tmp_path):
        import time

        out = tmp_path / "sim"
        cfg = os.path.join(CONFIG_DIR, "experiment1_typeI.json")
        start = time.time()
        assert main([
            "simulate", "--config", cfg, "--output-dir", str(out),
            "--reps", "10", "--plot",
        ]) == 0
        assert time.time() - start < 60
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "estimator,predictor,mse,std_mse,pe,std_pe,reps_ok,reps_failed"
        assert (out / "plot.svg").read_text().startswith("<svg")
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["n"] == 50
        assert report["reps"] == 10
        assert len(report["replications"]) == 10

    def test_thread_count_does_not_change_bytes(self, tmp_path):
        cfg = os.path.join(CONFIG_DIR, "experiment4_sparse.json")
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", cfg, "--output-dir", str(out1), "--reps", "4", "--threads", "1"]) == 0
        assert main(["simulate", "--config", cfg, "--output-dir", str(out2), "--reps", "4", "--threads", "3"]) == 0
        assert read_bytes_excluding_manifest(out1) == read_bytes_excluding_manifest(out2)

    def test_env_thread_override(self, tmp_path, monkeypatch):
        cfg = os.path.join(CONFIG_DIR, "experiment4_sparse.json")
        out = tmp_path / "env"
        monkeypatch.setenv("QIV_THREADS", "2")
        assert main(["simulate", "--config", cfg, "--output-dir", str(out), "--reps", "2"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resolved_options"]["threads"] == 2

    def test_malformed_config_lists_field(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "n": 50, "p": 100, "rho": "high",
            "beta": {"type_id": "I", "sparse": False, "seed": 1},
            "reps": 2, "seed": 1, "r2": 0.9,
        }), encoding="utf-8")
        code = main(["simulate", "--config", str(bad), "--output-dir", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "rho" in err

    def test_both_noise_specs_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "n": 50, "p": 100, "rho": 0.1,
            "beta": {"type_id": "I", "sparse": False, "seed": 1},
            "reps": 2, "seed": 1, "r2": 0.9, "sigma": 0.2,
        }), encoding="utf-8")
        assert main(["simulate", "--config", str(bad), "--output-dir", str(tmp_path / "o")]) == 2
