"""Ingestion, preprocessing transforms, and the command line workflows."""

import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from lgssmix.cli import (
    NonPositiveForLog,
    ParseError,
    ingest,
    main,
    parse_transforms,
    preprocess,
)
from lgssmix.model import TimeSeriesSample, TooShort, load_model
from lgssmix.simulate import sample_series

from helpers import rand_params


def write_json_dataset(path, series):
    obj = {"series": [{"id": sid, "t": list(t), "y": [list(row) for row in y]} for sid, t, y in series]}
    path.write_text(json.dumps(obj))
    return path


def write_csv_dataset(path, rows, n):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "t"] + [f"y_{j + 1}" for j in range(n)])
        writer.writerows(rows)
    return path


def two_cluster_json(path, seed=0, per_cluster=4, T=12):
    """Tiny two-regime d=n=1 dataset with labels, written as dataset JSON."""
    rng = np.random.default_rng(seed)
    lo = rand_params(rng, 1, 1)
    hi = replace(lo, mu=lo.mu + 25.0)
    series, labels = [], []
    t = np.linspace(0.0, 3.0, T)
    for i in range(per_cluster):
        s = sample_series(lo, t, seed=1000 + i, series_id=f"lo{i}")
        series.append((s.id, s.timestamps, s.observations))
        labels.append(0)
    for i in range(per_cluster):
        s = sample_series(hi, t, seed=2000 + i, series_id=f"hi{i}")
        series.append((s.id, s.timestamps, s.observations))
        labels.append(1)
    write_json_dataset(path, series)
    return labels


def sample(sid, t, y):
    return TimeSeriesSample(sid, np.asarray(t, float), np.asarray(y, float))


class TestIngestJson:
    def test_round_trip_two_series(self, tmp_path):
        p = write_json_dataset(
            tmp_path / "d.json",
            [("a", [0.0, 1.0], [[1.0], [2.0]]), ("b", [0.0, 0.5, 1.5], [[0.0], [1.0], [2.0]])],
        )
        ds = ingest(p, "json")
        assert [s.id for s in ds] == ["a", "b"]
        assert ds[1].observations.shape == (3, 1)

    def test_timestamps_shifted_to_zero(self, tmp_path):
        p = write_json_dataset(tmp_path / "d.json", [("a", [5.0, 7.0, 9.0], [[1.0], [2.0], [3.0]])])
        ds = ingest(p, "json")
        np.testing.assert_array_equal(ds[0].timestamps, [0.0, 2.0, 4.0])

    def test_duplicate_id_rejected(self, tmp_path):
        p = write_json_dataset(
            tmp_path / "d.json", [("a", [0, 1], [[1], [2]]), ("a", [0, 1], [[1], [2]])]
        )
        with pytest.raises(ParseError, match="duplicate series id"):
            ingest(p, "json")

    def test_malformed_json_reports_line(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text('{"series": [\n  {"id" }\n]}')
        with pytest.raises(ParseError, match="line 2"):
            ingest(p, "json")

    def test_missing_fields(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text('{"series": [{"id": "a", "t": [0, 1]}]}')
        with pytest.raises(ParseError, match="'id', 't' and 'y'"):
            ingest(p, "json")

    def test_unknown_format(self, tmp_path):
        p = write_json_dataset(tmp_path / "d.json", [("a", [0, 1], [[1], [2]])])
        with pytest.raises(ParseError, match="unknown format"):
            ingest(p, "parquet")


class TestIngestCsv:
    def test_interleaved_series_grouped(self, tmp_path):
        rows = [
            ["a", 0.0, 1.0, 0.0],
            ["b", 0.0, 5.0, 1.0],
            ["a", 1.0, 2.0, 0.5],
            ["b", 2.0, 6.0, 1.5],
        ]
        ds = ingest(write_csv_dataset(tmp_path / "d.csv", rows, 2), "csv-long")
        assert [s.id for s in ds] == ["a", "b"]
        np.testing.assert_array_equal(ds[0].observations, [[1.0, 0.0], [2.0, 0.5]])
        np.testing.assert_array_equal(ds[1].timestamps, [0.0, 2.0])

    def test_out_of_order_rows_error(self, tmp_path):
        rows = [["a", 1.0, 1.0], ["a", 0.5, 2.0], ["a", 2.0, 3.0]]
        with pytest.raises(ParseError, match="line 3.*out-of-order"):
            ingest(write_csv_dataset(tmp_path / "d.csv", rows, 1), "csv-long")

    def test_duplicate_timestamp_error(self, tmp_path):
        rows = [["a", 1.0, 1.0], ["a", 1.0, 2.0]]
        with pytest.raises(ParseError, match="line 3.*duplicate"):
            ingest(write_csv_dataset(tmp_path / "d.csv", rows, 1), "csv-long")

    def test_header_checked(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,t,y_1\na,0,1\na,1,2\n")
        with pytest.raises(ParseError, match="header"):
            ingest(p, "csv-long")

    def test_feature_columns_checked(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,t,y_1,y_3\na,0,1,1\na,1,2,2\n")
        with pytest.raises(ParseError, match="y_1..y_2"):
            ingest(p, "csv-long")

    def test_ragged_row_error(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,t,y_1\na,0,1\na,1\n")
        with pytest.raises(ParseError, match="line 3.*columns"):
            ingest(p, "csv-long")

    def test_timestamps_shifted_per_series(self, tmp_path):
        rows = [["a", 3.0, 1.0], ["a", 4.0, 2.0]]
        ds = ingest(write_csv_dataset(tmp_path / "d.csv", rows, 1), "csv-long")
        np.testing.assert_array_equal(ds[0].timestamps, [0.0, 1.0])


class TestTransforms:
    def test_log_then_minmax(self):
        ds = [sample("a", [0, 1, 2], [[100.0], [1000.0], [10000.0]])]
        out = preprocess(ds, parse_transforms(["log", "minmax-per-series"]))
        np.testing.assert_allclose(out[0].observations[:, 0], [0.0, 0.5, 1.0], atol=1e-12)

    def test_log_requires_positive(self):
        ds = [sample("a", [0, 1], [[1.0], [0.0]])]
        with pytest.raises(NonPositiveForLog, match="'a' sample 1"):
            preprocess(ds, parse_transforms(["log"]))

    def test_diff_drops_first_sample(self):
        ds = [sample("a", [0.0, 1.0, 3.0], [[0.0], [3.0], [10.0]])]
        out = preprocess(ds, parse_transforms(["diff"]))
        np.testing.assert_array_equal(out[0].observations[:, 0], [3.0, 7.0])
        np.testing.assert_array_equal(out[0].timestamps, [0.0, 2.0])

    def test_diff_too_short(self):
        ds = [sample("a", [0.0, 1.0], [[0.0], [3.0]])]
        with pytest.raises(TooShort):
            preprocess(ds, parse_transforms(["diff"]))

    def test_affine_likert(self):
        ds = [sample("a", range(5), [[v] for v in (1.0, 2.0, 3.0, 4.0, 5.0)])]
        out = preprocess(ds, parse_transforms(["affine(0.25,-0.25)"]))
        np.testing.assert_allclose(out[0].observations[:, 0], [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_global_max_scale_per_feature(self):
        ds = [
            sample("a", [0, 1], [[1.0, -8.0], [2.0, 4.0]]),
            sample("b", [0, 1], [[-10.0, 1.0], [5.0, 2.0]]),
        ]
        out = preprocess(ds, parse_transforms(["global-max-scale"]))
        np.testing.assert_allclose(out[0].observations, [[0.1, -1.0], [0.2, 0.5]])
        np.testing.assert_allclose(out[1].observations, [[-1.0, 0.125], [0.5, 0.25]])

    def test_minmax_constant_feature_maps_to_zero(self):
        ds = [sample("a", [0, 1, 2], [[7.0], [7.0], [7.0]])]
        out = preprocess(ds, parse_transforms(["minmax-per-series"]))
        np.testing.assert_array_equal(out[0].observations[:, 0], [0.0, 0.0, 0.0])

    def test_rescale_time_terminal(self):
        ds = [sample("a", [0.0, 2.0, 8.0], [[1.0], [2.0], [3.0]])]
        out = preprocess(ds, parse_transforms(["rescale-time-unit"]))
        np.testing.assert_allclose(out[0].timestamps, [0.0, 0.25, 1.0])

    def test_rescale_time_constant(self):
        ds = [sample("a", [0.0, 2.0, 8.0], [[1.0], [2.0], [3.0]])]
        out = preprocess(ds, parse_transforms(["rescale-time-unit(4)"]))
        np.testing.assert_allclose(out[0].timestamps, [0.0, 0.5, 2.0])

    def test_order_matters(self):
        ds = [sample("a", [0, 1], [[1.0], [3.0]])]
        first = preprocess(ds, parse_transforms(["affine(2,0)", "minmax-per-series"]))
        second = preprocess(ds, parse_transforms(["minmax-per-series", "affine(2,0)"]))
        np.testing.assert_allclose(first[0].observations[:, 0], [0.0, 1.0])
        np.testing.assert_allclose(second[0].observations[:, 0], [0.0, 2.0])

    def test_unknown_transform(self):
        with pytest.raises(ParseError, match="unknown transform"):
            parse_transforms(["boxcox"])

    def test_bad_affine_arguments(self):
        with pytest.raises(ParseError, match="affine"):
            parse_transforms(["affine(a,b)"])

    def test_nonpositive_time_unit(self):
        with pytest.raises(ParseError, match="positive"):
            parse_transforms(["rescale-time-unit(0)"])


class TestSimulateCommand:
    def test_artifacts(self, tmp_path):
        out = tmp_path / "bench"
        assert main(["simulate", "--seed", "3", "--out", str(out)]) == 0
        ds = ingest(out / "dataset.json", "json")
        assert len(ds) == 120
        with open(out / "labels.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["series_id", "label"]
        counts = np.bincount([int(r[1]) for r in rows[1:]])
        np.testing.assert_array_equal(counts, [40, 50, 30])
        truth = load_model(out / "truth.json")
        assert (truth.M, truth.d, truth.n) == (3, 5, 2)


class TestFitCommand:
    def test_artifacts_and_exit_code(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data)
        out = tmp_path / "run"
        rc = main(
            ["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
             "--seed", "0", "--out", str(out), "--trajectories"]
        )
        assert rc == 0
        model = load_model(out / "model.json")
        assert (model.M, model.d, model.n) == (2, 1, 1)

        with open(out / "assignments.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["series_id", "cluster", "resp_0", "resp_1"]
        ids = [r[0] for r in rows[1:]]
        assert ids == [f"lo{i}" for i in range(4)] + [f"hi{i}" for i in range(4)]
        resp = np.array([[float(r[2]), float(r[3])] for r in rows[1:]])
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-9)

        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] is True
        assert summary["n_series"] == 8
        assert summary["wall_time_s"] > 0

        with open(out / "trace.csv") as fh:
            trace_rows = list(csv.reader(fh))
        assert trace_rows[0] == ["iter", "loglik", "param_delta", "warnings"]
        assert len(trace_rows) - 1 == summary["iterations"]

        with open(out / "trajectories.csv") as fh:
            traj_rows = list(csv.reader(fh))
        assert traj_rows[0] == ["cluster", "t", "y_1"]
        assert len(traj_rows) - 1 == 2 * 200

    def test_separates_two_regimes(self, tmp_path):
        data = tmp_path / "d.json"
        labels = two_cluster_json(data)
        out = tmp_path / "run"
        assert main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                     "--out", str(out)]) == 0
        with open(out / "assignments.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        got = [int(r[1]) for r in rows]
        assert len({(lab, g) for lab, g in zip(labels, got)}) == 2

    def test_fixed_blocks_survive(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data)
        out = tmp_path / "run"
        assert main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                     "--fix", "Sigma,P", "--out", str(out)]) == 0
        model = load_model(out / "model.json")
        for c in model.clusters:
            np.testing.assert_array_equal(c.Sigma, [[0.1]])
            np.testing.assert_array_equal(c.P, [[0.1]])

    def test_thread_count_does_not_change_model_json(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data, per_cluster=9)
        outs = []
        for threads in (1, 8):
            out = tmp_path / f"run{threads}"
            assert main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                         "--seed", "7", "--threads", str(threads), "--out", str(out)]) == 0
            outs.append((out / "model.json").read_bytes())
        assert outs[0] == outs[1]

    def test_csv_input(self, tmp_path):
        rows = []
        for i in range(3):
            for k in range(6):
                rows.append([f"s{i}", float(k), float(i * 10 + k), float(k % 2)])
        data = write_csv_dataset(tmp_path / "d.csv", rows, 2)
        out = tmp_path / "run"
        assert main(["fit", "--data", str(data), "--format", "csv-long", "--clusters", "1",
                     "--latent-dim", "1", "--out", str(out)]) == 0
        assert (out / "model.json").exists()

    def test_range_rejected_for_fit(self, tmp_path, capsys):
        data = tmp_path / "d.json"
        two_cluster_json(data)
        rc = main(["fit", "--data", str(data), "--clusters", "2..3", "--latent-dim", "1",
                   "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "single value" in capsys.readouterr().err

    def test_bad_fix_name(self, tmp_path, capsys):
        data = tmp_path / "d.json"
        two_cluster_json(data)
        rc = main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                   "--fix", "Q", "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "fixed parameter" in capsys.readouterr().err

    def test_failure_cleans_partial_artifacts(self, tmp_path, monkeypatch):
        import lgssmix.cli as cli_mod

        data = tmp_path / "d.json"
        two_cluster_json(data)
        out = tmp_path / "run"

        def boom(path, trace):
            with open(path, "w") as fh:
                fh.write("partial")
            raise OSError("disk full")

        monkeypatch.setattr(cli_mod, "_write_trace_csv", boom)
        rc = main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                   "--out", str(out)])
        assert rc == 1
        assert not (out / "model.json").exists()
        assert not (out / "assignments.csv").exists()
        assert not (out / "trace.csv").exists()

    def test_missing_data_file(self, tmp_path, capsys):
        rc = main(["fit", "--data", str(tmp_path / "nope.json"), "--clusters", "2",
                   "--latent-dim", "1", "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestSelectCommand:
    def test_single_cell_grid(self, tmp_path):
        data = tmp_path / "d.json"
        labels = two_cluster_json(data)
        labels_path = tmp_path / "labels.csv"
        with open(labels_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["series_id", "label"])
            for i, lab in enumerate(labels):
                sid = f"lo{i}" if lab == 0 else f"hi{i - 4}"
                writer.writerow([sid, lab])
        out = tmp_path / "sel"
        rc = main(["select", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                   "--repeats", "2", "--labels", str(labels_path), "--out", str(out)])
        assert rc == 0
        with open(out / "grid.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["M", "d", "repeat", "seed", "abic", "loglik", "similarity", "converged"]
        assert len(rows) - 1 == 2
        assert all(float(r[6]) == 1.0 for r in rows[1:])
        best = json.loads((out / "best.json").read_text())
        assert (best["M"], best["d"], best["n_ok"]) == (2, 1, 2)

    def test_range_grid_prefers_two_clusters(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data, per_cluster=6)
        out = tmp_path / "sel"
        rc = main(["select", "--data", str(data), "--clusters", "1..2", "--latent-dim", "1",
                   "--out", str(out)])
        assert rc == 0
        best = json.loads((out / "best.json").read_text())
        assert best["M"] == 2

    def test_all_cells_failed(self, tmp_path, capsys):
        data = tmp_path / "d.json"
        two_cluster_json(data, per_cluster=2)  # 4 series
        out = tmp_path / "sel"
        rc = main(["select", "--data", str(data), "--clusters", "6", "--latent-dim", "1",
                   "--init", "kmeans", "--out", str(out)])
        assert rc == 2
        assert (out / "grid.csv").exists()
        assert not (out / "best.json").exists()
        with open(out / "grid.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[1][4] == ""  # abic empty on the failed row
        assert "failed" in capsys.readouterr().err


class TestEvaluateCommand:
    def _write(self, path, header, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    def test_similarity_json(self, tmp_path, capsys):
        labels = self._write(tmp_path / "labels.csv", ["series_id", "label"],
                             [["a", 0], ["b", 0], ["c", 1], ["d", 1]])
        assigns = self._write(tmp_path / "assignments.csv", ["series_id", "cluster", "resp_0"],
                              [["a", 1, 1.0], ["b", 1, 1.0], ["c", 0, 1.0], ["d", 1, 1.0]])
        rc = main(["evaluate", "--labels", str(labels), "--assignments", str(assigns),
                   "--out", str(tmp_path / "eval")])
        assert rc == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["similarity"] == 0.75
        saved = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
        assert saved == printed
        conf = np.array(printed["confusion"])
        assert conf.sum() == 4

    def test_id_mismatch(self, tmp_path, capsys):
        labels = self._write(tmp_path / "labels.csv", ["series_id", "label"], [["a", 0]])
        assigns = self._write(tmp_path / "assignments.csv", ["series_id", "cluster"],
                              [["a", 0], ["b", 1]])
        rc = main(["evaluate", "--labels", str(labels), "--assignments", str(assigns)])
        assert rc == 1
        assert "no label for series 'b'" in capsys.readouterr().err


class TestPredictCommand:
    def test_default_horizon(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data)
        fit_out = tmp_path / "run"
        assert main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                     "--out", str(fit_out)]) == 0
        pred_out = tmp_path / "pred"
        assert main(["predict", "--model", str(fit_out / "model.json"),
                     "--out", str(pred_out)]) == 0
        with open(pred_out / "trajectories.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) - 1 == 2 * 200
        ts = [float(r[1]) for r in rows[1:201]]
        assert ts[0] == 0.0
        assert ts[-1] == 1.0

    def test_data_sets_horizon(self, tmp_path):
        data = tmp_path / "d.json"
        two_cluster_json(data)  # timestamps run 0..3
        fit_out = tmp_path / "run"
        assert main(["fit", "--data", str(data), "--clusters", "2", "--latent-dim", "1",
                     "--out", str(fit_out)]) == 0
        pred_out = tmp_path / "pred"
        assert main(["predict", "--model", str(fit_out / "model.json"), "--data", str(data),
                     "--out", str(pred_out)]) == 0
        with open(pred_out / "trajectories.csv") as fh:
            rows = list(csv.reader(fh))
        assert float(rows[200][1]) == 3.0


def test_module_entry_point(tmp_path):
    out = tmp_path / "bench"
    proc = subprocess.run(
        [sys.executable, "-m", "lgssmix", "simulate", "--seed", "0", "--out", str(out)],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "dataset.json").exists()
