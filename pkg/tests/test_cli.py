import json
import tempfile
import unittest
from pathlib import Path

from artifacts import read_csv_rows
from cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    cmd_build_kb,
    cmd_diagnose,
    cmd_eval,
    cmd_train,
    main,
)
from experiment_schema import assert_valid_experiment_config
from knowledge_base import load_snapshot


def build_small_config(output_dir, **overrides):
    raw = {
        "d_in": 8,
        "d": 4,
        "K": 3,
        "N_c": 4,
        "batch_size": 8,
        "epochs": 1,
        "synthetic": {"n_clusters": 4, "head_size": 6, "tail_size": 2, "n_tail": 1},
        "drift": {"steps": 3, "n_samples": 8},
        "bound_trials": 50,
        "obi_batch_size": 8,
        "output_dir": str(output_dir),
    }
    raw.update(overrides)
    return raw


def write_config(directory, raw):
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return str(path)


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


class BuildKBCommandTests(unittest.TestCase):
    def test_sidecar_counts_for_default_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config({"d_in": 8, "d": 4, "N_c": 16, "output_dir": tmp})
            snapshot = cmd_build_kb(config)
            sidecar = load_json(Path(tmp) / "kb_snapshot.json")
            fine, coarse = load_snapshot(snapshot)
        self.assertEqual(sidecar["N_k"], 275)
        self.assertEqual(sidecar["N_c"], 16)
        self.assertEqual(sidecar["d"], 4)
        self.assertEqual(sidecar["built_at"], 0)
        self.assertIsNone(sidecar["warning"])
        self.assertEqual((len(fine), len(coarse)), (275, 16))

    def test_prototype_count_is_clamped(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp, N_c=64))
            cmd_build_kb(config)
            sidecar = load_json(Path(tmp) / "kb_snapshot.json")
        self.assertEqual(sidecar["N_k"], 20)
        self.assertEqual(sidecar["N_c"], 20)
        self.assertIn("clamped", sidecar["warning"])

    def test_rebuild_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp))
            first = cmd_build_kb(config).read_bytes()
            second = cmd_build_kb(config).read_bytes()
        self.assertEqual(first, second)


class TrainCommandTests(unittest.TestCase):
    def test_one_epoch_writes_one_row(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = cmd_train(assert_valid_experiment_config(build_small_config(tmp)))
            rows = read_csv_rows(paths["metrics"])
            report = load_json(paths["report"])
            self.assertTrue(paths["weights"].exists())
        self.assertEqual(rows[0], ["epoch", "loss_total", "loss_t2a", "loss_a2t", "obi", "rdm", "refreshed"])
        self.assertEqual(len(rows), 2)
        self.assertEqual(len(report["epochs"]), 1)

    def test_training_drift_trace_has_one_block_per_epoch(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = cmd_train(assert_valid_experiment_config(build_small_config(tmp, epochs=2)))
            trace = read_csv_rows(paths["drift_trace"])
        self.assertEqual(trace[0], ["snapshot_epoch", "sample_id", "dim_0", "dim_1", "dim_2", "dim_3"])
        # snapshots at epochs 0..2 x 8 samples
        self.assertEqual(len(trace), 3 * 8 + 1)
        self.assertEqual(sorted({int(row[0]) for row in trace[1:]}), [0, 1, 2])
        first, last = trace[1], trace[-8]
        self.assertEqual(first[1], last[1])
        self.assertNotEqual(first[2:], last[2:])

    def test_rerun_gives_identical_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp, epochs=2))
            first = cmd_train(config)
            csv_first = first["metrics"].read_bytes()
            report_first = first["report"].read_bytes()
            second = cmd_train(config)
            self.assertEqual(second["metrics"].read_bytes(), csv_first)
            self.assertEqual(second["report"].read_bytes(), report_first)

    def test_obi_column_by_variant(self):
        columns = {}
        for variant in ("baseline", "ask"):
            with tempfile.TemporaryDirectory() as tmp:
                config = assert_valid_experiment_config(build_small_config(tmp, epochs=2, loss_variant=variant))
                rows = read_csv_rows(cmd_train(config)["metrics"])
            columns[variant] = [float(row[4]) for row in rows[1:]]
        self.assertEqual(columns["baseline"], [0.0, 0.0])
        self.assertTrue(all(value > 0 for value in columns["ask"]))


class EvalCommandTests(unittest.TestCase):
    def test_recall_table_has_six_keys(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp))
            weights = cmd_train(config)["weights"]
            table = cmd_eval(config, str(weights), "eval")
            written = load_json(Path(tmp) / "recall.json")
        self.assertEqual(table, written)
        self.assertEqual(
            sorted(table),
            sorted(f"{d}_R@{k}" for d in ("T2A", "A2T") for k in (1, 5, 10)),
        )
        for value in table.values():
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 100.0)
            self.assertEqual(value, round(value, 2))


class DiagnoseCommandTests(unittest.TestCase):
    def test_bound_trials_all_satisfied(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp, bound_trials=1000))
            payload = cmd_diagnose(config, "bound")
            written = load_json(Path(tmp) / "bound.json")
        self.assertEqual(payload, {"trials": 1000, "satisfied": 1000, "violations": 0})
        self.assertEqual(written, payload)

    def test_obi_per_variant(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp))
            reports = cmd_diagnose(config, "obi")
            written = load_json(Path(tmp) / "obi.json")
        self.assertEqual(written, reports)
        self.assertEqual(reports["baseline"]["mean"], 0.0)
        self.assertEqual(reports["baseline"]["loss_variant"], "baseline")
        self.assertGreater(reports["ask"]["mean"], 0.0)
        self.assertEqual(reports["ask"]["loss_variant"], "ask")
        self.assertEqual(len(reports["ask"]["per_entry_grad_norms"]), len(reports["ask"]["entry_ids"]))
        self.assertEqual(len(reports["ask"]["entry_ids"]), 8)

    def test_rdm_without_drift(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = assert_valid_experiment_config(build_small_config(tmp, drift={"steps": 3, "magnitude": 0.0, "n_samples": 8}))
            cmd_diagnose(config, "rdm")
            sweep = load_json(Path(tmp) / "rdm_sweep.json")
            trace = read_csv_rows(Path(tmp) / "drift_trace.csv")
        self.assertEqual([step["rdm_mean"] for step in sweep], [0.0, 0.0, 0.0])
        # 4 snapshots (steps 0..3) x 8 samples + header
        self.assertEqual(len(trace), 4 * 8 + 1)


class MainTests(unittest.TestCase):
    def test_train_exit_ok_and_config_echo(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, build_small_config(Path(tmp) / "ignored"))
            out = Path(tmp) / "run"
            code = main(["train", "--config", path, "--out", str(out), "--seed", "4", "--variant", "baseline"])
            echoed = load_json(out / "resolved_config.json")
            self.assertTrue((out / "train_report.json").exists())
            self.assertTrue((out / "metrics.csv").exists())
            self.assertTrue((out / "encoder_weights.bin").exists())
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(echoed["seed"], 4)
        self.assertEqual(echoed["loss_variant"], "baseline")
        self.assertEqual(echoed["output_dir"], str(out))
        self.assertEqual(assert_valid_experiment_config(echoed).K, 3)

    def test_unknown_config_key_is_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, build_small_config(tmp, momentum=0.9))
            self.assertEqual(main(["train", "--config", path]), EXIT_CONFIG)

    def test_missing_weights_is_runtime_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, build_small_config(tmp))
            code = main(["eval", "--config", path, "--weights", str(Path(tmp) / "missing.bin")])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_retrieval_budget_is_runtime_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, build_small_config(tmp, K=5))
            self.assertEqual(main(["train", "--config", path]), EXIT_RUNTIME)

    def test_build_kb_and_diagnose_bound(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, build_small_config(tmp))
            self.assertEqual(main(["build-kb", "--config", path]), EXIT_OK)
            self.assertEqual(main(["diagnose", "--config", path, "--mode", "bound"]), EXIT_OK)
            self.assertTrue((Path(tmp) / "kb_snapshot.bin").exists())
            self.assertTrue((Path(tmp) / "bound.json").exists())

    def test_selftest_passes(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["selftest", "--out", tmp, "--seed", "0"])
            report = load_json(Path(tmp) / "selftest.json")
        self.assertEqual(code, EXIT_OK, msg=report)
        self.assertTrue(report["passed"])
        self.assertEqual(len(report["checks"]), 9)


if __name__ == "__main__":
    unittest.main()
