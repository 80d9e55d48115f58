import json
import os

import pytest

from tieredquad.cli import main

TINY_CONFIG = """
seed = 0

[generator]
n_patients = 8
lesions_per_patient = [12, 20]
ud_fraction = 0.2
feature_dim = 3
center_spread = 2.0
noise = 0.3
ud_offset = [1.0, 1.9]

[embedder]
hidden_dims = [8, 8]
embedding_dim = 4

[sampler]
patients_per_batch = 2
samples_per_patient = 6

[stage1]
epochs = 2
batches_per_epoch = 5

[stage2]
epochs = 5

[experiment]
modes = ["baseline", "dmt_quad"]
seeds = [0, 1]
fractions = [0.5, 0.25, 0.25]
oversample_factor = 5
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "config.toml"
    cfg.write_text(TINY_CONFIG)
    return tmp_path


def run(args):
    return main([str(a) for a in args])


def only_run_dir(root, command):
    matches = [d for d in os.listdir(root) if d.startswith(command + "-")]
    assert len(matches) == 1
    return os.path.join(root, matches[0])


class TestGenerate:
    def test_writes_dataset_and_inspection(self, workdir, capsys):
        out = workdir / "runs"
        data = workdir / "cohort.jsonl"
        code = run(["generate", "--config", workdir / "config.toml",
                    "--out", out, "--dataset", data])
        assert code == 0
        assert data.exists()
        printed = capsys.readouterr().out
        assert "patients: 8" in printed
        assert "normal:ud ratio" in printed
        run_dir = only_run_dir(out, "generate")
        assert os.path.exists(os.path.join(run_dir, "config.json"))
        assert os.path.exists(os.path.join(run_dir, "inspection.json"))

    def test_same_seed_gives_identical_files(self, workdir):
        a, b = workdir / "a.jsonl", workdir / "b.jsonl"
        for path in (a, b):
            assert run(["generate", "--config", workdir / "config.toml",
                        "--seed", 1, "--out", workdir / "runs",
                        "--dataset", path]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_default_scale_patient_count(self, tmp_path):
        # default generator config targets the clinical cohort shape
        data = tmp_path / "full.jsonl"
        assert run(["generate", "--out", tmp_path / "runs",
                    "--dataset", data]) == 0
        patients = {json.loads(line)["patient_id"]
                    for line in data.read_text().splitlines()}
        assert len(patients) == 37


class TestConfigErrors:
    def test_invalid_fraction_exits_2(self, workdir, capsys):
        bad = workdir / "bad.toml"
        bad.write_text(TINY_CONFIG.replace(
            "fractions = [0.5, 0.25, 0.25]", "fractions = [0.9, 0.2, 0.2]"))
        assert run(["generate", "--config", bad,
                    "--out", workdir / "runs"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, workdir):
        bad = workdir / "bad.toml"
        bad.write_text("unknown_key = 3\n")
        assert run(["generate", "--config", bad,
                    "--out", workdir / "runs"]) == 2

    def test_missing_dataset_exits_3(self, workdir):
        assert run(["train", "--config", workdir / "config.toml",
                    "--out", workdir / "runs",
                    "--dataset", workdir / "nope.jsonl"]) == 3


@pytest.fixture
def trained(workdir):
    data = workdir / "cohort.jsonl"
    out = workdir / "runs"
    assert run(["generate", "--config", workdir / "config.toml",
                "--dataset", data, "--out", out]) == 0
    assert run(["train", "--config", workdir / "config.toml",
                "--dataset", data, "--out", out, "--mode", "dmt_quad"]) == 0
    run_dir = only_run_dir(out, "train")
    return workdir, data, out, os.path.join(run_dir, "checkpoint.json")


class TestTrain:
    def test_writes_checkpoint_and_epoch_logs(self, trained):
        workdir, _, out, checkpoint = trained
        run_dir = os.path.dirname(checkpoint)
        assert os.path.exists(checkpoint)
        log_lines = open(os.path.join(run_dir, "stage1_log.jsonl")).readlines()
        assert len(log_lines) >= 2  # one record per epoch
        rec = json.loads(log_lines[0])
        assert {"epoch", "mean_loss", "counters",
                "alpha_by_patient"} <= set(rec)
        assert os.path.exists(os.path.join(run_dir, "stage2_log.jsonl"))

    def test_resume_continues_epoch_counter(self, trained, workdir):
        _, data, out, checkpoint = trained
        resumed_cfg = workdir / "resumed.toml"
        resumed_cfg.write_text(TINY_CONFIG.replace("epochs = 2", "epochs = 4"))
        out2 = workdir / "runs2"
        assert run(["train", "--config", resumed_cfg, "--dataset", data,
                    "--out", out2, "--mode", "dmt_quad",
                    "--checkpoint", checkpoint]) == 0
        run_dir = only_run_dir(out2, "train")
        records = [json.loads(line) for line in
                   open(os.path.join(run_dir, "stage1_log.jsonl"))]
        assert [r["epoch"] for r in records] == [2, 3]
        extra = json.load(open(os.path.join(run_dir, "checkpoint.json")))
        assert extra["extra"]["epochs_done"] == 4

    def test_baseline_skips_stage1_artifacts(self, workdir):
        data = workdir / "cohort.jsonl"
        out = workdir / "runs-base"
        assert run(["generate", "--config", workdir / "config.toml",
                    "--dataset", data, "--out", workdir / "runs-gen"]) == 0
        assert run(["train", "--config", workdir / "config.toml",
                    "--dataset", data, "--out", out,
                    "--mode", "baseline"]) == 0
        run_dir = only_run_dir(out, "train")
        assert not os.path.exists(os.path.join(run_dir, "stage1_log.jsonl"))
        assert os.path.exists(os.path.join(run_dir, "stage2_log.jsonl"))


class TestEvaluate:
    def test_metrics_schema(self, trained, capsys):
        workdir, data, out, checkpoint = trained
        assert run(["evaluate", "--config", workdir / "config.toml",
                    "--dataset", data, "--out", out,
                    "--checkpoint", checkpoint, "--split", "test"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["split"] == "test"
        assert doc["n_samples"] > 0
        metric_keys = {"specificity", "sensitivity", "recall", "precision",
                       "f1", "auc", "accuracy", "degenerate", "confusion"}
        assert metric_keys <= set(doc["metrics"])
        for key in ("specificity", "sensitivity", "accuracy"):
            assert 0.0 <= doc["metrics"][key] <= 1.0

    def test_missing_checkpoint_exits_3(self, workdir):
        assert run(["evaluate", "--config", workdir / "config.toml",
                    "--out", workdir / "runs",
                    "--checkpoint", workdir / "missing.json"]) == 3


class TestCompare:
    def test_table_shape_and_rerun_identical(self, workdir, capsys):
        out = workdir / "runs"
        assert run(["compare", "--config", workdir / "config.toml",
                    "--out", out]) == 0
        run_dir = only_run_dir(out, "compare")
        table = open(os.path.join(run_dir, "compare.txt")).read()
        header = table.splitlines()[0].split()
        assert header == ["Method", "Specificity", "Sensitivity", "Recall",
                          "Precision", "F1-score", "AUC", "Accuracy"]
        body = [line for line in table.splitlines()[2:] if line]
        assert len(body) == 2  # two modes
        doc = json.load(open(os.path.join(run_dir, "compare.json")))
        assert set(doc) == {"baseline", "dmt_quad"}

        first = open(os.path.join(run_dir, "compare.txt"), "rb").read()
        first_json = open(os.path.join(run_dir, "compare.json"), "rb").read()
        assert run(["compare", "--config", workdir / "config.toml",
                    "--out", out]) == 0
        assert open(os.path.join(run_dir, "compare.txt"), "rb").read() == first
        assert open(os.path.join(run_dir, "compare.json"), "rb").read() == \
            first_json


class TestExportEmbeddings:
    def test_row_count(self, trained):
        workdir, data, out, checkpoint = trained
        assert run(["export-embeddings", "--config", workdir / "config.toml",
                    "--dataset", data, "--out", out,
                    "--checkpoint", checkpoint]) == 0
        run_dir = only_run_dir(out, "export-embeddings")
        rows = open(os.path.join(run_dir, "embeddings.csv")).readlines()
        n_samples = len(open(data).readlines())
        assert len(rows) == n_samples + 1


class TestGradcheck:
    def test_passes_by_default(self, workdir, capsys):
        assert run(["gradcheck", "--out", workdir / "runs"]) == 0
        printed = capsys.readouterr().out
        assert "PASS" in printed
        run_dir = only_run_dir(workdir / "runs", "gradcheck")
        doc = json.load(open(os.path.join(run_dir, "gradcheck.json")))
        assert doc["passed"] is True
        assert all(r["max_rel_error"] < doc["tolerance"]
                   for r in doc["results"])

    def test_corrupted_gradient_fails(self, workdir, capsys):
        assert run(["gradcheck", "--out", workdir / "runs",
                    "--corrupt"]) == 1
        printed = capsys.readouterr().out
        assert "FAIL" in printed

    def test_report_names_worst_layer_and_index(self, workdir, capsys):
        assert run(["gradcheck", "--out", workdir / "runs"]) == 0
        printed = capsys.readouterr().out
        assert "layer" in printed and "index" in printed
