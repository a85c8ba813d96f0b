import json
import subprocess
import sys

import pytest

from ldsim.cli import main
from ldsim.synthetic import generate_irt_benchmark, write_benchmark


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bench = generate_irt_benchmark(n_students=20, n_steps=14, n_questions=10, n_concepts=6, n_edges=5, seed=11)
    write_benchmark(bench, root / "data")
    config = {
        "dataset": {"path": str(root / "data" / "responses.csv"), "concepts": str(root / "data" / "concepts.csv")},
        "gateway": {"oracle": str(root / "data" / "prerequisites.json")},
        "distill": {"n_pseudo": 2, "every": 5},
        "train": {"d": 16, "levels": 4, "stage1_epochs": 2, "stage2_epochs": 3},
        "evaluate": {"n": 5},
    }
    (root / "config.json").write_text(json.dumps(config))
    return root


def run(workspace, out, *argv):
    return main([*argv, "--config", str(workspace / "config.json"), "--output-dir", str(out)])


PIPELINE = [["ingest"], ["stats"], ["distill-graph"], ["distill-mastery"], ["train"],
            ["evaluate", "--mode", "single"], ["evaluate", "--mode", "multi"]]


@pytest.fixture(scope="module")
def pipeline_out(workspace):
    out = workspace / "run1"
    for argv in PIPELINE:
        assert run(workspace, out, *argv) == 0, argv
    return out


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 0.01, "momentum": 0.9}}))
    assert main(["stats", "--config", str(tmp_path / "c.json")]) == 2
    assert "train.momentum" in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"evaluate": {"mode": "sideways"}}))
    assert main(["stats", "--config", str(tmp_path / "c.json")]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path / "empty"), "--stage", "2"]) == 1


def test_pipeline_artifacts(pipeline_out):
    for name in ("splits/train.json", "splits/val.json", "splits/test.json", "stats.json", "graph.json",
                 "distilled_train.jsonl", "distilled_val.jsonl", "model.pt", "train_report.json",
                 "eval_single.json", "eval_multi.json", "manifest.json"):
        assert (pipeline_out / name).exists(), name
    single = json.loads((pipeline_out / "eval_single.json").read_text())
    assert single["mode"] == "single-step" and 0 <= single["acc"] <= 1


def test_manifest_records_runs(pipeline_out):
    manifest = json.loads((pipeline_out / "manifest.json").read_text())
    assert set(manifest["runs"]) >= {"ingest", "distill-graph", "train", "evaluate"}
    entry = manifest["runs"]["train"]
    assert len(entry["config_hash"]) == 64
    assert entry["seeds"] and entry["code_version"]
    assert any(k.endswith("config.json") for k in entry["inputs"])


def test_rerun_is_byte_identical(workspace, pipeline_out):
    out = workspace / "run2"
    for argv in PIPELINE:
        assert run(workspace, out, *argv) == 0
    for name in ("graph.json", "distilled_train.jsonl", "eval_single.json", "eval_multi.json"):
        assert (out / name).read_bytes() == (pipeline_out / name).read_bytes(), name


def test_warm_cache_graph(workspace, pipeline_out, capsys):
    assert run(workspace, pipeline_out, "distill-graph") == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["backend_calls"] == 0


def test_simulate(workspace, pipeline_out, capsys):
    student = json.loads((pipeline_out / "splits/test.json").read_text())["histories"][0]["student"]
    assert run(workspace, pipeline_out, "simulate", "--student", student) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["student"] == student and len(doc["predicted"]) == 5


def test_serve_env_subprocess(workspace, pipeline_out):
    student = json.loads((pipeline_out / "splits/test.json").read_text())["histories"][0]
    q = student["records"][0][0]
    requests = [{"op": "reset", "student": student["student"], "prefix": 3},
                {"op": "step", "question": q}, {"op": "close"}]
    proc = subprocess.run(
        [sys.executable, "-m", "ldsim", "serve-env", "--stdio", "--config", str(workspace / "config.json"),
         "--output-dir", str(pipeline_out)],
        input="".join(json.dumps(r) + "\n" for r in requests), capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    replies = [json.loads(x) for x in proc.stdout.splitlines()]
    assert replies[0] == {"step": 0, "history_length": 3}
    assert replies[1]["step"] == 1 and replies[1]["r_hat"] in (0, 1) and 0 < replies[1]["p"] < 1
