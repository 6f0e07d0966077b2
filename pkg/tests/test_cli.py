import json
import subprocess
import sys

import pytest

CLI = [sys.executable, "-m", "echochamber"]


def run_cli(*argv, check=True):
    proc = subprocess.run(
        CLI + list(argv), capture_output=True, text=True, timeout=600
    )
    if check and proc.returncode != 0:
        raise AssertionError(
            f"exit {proc.returncode}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
        )
    return proc


SIM_ARGS = ["--users", "3", "--k", "2", "--epochs", "2", "--seed", "1",
            "--factors", "4", "--sgd-epochs", "2"]


def read(path):
    return path.read_bytes()


def test_simulate_writes_artifacts_and_manifest(tmp_path):
    out = tmp_path / "run"
    run_cli("simulate", *SIM_ARGS, "--out", str(out))
    for name in ("trace.csv", "summary.csv", "recs.csv", "manifest.json"):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tool"] == "echochamber"
    assert manifest["command"] == "simulate"
    assert manifest["resolved_config"]["n_users"] == 3
    assert manifest["resolved_config"]["hyper"]["n_factors"] == 4
    import hashlib

    for name, digest in manifest["artifacts"].items():
        assert hashlib.sha256(read(out / name)).hexdigest() == digest
    for entry in manifest["inputs"].values():
        assert "sha256" in entry and "path" in entry


def test_manifest_reproduces_run_byte_exactly(tmp_path):
    first = tmp_path / "a"
    run_cli("simulate", *SIM_ARGS, "--out", str(first))
    second = tmp_path / "b"
    run_cli("simulate", "--config", str(first / "manifest.json"), "--out", str(second))
    for name in ("trace.csv", "summary.csv", "recs.csv"):
        assert read(first / name) == read(second / name)
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((second / "manifest.json").read_text())
    assert m1["artifacts"] == m2["artifacts"]
    assert m1["resolved_config"] == m2["resolved_config"]


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"n_users": 3, "k_per_epoch": 2, "n_epochs": 2,
                                  "seed": 1,
                                  "hyper": {"n_factors": 4, "n_sgd_epochs": 2}}))
    out = tmp_path / "run"
    run_cli("simulate", "--config", str(config), "--epochs", "1", "--out", str(out))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved_config"]["n_epochs"] == 1  # flag beat the file
    assert manifest["resolved_config"]["n_users"] == 3


def test_unknown_config_key_is_invalid(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"bogus_knob": 1}))
    proc = run_cli("simulate", "--config", str(config), "--out", str(tmp_path / "x"),
                   check=False)
    assert proc.returncode == 3
    assert "bogus_knob" in proc.stderr


def test_missing_genome_file_exits_2(tmp_path):
    proc = run_cli("som", "--genome-scores", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path), check=False)
    assert proc.returncode == 2
    assert "not found" in proc.stderr


def test_invalid_value_exits_3(tmp_path):
    proc = run_cli("simulate", "--users", "0", "--out", str(tmp_path), check=False)
    assert proc.returncode == 3


def test_som_artifacts_and_groups_flag(tmp_path):
    out = tmp_path / "som"
    run_cli("som", "--iterations", "200", "--groups", "1", "--seed", "2",
            "--out", str(out))
    doc = json.loads((out / "som.json").read_text())
    assert {node["group"] for node in doc["nodes"]} == {0}
    assert doc["grid"] == {"rows": 10, "cols": 10}
    assert len(doc["nodes"]) == 100


def test_som_movie_highlights_and_csv(tmp_path):
    out = tmp_path / "som"
    run_cli("som", "--iterations", "150", "--movies", "1,2,3", "--out", str(out))
    doc = json.loads((out / "som.json").read_text())
    assert "threshold_percentile" in doc
    lines = (out / "highlights.csv").read_text().splitlines()
    assert lines[0] == "epoch,node_row,node_col,highlighted"
    assert len(lines) == 1 + 100


def test_som_highlights_from_recs(tmp_path):
    sim_out = tmp_path / "sim"
    run_cli("simulate", *SIM_ARGS, "--out", str(sim_out))
    out = tmp_path / "som"
    run_cli("som", "--iterations", "150", "--recs", str(sim_out / "recs.csv"),
            "--epochs", "1,2", "--out", str(out))
    lines = (out / "highlights.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 100
    proc = run_cli("som", "--iterations", "10", "--recs", str(sim_out / "recs.csv"),
                   "--epochs", "9", "--out", str(tmp_path / "bad"), check=False)
    assert proc.returncode == 3  # epoch 9 is not in a 2-epoch log


def test_escape_none_strategy_gives_baseline_only(tmp_path):
    out = tmp_path / "esc"
    run_cli("escape", "--user", "1", "--strategies", "none", "--k-eval", "3",
            "--factors", "4", "--sgd-epochs", "2", "--out", str(out))
    report = json.loads((out / "escape_report.json").read_text())
    assert report["strategies"] == {}
    assert report["baseline_objective"] > 0


def test_escape_runs_heuristics(tmp_path):
    out = tmp_path / "esc"
    run_cli("escape", "--user", "1", "--strategies", "heuristic_far,heuristic_random",
            "--n-add", "2", "--k-eval", "3", "--factors", "4", "--sgd-epochs", "2",
            "--budget", "5", "--out", str(out))
    report = json.loads((out / "escape_report.json").read_text())
    assert set(report["strategies"]) == {"heuristic_far", "heuristic_random"}
    for result in report["strategies"].values():
        assert result["best_objective"] >= report["baseline_objective"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "escape"


def test_escape_requires_user(tmp_path):
    proc = run_cli("escape", "--strategies", "none", "--out", str(tmp_path),
                   check=False)
    assert proc.returncode == 3


def test_escape_self_test(tmp_path):
    out = tmp_path / "selftest"
    run_cli("escape", "--self-test", "--out", str(out))
    doc = json.loads((out / "escape_selftest.json").read_text())
    assert doc["finite_difference"]["error"] <= 1e-2
    assert doc["derivative_free"]["error"] <= 5e-2


def test_diversity_stdout_mode():
    proc = run_cli("diversity", "1", "2", "3", "--out", "-")
    lines = proc.stdout.splitlines()
    assert lines[0] == "n_movies,diversity"
    n, d = lines[1].split(",")
    assert n == "3" and float(d) > 0


def test_diversity_file_mode(tmp_path):
    out = tmp_path / "div"
    run_cli("diversity", "1", "2", "--out", str(out))
    lines = (out / "diversity.csv").read_text().splitlines()
    assert lines[0] == "n_movies,diversity"
    assert (out / "manifest.json").is_file()


def test_diversity_needs_two_ids(tmp_path):
    proc = run_cli("diversity", "1", "--out", "-", check=False)
    assert proc.returncode == 3


def test_validate_data_reports_counts(tmp_path):
    out = tmp_path / "val"
    run_cli("validate-data", "--out", str(out))
    doc = json.loads((out / "validation.json").read_text())
    assert doc["tags"] == 8
    assert doc["tagged_movies"] == 40
    assert doc["ratings"] > 0
    assert doc["users"] == 12
    assert doc["excluded_movies"] == 0


def test_thread_flag_does_not_change_artifacts(tmp_path):
    a, b = tmp_path / "t1", tmp_path / "t8"
    run_cli("simulate", *SIM_ARGS, "--threads", "1", "--out", str(a))
    run_cli("simulate", *SIM_ARGS, "--threads", "8", "--out", str(b))
    for name in ("trace.csv", "summary.csv", "recs.csv"):
        assert read(a / name) == read(b / name)


def test_data_dir_env_var(tmp_path, monkeypatch):
    from importlib import resources

    src = resources.files("echochamber").joinpath("data/toy")
    data = tmp_path / "data"
    data.mkdir()
    for name in ("ratings.csv", "genome-scores.csv", "genome-tags.csv"):
        (data / name).write_text(src.joinpath(name).read_text())
    out = tmp_path / "val"
    proc = subprocess.run(
        CLI + ["validate-data", "--out", str(out)],
        capture_output=True, text=True, timeout=600,
        env={"ECHOCHAMBER_DATA_DIR": str(data), "PATH": "/usr/bin:/bin"},
    )
    assert proc.returncode == 0, proc.stderr
    manifest = json.loads((out / "manifest.json").read_text())
    assert str(data) in manifest["inputs"]["ratings"]["path"]


def test_version_flag():
    proc = run_cli("--version")
    assert "echochamber" in proc.stdout
