import csv
import json

import pytest

from wits3.cli import EXIT_OK, EXIT_USAGE, main

SMALL = {
    "name": "small",
    "source_defaults": {"buffer": 2, "sampling_cost": 1, "age_cap": 4, "success_probs": [0.9, 0.3]},
    "sources": [
        {"id": 1, "lambda": 0.6, "channel_probs": [0.5, 0.5]},
        {"id": 2, "lambda": 0.4, "channel_probs": [0.3, 0.7]},
    ],
    "solver": {"alpha": 0.9, "tol": 1e-9},
    "whittle": {"tol": 1e-3, "audit_grid": {"start": 0, "stop": 12, "num": 6}},
    "simulation": {"T": 500, "seeds": [1, 2, 3]},
    "learning": {"T": 2000, "seeds": [4], "epsilon": 0.1, "curve_stride": 100,
                 "snapshot_every": 1000},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(cfg_path, out, *args):
    return main([*args, "--config", str(cfg_path), "--out", str(out)])


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# wits3 ") and "config_hash=" in lines[0]
    return list(csv.reader(lines[1:]))


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({**SMALL, "sources": []}))
    assert main(["solve", "--config", str(empty), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_usage_errors_exit_2(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "compare", "--policy", "oracle") == EXIT_USAGE
    assert run(cfg_path, tmp_path, "simulate", "--T", "0") == EXIT_USAGE
    assert run(cfg_path, tmp_path, "solve", "--mu", "-1") == EXIT_USAGE
    assert run(cfg_path, tmp_path, "solve", "--source", "9") == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_solve_outputs(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "solve", "--source", "1", "--mu", "1", "--mu", "1000") == EXIT_OK
    rows = read_csv(tmp_path / "thresholds_1_1000.csv")
    assert rows[0] == ["E", "K", "p_th", "channel"]
    # never probing makes stored energy worthless, so once probed every channel is worth sampling
    assert {r[2] for r in rows[1:]} == {"0.3"}
    vals = json.loads((tmp_path / "values_1_1.json").read_text())
    assert vals["provenance"]["config_hash"] and vals["converged"]


def test_index_outputs(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "index") == EXIT_OK
    summary = json.loads((tmp_path / "index_summary.json").read_text())
    assert [s["source"] for s in summary["sources"]] == [1, 2]
    rows = read_csv(tmp_path / "whittle_2.csv")
    assert len(rows) == 1 + 2 * 4


def test_single_seed_stderr_not_available(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "compare", "--seed", "7") == EXIT_OK
    rows = read_csv(tmp_path / "compare.csv")
    assert [r[0] for r in rows[1:]] == ["wits3", "gma-r", "gme-r"]
    assert all(r[4] == "n/a" for r in rows[1:])


def test_duplicated_policy_gives_identical_rows(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "compare", "--policy", "gma-r", "--policy", "gma-r") == EXIT_OK
    rows = read_csv(tmp_path / "compare.csv")
    assert rows[1] == rows[2]
    sig = json.loads((tmp_path / "significance.json").read_text())
    assert sig["comparisons"][0]["gap"] == 0.0


def test_simulate_horizon_one_and_trace(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "simulate", "--T", "1", "--seed", "3", "--trace") == EXIT_OK
    rows = read_csv(tmp_path / "cumulative_wits3.csv")
    assert rows[0] == ["t", "avg_aoi"] and len(rows) == 2
    assert (tmp_path / "trace_wits3_3.csv").exists()
    m = json.loads((tmp_path / "metrics_wits3.json").read_text())
    assert m["provenance"]["seeds"] == [3]


def test_reruns_are_byte_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(cfg_path, d, "compare") == EXIT_OK
        assert run(cfg_path, d, "learn") == EXIT_OK
    for name in ("compare.csv", "compare_seeds.csv", "learning_curve.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_learn_outputs_and_resume(cfg_path, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(cfg_path, full, "learn", "--no-reference") == EXIT_OK
    assert run(cfg_path, part, "learn", "--no-reference", "--T", "1000") == EXIT_OK
    state = part / "learner_state.json"
    assert run(cfg_path, part, "learn", "--no-reference", "--resume", str(state)) == EXIT_OK
    assert (full / "learning_curve.csv").read_bytes() == (part / "learning_curve.csv").read_bytes()
    s = json.loads((full / "learn_summary.json").read_text())
    assert s["final_window_start"] == 1800 and s["wits3_reference"] is None
    assert not (full / "wits3_reference.json").exists()
    # snapshot already past the requested horizon
    assert run(cfg_path, part, "learn", "--resume", str(full / "learner_state.json"),
               "--T", "500") == EXIT_USAGE


def test_resume_with_other_config_rejected(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "learn", "--no-reference", "--T", "200") == EXIT_OK
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "solver": {"alpha": 0.8}}))
    assert main(["learn", "--config", str(other), "--out", str(tmp_path),
                 "--resume", str(tmp_path / "learner_state.json")]) == EXIT_USAGE


def test_zero_exploration_warns(tmp_path):
    cfg = {**SMALL, "learning": {**SMALL["learning"], "epsilon": 0.0, "T": 300}}
    path = tmp_path / "eps0.json"
    path.write_text(json.dumps(cfg))
    with pytest.warns(RuntimeWarning, match="epsilon=0"):
        assert run(path, tmp_path, "learn", "--no-reference") == EXIT_OK
    s = json.loads((tmp_path / "learn_summary.json").read_text())
    assert s["warnings"]
