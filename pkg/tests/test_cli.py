"""End-to-end tests of the command-line interface and its exit codes."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from msprt.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_REJECTED, main

DATA_DIR = Path(__file__).parent / "data"

NATURAL_PRIOR = {
    "dimension": 1,
    "scale": "natural",
    "components": [{"weight": 1.0, "mean": [0.0], "cov": [[0.25]]}],
}

POINT_MASS_PRIOR = {
    "dimension": 1,
    "scale": "natural",
    "components": [{"weight": 1.0, "mean": [0.0], "cov": [[0.0]]}],
}


@pytest.fixture
def prior_file(tmp_path):
    path = tmp_path / "prior.json"
    path.write_text(json.dumps(NATURAL_PRIOR))
    return str(path)


def _write_stream_csv(path, arms, values, header=False):
    lines = ["arm,value"] if header else []
    lines += [f"{a},{v:g}" for a, v in zip(arms, values)]
    path.write_text("\n".join(lines) + "\n")


def _golden_stream(path):
    """Deterministic two-arm Bernoulli stream with p=(0.1, 0.4), n=10000."""
    rng = np.random.default_rng(20240611)
    arms = rng.integers(1, 3, size=10_000)
    p = np.where(arms == 1, 0.1, 0.4)
    values = (rng.random(10_000) < p).astype(int)
    _write_stream_csv(path, arms.tolist(), values.tolist())


# -----------------------------------------------------------------------
# check
# -----------------------------------------------------------------------


def test_check_valid_prior(prior_file, capsys):
    assert main(["check", "--prior", prior_file]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_check_prior_weight_sum(tmp_path, capsys):
    doc = dict(NATURAL_PRIOR, components=[
        {"weight": 0.6, "mean": [0.0], "cov": [[1.0]]},
        {"weight": 0.6, "mean": [0.0], "cov": [[1.0]]},
    ])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["check", "--prior", str(path)]) == EXIT_CONFIG
    assert "weights sum" in capsys.readouterr().err


def test_check_prior_non_psd_names_component(tmp_path, capsys):
    doc = {
        "dimension": 2,
        "scale": "natural",
        "components": [
            {"weight": 1.0, "mean": [0.0, 0.0], "cov": [[0.45, 0.55], [0.55, 0.45]]},
        ],
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["check", "--prior", str(path)]) == EXIT_CONFIG
    assert "component 0" in capsys.readouterr().err


def test_check_config(tmp_path, capsys):
    good = {
        "alpha": 0.05, "metric": "risk_ratio", "arms": 2,
        "batch_interval": 100, "burn_in": 200, "prior": NATURAL_PRIOR,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(good))
    assert main(["check", "--config", str(path)]) == EXIT_OK
    bad = dict(good, burn_in=10)
    path.write_text(json.dumps(bad))
    assert main(["check", "--config", str(path)]) == EXIT_CONFIG
    assert "burn_in" in capsys.readouterr().err


def test_check_missing_file(tmp_path):
    assert main(["check", "--prior", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_config_dir_env_fallback(tmp_path, monkeypatch, capsys):
    (tmp_path / "cfg").mkdir()
    (tmp_path / "cfg" / "prior.json").write_text(json.dumps(NATURAL_PRIOR))
    monkeypatch.setenv("MSPRT_CONFIG_DIR", str(tmp_path / "cfg"))
    monkeypatch.chdir(tmp_path)
    assert main(["check", "--prior", "prior.json"]) == EXIT_OK


# -----------------------------------------------------------------------
# run
# -----------------------------------------------------------------------


def _run_flags(prior, out, k="10", burn="20"):
    return ["--metric", "risk_ratio", "--alpha", "0.05", "--arms", "2",
            "--prior", prior, "--batch-size", k, "--burn-in", burn, "--out", out]


def test_run_point_mass_null_stream(tmp_path):
    """Equal arms with a point-mass prior keep the log ratio at zero."""
    prior = tmp_path / "pm.json"
    prior.write_text(json.dumps(POINT_MASS_PRIOR))
    stream = tmp_path / "events.csv"
    arms, values = [], []
    for _ in range(50):
        for arm in (1, 2):
            arms += [arm, arm]
            values += [1, 0]
    _write_stream_csv(stream, arms, values, header=True)
    out = tmp_path / "records.jsonl"
    code = main(["run", str(stream)] + _run_flags(str(prior), str(out)))
    assert code == EXIT_OK
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(records) == 20
    assert all(r["log_lambda"] == 0.0 and r["p"] == 1.0 for r in records)
    assert all(r["decision"] == "continue" for r in records)


def test_run_replay_is_deterministic(tmp_path, prior_file):
    stream = tmp_path / "events.csv"
    rng = np.random.default_rng(5)
    _write_stream_csv(stream, (rng.integers(1, 3, 400)).tolist(),
                      (rng.integers(0, 2, 400)).tolist())
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", str(stream)] + _run_flags(prior_file, str(out1))) == EXIT_OK
    assert main(["run", str(stream)] + _run_flags(prior_file, str(out2))) == EXIT_OK
    assert out1.read_bytes() == out2.read_bytes()


def test_run_jsonl_input(tmp_path, prior_file):
    stream = tmp_path / "events.jsonl"
    rng = np.random.default_rng(6)
    lines = [json.dumps({"arm": int(a), "value": int(v)})
             for a, v in zip(rng.integers(1, 3, 100), rng.integers(0, 2, 100))]
    stream.write_text("\n".join(lines) + "\n")
    out = tmp_path / "records.jsonl"
    assert main(["run", str(stream)] + _run_flags(prior_file, str(out))) == EXIT_OK
    assert len(out.read_text().splitlines()) == 10


def test_run_malformed_over_tolerance(tmp_path, prior_file, capsys):
    stream = tmp_path / "events.csv"
    stream.write_text("1,1\nnot-a-record\n2,0\nalso bad\n1,0\n")
    out = tmp_path / "records.jsonl"
    assert main(["run", str(stream)] + _run_flags(prior_file, str(out))) == EXIT_DATA
    err = capsys.readouterr().err
    assert "tolerance" in err


def test_run_malformed_within_tolerance(tmp_path, prior_file, capsys):
    stream = tmp_path / "events.csv"
    stream.write_text("1,1\nnot-a-record\n2,0\n3,1\n1,0\n2,1\n")  # bad line + bad arm
    out = tmp_path / "records.jsonl"
    code = main(["run", str(stream)] + _run_flags(prior_file, str(out), k="2", burn="2")
                + ["--max-bad-records", "2"])
    assert code == EXIT_OK
    assert "skipped 2 malformed record(s)" in capsys.readouterr().err


def test_run_rejects_missing_prior(tmp_path):
    stream = tmp_path / "events.csv"
    stream.write_text("1,1\n")
    assert main(["run", str(stream), "--metric", "risk_ratio"]) == EXIT_CONFIG


def test_run_invalid_prior_file(tmp_path, capsys):
    stream = tmp_path / "events.csv"
    stream.write_text("1,1\n")
    prior = tmp_path / "bad.json"
    prior.write_text("{not json")
    assert main(["run", str(stream), "--metric", "risk_ratio",
                 "--prior", str(prior)]) == EXIT_CONFIG


def test_run_golden_stream(tmp_path, prior_file):
    """Frozen output of a high-effect stream: rejection point and records."""
    stream = tmp_path / "golden.csv"
    _golden_stream(stream)
    out = tmp_path / "records.jsonl"
    code = main(["run", str(stream), "--metric", "risk_ratio", "--alpha", "0.05",
                 "--arms", "2", "--prior", prior_file,
                 "--batch-size", "100", "--burn-in", "200", "--out", str(out)])
    assert code == EXIT_REJECTED
    golden = (DATA_DIR / "golden_run.jsonl").read_bytes()
    assert out.read_bytes() == golden


def test_run_resume_reproduces_unsegmented_output(tmp_path, prior_file):
    stream = tmp_path / "events.csv"
    rng = np.random.default_rng(8)
    _write_stream_csv(stream, (rng.integers(1, 3, 3000)).tolist(),
                      (rng.random(3000) < 0.3).astype(int).tolist())
    full_out = tmp_path / "full.jsonl"
    assert main(["run", str(stream)] + _run_flags(prior_file, str(full_out), k="50", burn="100")) == EXIT_OK

    part1 = tmp_path / "part1.jsonl"
    snap = tmp_path / "state.snap"
    assert main(["run", str(stream)]
                + _run_flags(prior_file, str(part1), k="50", burn="100")
                + ["--snapshot-out", str(snap), "--snapshot-every", "500",
                   "--max-events", "1234"]) == EXIT_OK
    part2 = tmp_path / "part2.jsonl"
    assert main(["run", str(stream), "--resume", str(snap),
                 "--out", str(part2)]) == EXIT_OK
    combined = part1.read_bytes() + part2.read_bytes()
    assert combined == full_out.read_bytes()


def test_run_resume_with_corrupt_snapshot(tmp_path, prior_file, capsys):
    stream = tmp_path / "events.csv"
    stream.write_text("1,1\n")
    snap = tmp_path / "state.snap"
    snap.write_bytes(b"garbage")
    assert main(["run", str(stream), "--resume", str(snap)]) == EXIT_CONFIG


# -----------------------------------------------------------------------
# simulate
# -----------------------------------------------------------------------


def _scenario_doc(p=(0.3, 0.3), reps=15, max_n=600):
    return {
        "generator": {"kind": "bernoulli", "p": list(p)},
        "allocation": [0.5, 0.5],
        "max_n": max_n,
        "replications": reps,
        "seed": 99,
    }


def test_simulate_report_and_determinism(tmp_path, prior_file, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(_scenario_doc()))
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    flags = ["--metric", "risk_ratio", "--alpha", "0.05", "--arms", "2",
             "--prior", prior_file, "--batch-size", "100", "--burn-in", "200",
             "--jobs", "1"]
    assert main(["simulate", str(scenario)] + flags + ["--out", str(out1)]) == EXIT_OK
    assert main(["simulate", str(scenario)] + flags + ["--out", str(out2)]) == EXIT_OK
    assert out1.read_bytes() == out2.read_bytes()
    report = json.loads(out1.read_text())
    assert report["replications"] == 15
    assert 0.0 <= report["rejection_rate"] <= 1.0
    assert "rejection_rate" in capsys.readouterr().out


def test_simulate_arm_mismatch_exits_2(tmp_path, prior_file, capsys):
    scenario = tmp_path / "scenario.json"
    doc = _scenario_doc()
    doc["generator"]["p"] = [0.3, 0.3, 0.3]
    doc["allocation"] = [0.4, 0.3, 0.3]
    scenario.write_text(json.dumps(doc))
    code = main(["simulate", str(scenario), "--metric", "risk_ratio",
                 "--arms", "2", "--prior", prior_file])
    assert code == EXIT_CONFIG
    assert "arms" in capsys.readouterr().err


def test_simulate_without_out_prints_json(tmp_path, prior_file, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(_scenario_doc(reps=5, max_n=400)))
    code = main(["simulate", str(scenario), "--metric", "risk_ratio",
                 "--arms", "2", "--prior", prior_file, "--batch-size", "100",
                 "--burn-in", "200", "--jobs", "1"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert json.loads(out)["replications"] == 5
