import json

import numpy as np
import pytest

import emc2.experiment as experiment
from emc2.checkpoint import load_checkpoint, save_checkpoint
from emc2.cli import main
from emc2.config import ExperimentConfig, load_config
from emc2.errors import CheckpointError, ConfigError, ParseError
from emc2.experiment import build, emit_report, read_report, read_run_log, run_experiment
from emc2.optim import TrainingDiverged, run_training


def small_config(**train):
    base = dict(algorithm="emc2", beta=5.0, batch_size=3, in_batch=True, gamma=0.5, total_iterations=20,
                eval_every=5, seed=3)
    base.update(train)
    return ExperimentConfig.model_validate({
        "dataset": {"m": 6, "clusters": 2, "input_dim": 4, "seed": 1},
        "encoder": {"kind": "linear", "input_dim": 4, "feature_dim": 3},
        "train": base,
    })


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.model_dump(mode="json")))
    return str(path)


@pytest.mark.parametrize("train", [{}, {"optimizer": "adam", "gamma": 0.05}, {"algorithm": "exact-gd", "in_batch": False}])
def test_checkpoint_round_trip(tmp_path, train):
    cfg = small_config(**train)
    data, enc = build(cfg)
    _, state = run_training(cfg.train, data, enc, stop_at=7)
    save_checkpoint(tmp_path / "c.json", state, cfg)
    back, stored = load_checkpoint(tmp_path / "c.json", cfg)
    assert stored == cfg
    assert back.iteration == 7 and back.samples_seen == state.samples_seen
    assert np.array_equal(back.theta, state.theta)
    if state.chains is None:
        assert back.chains is None
    else:
        assert np.array_equal(back.chains.states, state.chains.states)
        assert np.array_equal(back.chains.touched, state.chains.touched)
    if state.adam is not None:
        assert np.array_equal(back.adam.m, state.adam.m) and np.array_equal(back.adam.v, state.adam.v)
        assert back.adam.step == state.adam.step
    # continuing from the file matches continuing from memory
    r1, s1 = run_training(cfg.train, data, enc, state=state)
    r2, s2 = run_training(cfg.train, data, enc, state=back)
    assert r1.rows == r2.rows and np.array_equal(s1.theta, s2.theta)


def test_checkpoint_rejects_tampering(tmp_path):
    cfg = small_config()
    data, enc = build(cfg)
    _, state = run_training(cfg.train, data, enc, stop_at=2)
    path = tmp_path / "c.json"
    save_checkpoint(path, state, cfg)
    doc = json.loads(path.read_text())
    doc["theta"][0] = "0.5"
    (tmp_path / "t.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "t.json")
    doc = json.loads(path.read_text())
    doc["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")
    with pytest.raises(CheckpointError, match="different configuration"):
        load_checkpoint(path, small_config(gamma=0.25))
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.json")


def test_run_outputs_are_byte_identical(tmp_path):
    cfg = small_config()
    s1 = run_experiment(cfg, tmp_path / "a")
    s2 = run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "run.jsonl").read_bytes() == (tmp_path / "b" / "run.jsonl").read_bytes()
    assert s1["status"] == "ok" and s1["iterations"] == 20 and s1["samples_seen"] == 60
    assert s1["config_hash"] == s2["config_hash"]
    rows = read_run_log(tmp_path / "a" / "run.jsonl")
    assert [r["iter"] for r in rows] == [0, 5, 10, 15, 20]
    assert all(r["wall_ms"] == 0 for r in rows)
    assert s1["final_loss"] == rows[-1]["loss"]


@pytest.mark.parametrize("train, every", [({}, 7), ({}, 10), ({"algorithm": "simclr", "in_batch": False}, 7),
                                          ({"algorithm": "exact-gd", "in_batch": False}, 7)])
def test_interrupted_run_resumes_exactly(tmp_path, monkeypatch, train, every):
    whole = small_config(**train)
    run_experiment(whole, tmp_path / "whole")
    cfg = whole.model_copy(update={"checkpoint_every": every})
    real = experiment.run_training
    calls = []

    def flaky(*a, **kw):
        calls.append(kw.get("stop_at"))
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(*a, **kw)

    monkeypatch.setattr(experiment, "run_training", flaky)
    with pytest.raises(KeyboardInterrupt):
        run_experiment(cfg, tmp_path / "resumed")
    monkeypatch.setattr(experiment, "run_training", real)
    assert load_checkpoint(tmp_path / "resumed" / "checkpoint.json")[0].iteration == every
    run_experiment(cfg, tmp_path / "resumed", resume=True)
    assert (tmp_path / "whole" / "run.jsonl").read_bytes() == (tmp_path / "resumed" / "run.jsonl").read_bytes()
    # resuming a finished run changes nothing
    run_experiment(cfg, tmp_path / "resumed", resume=True)
    assert (tmp_path / "whole" / "run.jsonl").read_bytes() == (tmp_path / "resumed" / "run.jsonl").read_bytes()
    a, _ = load_checkpoint(tmp_path / "whole" / "checkpoint.json")
    b, _ = load_checkpoint(tmp_path / "resumed" / "checkpoint.json")
    assert np.array_equal(a.theta, b.theta)


def test_zero_iterations_summary(tmp_path):
    s = run_experiment(small_config(total_iterations=0), tmp_path)
    assert s["iterations"] == 0 and s["samples_seen"] == 0 and s["final_loss"] is not None
    assert len(read_run_log(tmp_path / "run.jsonl")) == 1


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_is_recorded(tmp_path):
    cfg = small_config(algorithm="exact-gd", in_batch=False, gamma=1e300, eval_every=1)
    cfg = cfg.model_copy(update={"encoder": cfg.encoder.model_copy(update={"normalize": False, "norm_bound": 10.0})})
    with pytest.raises(TrainingDiverged):
        run_experiment(cfg, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "diverged" and summary["final_loss"] is None
    assert read_run_log(tmp_path / "run.jsonl")[-1]["loss"] is None


def test_report_merges_runs(tmp_path):
    run_experiment(small_config(), tmp_path / "e")
    run_experiment(small_config(algorithm="simclr", in_batch=False, total_iterations=10), tmp_path / "s")
    n = emit_report([tmp_path / "e", f"custom={tmp_path / 's' / 'run.jsonl'}"], tmp_path / "r" / "report.csv")
    rows = read_report(tmp_path / "r" / "report.csv")
    assert n == len(rows) == 5 + 3
    assert [r["algorithm"] for r in rows] == ["emc2"] * 5 + ["custom"] * 3
    logged = read_run_log(tmp_path / "e" / "run.jsonl")
    assert [r["loss"] for r in rows[:5]] == [r["loss"] for r in logged]
    assert [r["grad_sq_norm"] for r in rows[:5]] == [r["grad_sq_norm"] for r in logged]


def test_run_log_errors_name_the_line(tmp_path):
    p = tmp_path / "run.jsonl"
    p.write_text('{"iter": 0, "samples_seen": 0, "loss": 1.0, "grad_sq_norm": 1.0, "wall_ms": 0}\n{"iter": 1}\n')
    with pytest.raises(ParseError) as err:
        read_run_log(p)
    assert err.value.line == 2 and "samples_seen" in str(err.value)
    p.write_text("[1, 2]\n")
    with pytest.raises(ParseError):
        read_run_log(p)
    with pytest.raises(ParseError):
        read_run_log(tmp_path / "missing.jsonl")


def test_unknown_config_key_is_an_error(tmp_path):
    doc = small_config().model_dump(mode="json")
    doc["train"]["learning_rate"] = 0.1
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(tmp_path / "c.json")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_cli_train_and_algorithm_override(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", small_config())
    assert main(["train", "--config", cfg, "--algorithm", "simclr", "--out", str(tmp_path / "s")]) == 0
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert summary["algorithm"] == "simclr"
    stored = load_checkpoint(tmp_path / "s" / "checkpoint.json")[1]
    assert stored.train.algorithm == "simclr" and not stored.train.in_batch
    assert main(["train", "--config", cfg, "--seed", "11", "--out", str(tmp_path / "e")]) == 0
    stored = load_checkpoint(tmp_path / "e" / "checkpoint.json")[1]
    assert stored.train.seed == 11 and stored.dataset.seed == 11
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "e"), "--seed", "11", "--resume"]) == 0
    assert main(["report", str(tmp_path / "s"), str(tmp_path / "e"), "--out", str(tmp_path / "rep")]) == 0
    assert len(read_report(tmp_path / "rep" / "report.csv")) == 10
    assert main(["train", "--config", cfg, "--seed", "-1"]) == 2


def test_cli_synth_data(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_config())
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    from emc2.data import load_dataset_csv

    assert load_dataset_csv(tmp_path / "dataset.csv") == build(small_config())[0]


@pytest.mark.parametrize("argv, name", [
    (["diag-mixing", "--steps", "50"], "diag-mixing"),
    (["diag-kernel", "--anchors", "4", "--lipschitz-pairs", "500"], "diag-kernel"),
    (["diag-bias", "--n-estimates", "2000", "--negatives", "exact"], "diag-bias"),
    (["grad-check", "--probes", "2"], "grad-check"),
])
def test_cli_diagnostics(tmp_path, capsys, argv, name):
    cfg = write_config(tmp_path / "c.json", small_config())
    assert main(argv + ["--config", cfg, "--out", str(tmp_path)]) == 0
    entries = json.loads((tmp_path / f"{name}.json").read_text())
    assert entries and all(set(e) == {"name", "inputs", "measured", "bound", "pass"} for e in entries)
    assert all(e["pass"] for e in entries)
    out = capsys.readouterr().out
    assert out.count("PASS") == len(entries)


def test_cli_diagnostics_from_checkpoint(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_config())
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["diag-mixing", "--config", cfg, "--checkpoint", str(tmp_path / "checkpoint.json"),
                 "--steps", "20", "--out", str(tmp_path)]) == 0


def test_cli_needs_a_config():
    with pytest.raises(SystemExit):
        main(["train"])
