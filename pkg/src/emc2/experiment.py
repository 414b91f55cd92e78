"""Run one configured experiment end to end and turn run logs into tidy CSV.

An output directory holds ``run.jsonl`` (one object per evaluation),
``checkpoint.json`` and ``summary.json``. The JSONL file is a pure function
of the configuration unless ``train.timing`` is on.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash
from .data import synth_dataset
from .encoders import Encoder
from .errors import ParseError
from .loss import loss_and_grad
from .optim import RunRecord, TrainingDiverged, init_state, run_training

log = logging.getLogger(__name__)

RUN_LOG = "run.jsonl"
CHECKPOINT = "checkpoint.json"
SUMMARY = "summary.json"
LOG_KEYS = ("iter", "samples_seen", "loss", "grad_sq_norm", "wall_ms")
REPORT_COLUMNS = ("algorithm", "iteration", "samples_seen", "loss", "grad_sq_norm", "wall_ms")


def build(config: ExperimentConfig):
    """Dataset and encoder for ``config``; the table size comes from the data."""
    data = synth_dataset(config.dataset)
    return data, Encoder(config.encoder.with_items(data.n_items))


def write_run_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in LOG_KEYS}) + "\n")


def read_run_log(path) -> list:
    rows = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise ParseError(f"invalid JSON ({exc})", line=lineno) from None
            if not isinstance(row, dict):
                raise ParseError("expected a JSON object", line=lineno)
            missing = [k for k in LOG_KEYS if k not in row]
            if missing:
                raise ParseError(f"missing column(s) {', '.join(missing)}", line=lineno)
            rows.append(row)
    return rows


def _summary(config, record, state, wall, status):
    last = record.rows[-1] if record.rows else {}
    return {
        "algorithm": config.train.algorithm,
        "status": status,
        "iterations": state.iteration,
        "samples_seen": state.samples_seen,
        "final_loss": last.get("loss"),
        "final_grad_sq_norm": last.get("grad_sq_norm"),
        "wall_time_s": wall,
        "config_hash": config_hash(config),
    }


def run_experiment(config: ExperimentConfig, out_dir=None, resume=False) -> dict:
    """Train, write the output files and return the summary.

    With ``resume`` an existing checkpoint in the output directory is
    continued; rows logged up to it are kept. A zero-iteration budget still
    logs the initialization metrics so the summary has something to report.
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, encoder = build(config)
    train = config.train
    T = train.iterations(data.m)

    rows, state = [], None
    if resume and (out / CHECKPOINT).exists():
        state, _ = load_checkpoint(out / CHECKPOINT, config)
        if (out / RUN_LOG).exists():
            rows = [r for r in read_run_log(out / RUN_LOG) if r["iter"] <= state.iteration]
        log.info("resuming at iteration %d", state.iteration)
    if state is None:
        state = init_state(train, data, encoder)

    t0 = time.perf_counter()
    status = "ok"
    step = config.checkpoint_every or T
    try:
        if T == 0 and not rows:
            rows.extend(_init_row(train, data, encoder, state))
        while state.iteration < T:
            stop = min(T, (state.iteration // step + 1) * step)
            record, state = run_training(train, data, encoder, state, stop_at=stop)
            rows.extend(record.rows)
            save_checkpoint(out / CHECKPOINT, state, config)
            write_run_log(out / RUN_LOG, rows)
    except TrainingDiverged as exc:
        rows.extend(exc.record.rows)
        state = exc.state
        status = "diverged"
        log.error("training diverged: %s", exc)
    write_run_log(out / RUN_LOG, rows)
    if T == 0 or status != "ok":
        save_checkpoint(out / CHECKPOINT, state, config)
    record = RunRecord(rows)
    summary = _summary(config, record, state, round(time.perf_counter() - t0, 3), status)
    (out / SUMMARY).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if status != "ok":
        raise TrainingDiverged(f"training diverged; see {out / RUN_LOG}", record, state)
    return summary


def _init_row(train, data, encoder, state):
    loss, grad = loss_and_grad(state.theta, encoder, data, train.beta)
    return [{"iter": 0, "samples_seen": 0, "loss": loss, "grad_sq_norm": float(grad @ grad), "wall_ms": 0}]


def _label_for(path: Path) -> str:
    summary = path.parent / SUMMARY
    if summary.exists():
        try:
            return json.loads(summary.read_text(encoding="utf-8"))["algorithm"]
        except (ValueError, KeyError):
            pass
    return path.stem


def emit_report(inputs, out) -> int:
    """Merge run logs into one tidy CSV and return its row count.

    Each input is ``PATH`` or ``LABEL=PATH``; without a label the algorithm
    named in the sibling ``summary.json`` is used, then the file stem. A
    directory stands for the ``run.jsonl`` inside it.
    """
    table = []
    for spec in inputs:
        label, _, raw = str(spec).rpartition("=")
        path = Path(raw)
        if path.is_dir():
            path = path / RUN_LOG
        label = label or _label_for(path)
        for row in read_run_log(path):
            table.append((label, row))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for label, row in table:
            w.writerow([label, row["iter"], row["samples_seen"], _num(row["loss"]),
                        _num(row["grad_sq_norm"]), row["wall_ms"]])
    return len(table)


def _num(v):
    return "" if v is None else repr(float(v))


def read_report(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ParseError(f"report columns must be {', '.join(REPORT_COLUMNS)}", line=1)
        return [{
            "algorithm": r["algorithm"],
            "iteration": int(r["iteration"]),
            "samples_seen": int(r["samples_seen"]),
            "loss": float(r["loss"]) if r["loss"] else None,
            "grad_sq_norm": float(r["grad_sq_norm"]) if r["grad_sq_norm"] else None,
            "wall_ms": int(r["wall_ms"]),
        } for r in reader]
