"""JSON checkpoints that resume training bit for bit.

Random streams are addressed by ``(seed, iteration)``, so the seed and the
iteration counter are the whole RNG state. Floats are written with 17
significant digits, which round-trips every IEEE double.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash
from .errors import CheckpointError
from .optim import AdamState, TrainState
from .sampler import ChainTable

VERSION = 1


def _floats(a):
    return ["%.17g" % v for v in np.asarray(a, dtype=np.float64).ravel()]


def _parse_floats(vals):
    return np.array([float(v) for v in vals], dtype=np.float64)


def _digest(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_checkpoint(path, state: TrainState, config: ExperimentConfig) -> None:
    doc = {
        "version": VERSION,
        "iteration": int(state.iteration),
        "samples_seen": int(state.samples_seen),
        "seed": int(config.train.seed),
        "encoder": config.encoder.model_dump(mode="json"),
        "theta": _floats(state.theta),
        "chain_states": None if state.chains is None else state.chains.states.tolist(),
        "chain_touched": None if state.chains is None else state.chains.touched.tolist(),
        "adam": None if state.adam is None else {
            "m": _floats(state.adam.m), "v": _floats(state.adam.v), "step": int(state.adam.step)},
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
    }
    doc["checksum"] = _digest(doc)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path, config: ExperimentConfig = None):
    """Return ``(state, config)``.

    When ``config`` is given its hash must match the stored one, which stops a
    run from silently resuming under different settings.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r}")
    if doc.get("checksum") != _digest(doc):
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or edited)")
    try:
        stored = ExperimentConfig.model_validate(doc["config"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    if config_hash(stored) != doc["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match its config")
    if config is not None and config_hash(config) != doc["config_hash"]:
        raise CheckpointError("checkpoint was written under a different configuration")

    chains = None
    if doc["chain_states"] is not None:
        chains = ChainTable(np.array(doc["chain_states"], dtype=np.int64),
                            np.array(doc["chain_touched"], dtype=np.int64))
    adam = None
    if doc["adam"] is not None:
        a = doc["adam"]
        adam = AdamState(_parse_floats(a["m"]), _parse_floats(a["v"]), int(a["step"]))
    state = TrainState(int(doc["iteration"]), _parse_floats(doc["theta"]), chains, adam, int(doc["samples_seen"]))
    return state, stored
