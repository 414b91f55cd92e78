"""State-dependent SGD for the global contrastive loss, plus baselines.

``emc2`` draws a mini-batch of anchor groups, advances their persistent M-H
chains under the current parameters and steps along

    -(beta/B) sum_k H(x_k, y_k) + beta/(B(R-P)) sum_k sum_{r>=P} H(x_k, Z_k^r).

``simclr`` steps along the in-batch InfoNCE gradient and ``exact-gd`` along
the fully enumerated gradient.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, NumericError
from .loss import contrastive_objective, loss_and_grad
from .rng import BATCH, INIT_PARAMS, RandomStream
from .sampler import ChainTable, advance_chains, in_batch_candidates, in_batch_mh

log = logging.getLogger(__name__)


@dataclass
class MiniBatchSample:
    """Payload pool plus index arrays into it (the xi of one iteration)."""

    pool: np.ndarray
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    @classmethod
    def from_items(cls, data, encoder, anchors, positives, negatives, iteration=None):
        negatives = np.asarray(negatives, dtype=np.int64)
        if negatives.ndim == 1:
            negatives = negatives[:, None]
        ids = np.concatenate([np.ravel(anchors), np.ravel(positives), negatives.ravel()])
        uniq, inv = np.unique(ids, return_inverse=True)
        n = np.size(anchors)
        return cls(
            pool=data.payloads(uniq, encoder, iteration),
            anchors=inv[:n],
            positives=inv[n:2 * n],
            negatives=inv[2 * n:].reshape(negatives.shape),
        )


def emc2_gradient_estimate(sample: MiniBatchSample, theta, encoder, beta) -> np.ndarray:
    anchors, positives, negatives = sample.anchors, sample.positives, sample.negatives
    B = anchors.size
    if negatives.ndim != 2 or negatives.shape[1] == 0:
        raise ConfigError("need at least one retained negative per anchor (R > P)")
    K = negatives.shape[1]
    fa, ca = encoder.forward(theta, sample.pool[anchors], "phi")
    others = np.concatenate([positives, negatives.ravel()])
    fo, co = encoder.forward(theta, sample.pool[others], "psi")
    fp = fo[:B]
    fz = fo[B:].reshape(B, K, -1)
    dfa = beta * (fz.mean(axis=1) - fp) / B
    dfo = np.concatenate([-beta * fa / B, np.repeat(beta * fa / (B * K), K, axis=0)])
    grad = encoder.backward(theta, ca, dfa)
    return encoder.backward(theta, co, dfo, out=grad)


def _check_step(estimate, gamma):
    if gamma < 0:
        raise ConfigError("step size must be non-negative")
    if not np.all(np.isfinite(estimate)):
        raise NumericError("non-finite gradient estimate")


def sgd_update(theta, estimate, gamma) -> np.ndarray:
    _check_step(estimate, gamma)
    return theta - gamma * estimate


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(state: AdamState, theta, estimate, gamma, beta1=0.9, beta2=0.999, eps=1e-8):
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
        raise ConfigError("adam needs 0 <= beta1, beta2 < 1 and eps > 0")
    _check_step(estimate, gamma)
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * estimate
    v = beta2 * state.v + (1 - beta2) * estimate**2
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    theta = theta - gamma * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, step), theta


def exact_gd_step(theta, encoder, data, beta, gamma) -> np.ndarray:
    _, grad = loss_and_grad(theta, encoder, data, beta)
    return sgd_update(theta, grad, gamma)


def simclr_gradient(theta, encoder, data, views, beta, iteration=None) -> np.ndarray:
    """InfoNCE gradient with the 2b - 2 other in-batch views as negatives."""
    batch, eligible = in_batch_candidates(views)
    b = eligible.shape[0]
    negs = np.concatenate([eligible, eligible])
    views = np.asarray(views, dtype=np.int64)
    positives = np.concatenate([views[:, 1], views[:, 0]])
    sample = MiniBatchSample.from_items(data, encoder, batch, positives, negs, iteration)
    _, grad = contrastive_objective(
        theta, encoder, sample.pool, sample.anchors, sample.positives, sample.negatives, beta)
    return grad


def simclr_step(theta, encoder, data, views, beta, gamma, iteration=None) -> np.ndarray:
    return sgd_update(theta, simclr_gradient(theta, encoder, data, views, beta, iteration), gamma)


# --- training loop ---------------------------------------------------------


@dataclass
class TrainState:
    iteration: int
    theta: np.ndarray
    chains: Optional[ChainTable]
    adam: Optional[AdamState]
    samples_seen: int = 0

    def copy(self):
        return TrainState(
            self.iteration,
            self.theta.copy(),
            None if self.chains is None else self.chains.copy(),
            None if self.adam is None else AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.step),
            self.samples_seen,
        )


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)

    def append(self, iteration, samples_seen, loss, grad_sq_norm, wall_ms=0):
        if self.rows and iteration <= self.rows[-1]["iter"]:
            raise ValueError("run record iterations must be strictly increasing")
        self.rows.append({
            "iter": int(iteration),
            "samples_seen": int(samples_seen),
            "loss": None if loss is None else float(loss),
            "grad_sq_norm": None if grad_sq_norm is None else float(grad_sq_norm),
            "wall_ms": int(wall_ms),
        })

    def extend(self, other: "RunRecord"):
        for row in other.rows:
            self.append(row["iter"], row["samples_seen"], row["loss"], row["grad_sq_norm"], row["wall_ms"])

    def column(self, key):
        return np.array([np.nan if r[key] is None else r[key] for r in self.rows])

    def __len__(self):
        return len(self.rows)


class TrainingDiverged(NumericError):
    def __init__(self, message, record, state):
        super().__init__(message)
        self.record = record
        self.state = state


def init_state(config: TrainConfig, data, encoder) -> TrainState:
    stream = RandomStream(config.seed)
    theta = encoder.init_params(stream.generator(INIT_PARAMS))
    chains = ChainTable.initialize(data, stream) if config.algorithm == "emc2" else None
    adam = AdamState.zeros(theta.size) if config.optimizer == "adam" else None
    return TrainState(0, theta, chains, adam, 0)


def draw_batch(stream, iteration, data, B):
    """Bases without replacement, then one ordered positive pair per base."""
    g = stream.generator(BATCH, iteration)
    bases = g.choice(data.m, size=B, replace=False)
    pairs = np.empty((B, 2), dtype=np.int64)
    for k, i in enumerate(bases):
        gp = data.group_pairs[i]
        pairs[k] = gp[g.integers(gp.shape[0]), 1:]
    return bases, pairs


def draw_views(stream, iteration, data, b):
    """Bases without replacement and two distinct views of each."""
    g = stream.generator(BATCH, iteration)
    bases = g.choice(data.m, size=b, replace=False)
    views = np.empty((b, 2), dtype=np.int64)
    for k, i in enumerate(bases):
        grp = data.groups[i]
        if grp.size < 2:
            raise ConfigError("in-batch training needs at least two views per base item")
        views[k] = grp[:2] if grp.size == 2 else g.choice(grp, size=2, replace=False)
    return bases, views


def _validate(config, data):
    if config.algorithm in ("emc2", "simclr") and config.batch_size > data.m:
        raise ConfigError(f"batch_size {config.batch_size} exceeds the {data.m} anchors")
    if config.algorithm == "emc2":
        config.chain_lengths()
    if data.infinite and config.algorithm == "exact-gd":
        log.info("exact-gd on an infinite-augmentation dataset uses the stored evaluation views")


def _gradient(config, state, data, encoder, stream, t):
    beta = config.beta
    theta = state.theta
    if config.algorithm == "exact-gd":
        return loss_and_grad(theta, encoder, data, beta)[1], data.m
    if config.algorithm == "simclr":
        _, views = draw_views(stream, t, data, config.batch_size)
        return simclr_gradient(theta, encoder, data, views, beta, t), config.batch_size
    R, P = config.chain_lengths()
    if config.in_batch:
        bases, views = draw_views(stream, t, data, config.batch_size)
        anchors, positives, negs = in_batch_mh(
            state.chains, bases, views, theta, encoder, data, beta, P, stream, t)
    else:
        bases, pairs = draw_batch(stream, t, data, config.batch_size)
        anchors, positives = pairs[:, 0], pairs[:, 1]
        negs = advance_chains(state.chains, bases, anchors, theta, encoder, data, beta, R, P, stream, t)
    sample = MiniBatchSample.from_items(data, encoder, anchors, positives, negs, t)
    return emc2_gradient_estimate(sample, theta, encoder, beta), config.batch_size


def run_training(config: TrainConfig, data, encoder, state: TrainState = None, stop_at=None):
    """Run iterations ``state.iteration .. min(stop_at, T) - 1``.

    Exact loss and squared gradient norm are logged at every multiple of
    ``eval_every`` below T and at T itself, so a run split into segments logs
    exactly the rows of an uninterrupted run. Returns ``(record, state)``.
    """
    _validate(config, data)
    T = config.iterations(data.m)
    state = init_state(config, data, encoder) if state is None else state.copy()
    end = T if stop_at is None else min(stop_at, T)
    gamma = config.step_size(T)
    stream = RandomStream(config.seed)
    record = RunRecord()
    t0 = time.perf_counter()

    def evaluate(t):
        loss, grad = loss_and_grad(state.theta, encoder, data, config.beta)
        wall = int(1000 * (time.perf_counter() - t0)) if config.timing else 0
        record.append(t, state.samples_seen, loss, float(grad @ grad), wall)
        return grad

    def diverged(t, exc):
        if not record.rows or record.rows[-1]["iter"] < t:
            record.append(t, state.samples_seen, None, None)
        return TrainingDiverged(f"iteration {t}: {exc}", record, state)

    start = state.iteration
    for t in range(start, end):
        try:
            if t % config.eval_every == 0:
                evaluate(t)
            estimate, seen = _gradient(config, state, data, encoder, stream, t)
            if config.weight_decay:
                estimate = estimate + config.weight_decay * state.theta
            if config.optimizer == "adam":
                adam, theta = adam_update(state.adam, state.theta, estimate, gamma,
                                          config.adam_beta1, config.adam_beta2, config.adam_eps)
            else:
                adam, theta = state.adam, sgd_update(state.theta, estimate, gamma)
        except NumericError as exc:
            raise diverged(t, exc) from None
        state.theta, state.adam = theta, adam
        state.samples_seen += seen
        state.iteration = t + 1
    if end == T and start < T:
        try:
            evaluate(T)
        except NumericError as exc:
            raise diverged(T, exc) from None
    return record, state
