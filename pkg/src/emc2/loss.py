"""Global contrastive loss, its exact gradient, and the InfoNCE estimator.

Everything here enumerates negative sets exactly, so it is meant for
desk-scale datasets and as the reference the samplers are checked against.
Partition sums always go through a max-shifted log-sum-exp.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, NumericError


def _check_beta(beta):
    beta = float(beta)
    if not (np.isfinite(beta) and beta >= 0):
        raise ConfigError(f"beta must be finite and non-negative, got {beta}")
    return beta


def contrastive_objective(theta, encoder, pool, anchors, positives, negatives, beta, need_grad=True):
    """Mean of ``-beta s(a, p) + logsumexp_z beta s(a, z)`` over rows.

    ``pool`` holds payloads; ``anchors``/``positives`` are ``(n,)`` and
    ``negatives`` is ``(n, K)``, all indexing into ``pool``. Returns
    ``(loss, grad)`` with ``grad`` None when ``need_grad`` is false.
    """
    beta = _check_beta(beta)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1)
    negatives = np.asarray(negatives, dtype=np.int64)
    n = anchors.size
    if n == 0:
        raise ConfigError("empty batch")
    if negatives.ndim != 2 or negatives.shape[0] != n or negatives.shape[1] == 0:
        raise ConfigError("every anchor needs a non-empty negative list of common length")
    K = negatives.shape[1]

    ua, ia = np.unique(anchors, return_inverse=True)
    uo, io = np.unique(np.concatenate([positives, negatives.ravel()]), return_inverse=True)
    Fa, ca = encoder.forward(theta, pool[ua], "phi")
    Fo, co = encoder.forward(theta, pool[uo], "psi")
    fa = Fa[ia]
    fp = Fo[io[:n]]
    fz = Fo[io[n:]].reshape(n, K, -1)

    s_pos = np.einsum("nd,nd->n", fa, fp)
    logits = beta * np.einsum("nd,nkd->nk", fa, fz)
    loss = float(np.mean(-beta * s_pos + logsumexp(logits, axis=1)))
    if not np.isfinite(loss):
        raise NumericError("contrastive loss is not finite")
    if not need_grad:
        return loss, None

    w = softmax(logits, axis=1)
    dfa = (-beta * fp + beta * np.einsum("nk,nkd->nd", w, fz)) / n
    dfp = -beta * fa / n
    dfz = (beta / n) * w[:, :, None] * fa[:, None, :]
    gA = np.zeros_like(Fa)
    np.add.at(gA, ia, dfa)
    gO = np.zeros_like(Fo)
    np.add.at(gO, io, np.concatenate([dfp, dfz.reshape(n * K, -1)]))
    grad = encoder.backward(theta, ca, gA)
    encoder.backward(theta, co, gO, out=grad)
    return loss, grad


def _all_payloads(data, encoder):
    return data.payloads(np.arange(data.n_items), encoder)


def _anchor_scores(anchor, theta, encoder, data, beta):
    beta = _check_beta(beta)
    negs = data.neg[data.base_of[anchor]]
    pool = data.payloads(np.concatenate([[anchor], negs]), encoder)
    fx, _ = encoder.forward(theta, pool[:1], "phi")
    fz, _ = encoder.forward(theta, pool[1:], "psi")
    return beta * (fz @ fx[0])


def softmax_neg_dist(anchor, theta, encoder, data, beta) -> np.ndarray:
    """Exact softmax over the negative set of anchor item ``anchor``.

    Entries follow the order of ``data.neg[base_of[anchor]]``.
    """
    return softmax(_anchor_scores(anchor, theta, encoder, data, beta))


def log_partition(anchor, theta, encoder, data, beta) -> float:
    return float(logsumexp(_anchor_scores(anchor, theta, encoder, data, beta)))


def _global(theta, encoder, data, beta, need_grad):
    pool = _all_payloads(data, encoder)
    p = data.pairs
    return contrastive_objective(theta, encoder, pool, p[:, 1], p[:, 2], data.neg[p[:, 0]], beta, need_grad)


def global_loss(theta, encoder, data, beta) -> float:
    """Uniform average over all stored positive pairs of the global loss terms."""
    return _global(theta, encoder, data, beta, False)[0]


def exact_grad(theta, encoder, data, beta) -> np.ndarray:
    return _global(theta, encoder, data, beta, True)[1]


def loss_and_grad(theta, encoder, data, beta):
    return _global(theta, encoder, data, beta, True)


def _infonce(theta, encoder, data, pairs, neg_lists, beta, need_grad):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ConfigError("empty batch")
    neg_lists = np.asarray(neg_lists, dtype=np.int64)
    if neg_lists.ndim == 1:
        neg_lists = np.broadcast_to(neg_lists, (pairs.shape[0], neg_lists.size))
    pool = _all_payloads(data, encoder)
    return contrastive_objective(theta, encoder, pool, pairs[:, 0], pairs[:, 1], neg_lists, beta, need_grad)


def infonce_loss(theta, encoder, data, pairs, neg_lists, beta) -> float:
    """Batch InfoNCE: softmax over the supplied negative lists only.

    ``pairs`` is ``(n, 2)`` of (anchor, positive) item ids and ``neg_lists``
    is ``(n, K)`` item ids.
    """
    return _infonce(theta, encoder, data, pairs, neg_lists, beta, False)[0]


def infonce_grad(theta, encoder, data, pairs, neg_lists, beta) -> np.ndarray:
    return _infonce(theta, encoder, data, pairs, neg_lists, beta, True)[1]
