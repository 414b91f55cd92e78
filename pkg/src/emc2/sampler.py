"""Multi-state Metropolis-Hastings negative sampler.

One chain state per anchor group is kept in a :class:`ChainTable` and carried
across optimizer iterations. Proposals are uniform over the negative set (or
over the other in-batch views), and a proposal ``z'`` replaces the current
state ``z`` with probability ``min(1, exp(beta * (s(x, z') - s(x, z))))``, so
no partition function is ever evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .loss import softmax_neg_dist
from .rng import INIT_CHAIN, RandomStream


@dataclass
class ChainTable:
    states: np.ndarray
    touched: np.ndarray

    @classmethod
    def initialize(cls, data, stream: RandomStream):
        """Draw every Z_i uniformly from its negative set."""
        states = np.empty(data.m, dtype=np.int64)
        for i in range(data.m):
            g = stream.generator(INIT_CHAIN, 0, i)
            states[i] = data.neg[i][g.integers(data.m_neg)]
        return cls(states, np.full(data.m, -1, dtype=np.int64))

    def copy(self):
        return ChainTable(self.states.copy(), self.touched.copy())

    def validate(self, data):
        if self.states.shape != (data.m,):
            raise ConfigError(f"chain table covers {self.states.size} anchors, dataset has {data.m}")
        for i, z in enumerate(self.states):
            if z not in data.neg[i]:
                raise ConfigError(f"chain state {z} of anchor {i} is not one of its negatives")


def _sim_rows(theta, encoder, data, anchors, others, iteration):
    """Similarities ``s(anchor_n, other_nk)`` for ``(n,)`` anchors and ``(n, K)`` others."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    others = np.asarray(others, dtype=np.int64).reshape(anchors.size, -1)
    ua, ia = np.unique(anchors, return_inverse=True)
    uo, io = np.unique(others, return_inverse=True)
    fa, _ = encoder.forward(theta, data.payloads(ua, encoder, iteration), "phi")
    fo, _ = encoder.forward(theta, data.payloads(uo, encoder, iteration), "psi")
    s = np.einsum("nd,nkd->nk", fa[ia], fo[io.reshape(others.shape)])
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite similarity")
    return s


def mh_accept_ratio(anchor, z_new, z_old, theta, encoder, data, beta, iteration=None) -> float:
    """Q(z_new, z_old) = exp(beta * (s(x, z_new) - s(x, z_old)))."""
    s = _sim_rows(theta, encoder, data, [anchor], [[z_new, z_old]], iteration)[0]
    return float(np.exp(beta * (s[0] - s[1])))


def mh_step(anchor, state, candidates, theta, encoder, data, beta, draw, iteration=None):
    """One M-H transition from ``state``; ``draw = (proposal slot, uniform)``.

    The uniform is only consulted when the acceptance ratio is below one.
    """
    if len(candidates) == 0:
        raise ConfigError("empty negative set")
    slot, u = draw
    proposal = int(candidates[slot])
    q = mh_accept_ratio(anchor, proposal, state, theta, encoder, data, beta, iteration)
    if q >= 1.0 or u < q:
        return proposal
    return int(state)


def run_chain_segment(chains, base, anchor, theta, encoder, data, beta, R, P, stream, iteration=0):
    """R sequential steps of chain ``base`` for anchor item ``anchor``.

    Returns the last ``R - P`` states and writes the final one back.
    Reference (unvectorized) path; training uses :func:`advance_chains`.
    """
    if not 0 <= P < R:
        raise ConfigError(f"need 0 <= P < R, got P={P}, R={R}")
    candidates = data.neg[base]
    idx, u = stream.chain_draws(iteration, base, R, candidates.size)
    state = int(chains.states[base])
    kept = []
    for r in range(R):
        state = mh_step(anchor, state, candidates, theta, encoder, data, beta, (idx[0, r], u[0, r]), iteration)
        if r >= P:
            kept.append(state)
    chains.states[base] = state
    chains.touched[base] = iteration
    return kept


def _sweep(beta, s0, s_prop, u, P):
    """Vectorized M-H over ``n`` independent chains with precomputed similarities.

    Returns ``(final, kept)`` as proposal step indices, -1 meaning the
    starting state.
    """
    n, R = s_prop.shape
    pick = np.full(n, -1, dtype=np.int64)
    cur = s0.copy()
    kept = np.empty((n, R - P), dtype=np.int64)
    with np.errstate(over="ignore"):
        for r in range(R):
            q = np.exp(beta * (s_prop[:, r] - cur))
            # u < 1, so q >= 1 always accepts without looking at u
            acc = u[:, r] < q
            pick = np.where(acc, r, pick)
            cur = np.where(acc, s_prop[:, r], cur)
            if r >= P:
                kept[:, r - P] = pick
    return pick, kept


def _resolve(pick, proposals, start):
    full = np.concatenate([start[:, None], proposals], axis=1)
    return np.take_along_axis(full, pick + 1, axis=1)


def advance_chains(chains, bases, anchors, theta, encoder, data, beta, R, P, stream, iteration):
    """Vectorized :func:`run_chain_segment` over a mini-batch of anchor groups.

    Each chain reads only its own stream, so the result does not depend on
    the order of ``bases``. Returns retained states, shape ``(B, R - P)``.
    """
    if not 0 <= P < R:
        raise ConfigError(f"need 0 <= P < R, got P={P}, R={R}")
    bases = np.asarray(bases, dtype=np.int64)
    B = bases.size
    idx = np.empty((B, R), dtype=np.int64)
    u = np.empty((B, R))
    for k, i in enumerate(bases):
        a, b = stream.chain_draws(iteration, int(i), R, data.m_neg)
        idx[k], u[k] = a[0], b[0]
    proposals = data.neg[bases[:, None], idx]
    start = chains.states[bases]
    s = _sim_rows(theta, encoder, data, anchors, np.concatenate([start[:, None], proposals], axis=1), iteration)
    pick, kept = _sweep(beta, s[:, 0], s[:, 1:], u, P)
    chains.states[bases] = _resolve(pick[:, None], proposals, start)[:, 0]
    chains.touched[bases] = iteration
    return _resolve(kept, proposals, start)


def in_batch_candidates(views):
    """Batch layout and per-base eligible proposals for a ``(b, 2)`` view table.

    The batch is ``[x_1', ..., x_b', x_1'', ..., x_b'']``; base ``j`` may
    propose any batch item except its own two views.
    """
    views = np.asarray(views, dtype=np.int64)
    b = views.shape[0]
    if b < 2:
        raise ConfigError("in-batch sampling needs at least two bases per batch")
    batch = np.concatenate([views[:, 0], views[:, 1]])
    cols = np.arange(2 * b)
    eligible = np.stack([batch[(cols != j) & (cols != b + j)] for j in range(b)])
    return batch, eligible


def in_batch_mh(chains, bases, views, theta, encoder, data, beta, P, stream, iteration):
    """M-H over the in-batch views, R = 2b - 2 steps per anchor view.

    Both views of base ``j`` share chain ``j``: the first view runs its R
    steps, then the second view continues from the resulting state.
    Returns ``(anchors, positives, retained)`` over the 2b anchor views.
    """
    bases = np.asarray(bases, dtype=np.int64)
    batch, eligible = in_batch_candidates(views)
    b = bases.size
    R = 2 * b - 2
    if not 0 <= P < R:
        raise ConfigError(f"in-batch burn-in must satisfy 0 <= P < 2b - 2 = {R}, got {P}")
    idx = np.empty((2, b, R), dtype=np.int64)
    u = np.empty((2, b, R))
    for k, j in enumerate(bases):
        a, w = stream.chain_draws(iteration, int(j), R, R, lanes=2)
        idx[:, k], u[:, k] = a, w
    views = np.asarray(views, dtype=np.int64)
    retained = np.empty((2, b, R - P), dtype=np.int64)
    state = chains.states[bases].copy()
    for v in range(2):
        proposals = np.take_along_axis(eligible, idx[v], axis=1)
        anchors = views[:, v]
        s = _sim_rows(theta, encoder, data, anchors, np.concatenate([state[:, None], proposals], axis=1), iteration)
        pick, kept = _sweep(beta, s[:, 0], s[:, 1:], u[v], P)
        retained[v] = _resolve(kept, proposals, state)
        state = _resolve(pick[:, None], proposals, state)[:, 0]
    chains.states[bases] = state
    chains.touched[bases] = iteration
    anchors = batch
    positives = np.concatenate([views[:, 1], views[:, 0]])
    return anchors, positives, retained.reshape(2 * b, R - P)


def sample_exact_negatives(anchors, k, theta, encoder, data, beta, rng):
    """Oracle sampler: ``k`` i.i.d. draws per anchor from the exact softmax."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    out = np.empty((anchors.size, k), dtype=np.int64)
    cache = {}
    for n, a in enumerate(anchors):
        if a not in cache:
            cache[a] = softmax_neg_dist(a, theta, encoder, data, beta)
        negs = data.neg[data.base_of[a]]
        out[n] = negs[rng.choice(negs.size, size=k, p=cache[a])]
    return out
