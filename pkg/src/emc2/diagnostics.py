"""Exact transition kernels, mixing and perturbation bounds, and bias probes.

Everything here works at a frozen parameter vector. Kernels are indexed by
position in an anchor's negative list, with the column as the source state,
so ``K @ p`` pushes a distribution one M-H step forward.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, DomainError, SizeError
from .encoders import grad_similarity
from .loss import _anchor_scores, exact_grad, global_loss
from .optim import MiniBatchSample, emc2_gradient_estimate

KERNEL_GUARD = 4096
EXACT_TV_GUARD = 64
MIN_REPLICAS = 10_000
MAX_KERNEL_POWER = 16


@dataclass(frozen=True)
class TheoryConstants:
    rho_bar: float
    sigma_bar: float
    L_bar_P: float
    L_bar_H: float
    L_PH_0: float
    L_PH_1: float
    loss_gap_bound: float


@dataclass
class MixingCurve:
    steps: np.ndarray
    tv: np.ndarray
    bound: np.ndarray
    rate: float
    mode: str

    @property
    def rows(self):
        return [(int(t), float(v), float(b)) for t, v, b in zip(self.steps, self.tv, self.bound)]

    def dominated(self, slack=0.0) -> bool:
        return bool(np.all(self.tv <= self.bound + slack))


@dataclass
class KernelMatrix:
    entries: np.ndarray

    @property
    def m_neg(self) -> int:
        return self.entries.shape[0]

    def power(self, R: int) -> np.ndarray:
        return np.linalg.matrix_power(self.entries, R)


@dataclass
class GradBias:
    bias_norm: float
    std_error: float
    mean: np.ndarray
    exact: np.ndarray
    se: np.ndarray

    def within(self, k=3.0) -> bool:
        """Componentwise ``|mean - exact| <= k * se``."""
        return bool(np.all(np.abs(self.mean - self.exact) <= k * self.se))


def feature_bound(encoder) -> float:
    """The constant c with ``||phi||, ||psi|| <= c``."""
    return float(encoder.norm_bound)


def _exp_bound(c, beta):
    return math.exp(2.0 * c * c * beta)


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def kernel_from_scores(scores) -> np.ndarray:
    """M-H kernel with uniform proposals for target ``softmax(scores)``."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    # acc[z', z] = min(1, exp(scores[z'] - scores[z])): accept a move z -> z'
    acc = np.exp(np.minimum(scores[:, None] - scores[None, :], 0.0))
    K = acc / n
    off = acc.copy()
    np.fill_diagonal(off, 1.0)
    # the self-proposal always "moves" to z; every rejected proposal adds to it too
    np.fill_diagonal(K, (1.0 + (1.0 - off).sum(axis=0)) / n)
    return K


def build_exact_kernel(anchor, theta, encoder, data, beta) -> KernelMatrix:
    if data.m_neg > KERNEL_GUARD:
        raise SizeError(f"m_neg = {data.m_neg} exceeds the exact-kernel guard {KERNEL_GUARD}")
    return KernelMatrix(kernel_from_scores(_anchor_scores(anchor, theta, encoder, data, beta)))


def lemma1_rate_bound(B, R, m, m_neg, c, beta) -> float:
    """``1 - BR / (2 m m_neg exp(2 c^2 beta))``, valid while BR <= m m_neg exp(2 c^2 beta)."""
    if min(B, R, m, m_neg) < 1 or c < 0 or beta < 0:
        raise DomainError("B, R, m, m_neg must be positive and c, beta non-negative")
    # BR exp(-2c^2 beta) / (m m_neg) stays finite where exp(2c^2 beta) overflows
    frac = B * R * math.exp(-2.0 * c * c * beta) / (m * m_neg)
    if frac > 1.0 + 1e-12:
        raise DomainError(f"B*R = {B * R} exceeds m*m_neg*exp(2c^2 beta); the rate bound does not apply")
    return 1.0 - frac / 2.0


def empirical_mixing_curve(anchor, theta, encoder, data, beta, max_steps, replicas=MIN_REPLICAS,
                           rng=None, c=None, exact=None) -> MixingCurve:
    """TV distance to the softmax target after tau single-chain steps.

    Exact mode (default for m_neg <= 64) takes the worst point-mass start over
    kernel powers. Sampled mode starts ``replicas`` chains at the least likely
    state and compares histograms.
    """
    c = feature_bound(encoder) if c is None else c
    scores = _anchor_scores(anchor, theta, encoder, data, beta)
    n = scores.size
    pi = softmax(scores)
    exact = n <= EXACT_TV_GUARD if exact is None else exact
    rate = lemma1_rate_bound(1, 1, 1, n, c, beta)
    steps = np.arange(max_steps + 1)
    tv = np.empty(max_steps + 1)
    if exact:
        if n > EXACT_TV_GUARD:
            raise SizeError(f"exact TV needs m_neg <= {EXACT_TV_GUARD}, got {n}")
        K = kernel_from_scores(scores)
        dist = np.eye(n)
        for t in steps:
            tv[t] = 0.5 * np.abs(dist - pi[:, None]).sum(axis=0).max()
            dist = K @ dist
    else:
        if replicas < MIN_REPLICAS:
            raise SizeError(f"sampled TV needs at least {MIN_REPLICAS} replicas")
        rng = np.random.default_rng() if rng is None else rng
        state = np.full(replicas, int(np.argmin(pi)))
        for t in steps:
            tv[t] = tv_distance(np.bincount(state, minlength=n) / replicas, pi)
            prop = rng.integers(n, size=replicas)
            u = rng.random(replicas)
            move = u < np.exp(np.minimum(scores[prop] - scores[state], 0.0))
            state = np.where(move, prop, state)
    return MixingCurve(steps, tv, rate ** steps.astype(np.float64), rate, "exact" if exact else "sampled")


def lemma2_lipschitz_bound(R, B, L_P, c, beta) -> float:
    """``2^(R+1) B L_P exp(2 c^2 beta) beta`` per unit of parameter distance."""
    if R < 1 or B < 1 or L_P < 0 or c < 0 or beta < 0:
        raise DomainError("the Lipschitz bound needs R, B >= 1 and non-negative L_P, c, beta")
    return 2.0 ** (R + 1) * B * L_P * _exp_bound(c, beta) * beta


def r_step_kernel_bound(R, L_P, c, beta, dist) -> float:
    return 2.0 * (2.0 ** R - 1.0) * L_P * _exp_bound(c, beta) * beta * dist


def estimate_similarity_lipschitz(encoder, data, thetas, n_pairs=10_000, rng=None) -> float:
    """Largest ``||H(x, z; theta)||`` over random item pairs and supplied thetas.

    The gradient norm is the worst-direction limit of the difference quotient
    ``|s_theta - s_theta'| / ||theta - theta'||``, so this is an empirical
    lower bound on the true Lipschitz constant.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    thetas = [np.asarray(t) for t in thetas]
    if not thetas:
        raise ConfigError("need at least one parameter vector")
    ids = rng.integers(data.n_items, size=(n_pairs, 2))
    which = rng.integers(len(thetas), size=n_pairs)
    payload = data.payloads(np.arange(data.n_items), encoder)
    best = 0.0
    for (x, z), k in zip(ids, which):
        h = grad_similarity(payload[x], payload[z], thetas[k], encoder)
        best = max(best, float(np.linalg.norm(h)))
    return best


def kernel_perturbation_probe(anchor, theta, theta_prime, encoder, data, beta, R, L_P, c=None):
    """``(max |K_theta^R - K_theta'^R|, R-step analytic bound)``."""
    if not 1 <= R <= MAX_KERNEL_POWER:
        raise SizeError(f"R must lie in [1, {MAX_KERNEL_POWER}], got {R}")
    c = feature_bound(encoder) if c is None else c
    K1 = build_exact_kernel(anchor, theta, encoder, data, beta).power(R)
    K2 = build_exact_kernel(anchor, theta_prime, encoder, data, beta).power(R)
    dist = float(np.linalg.norm(np.asarray(theta) - np.asarray(theta_prime)))
    return float(np.abs(K1 - K2).max()), r_step_kernel_bound(R, L_P, c, beta, dist)


def theory_constants(B, R, m, m_neg, c, beta, L_P, L_H, sigma) -> TheoryConstants:
    rho = lemma1_rate_bound(B, R, m, m_neg, c, beta)
    gap = 1.0 - rho
    e = _exp_bound(c, beta)
    return TheoryConstants(
        rho_bar=rho,
        sigma_bar=2.0 * beta * sigma,
        L_bar_P=lemma2_lipschitz_bound(R, B, L_P, c, beta),
        L_bar_H=2.0 * beta * L_H,
        L_PH_0=2.0 * beta * sigma * rho / gap,
        L_PH_1=6.0 * 2.0 ** (R + 1) * B * e * beta ** 2 * sigma * L_P / gap ** 2 + 2.0 * beta * L_H / gap,
        loss_gap_bound=4.0 * c * c * beta,
    )


def _pair_scores(theta, encoder, data, beta):
    """``beta * s(anchor, z)`` for every stored pair and every negative of its base."""
    payload = data.payloads(np.arange(data.n_items), encoder)
    fphi, _ = encoder.forward(theta, payload, "phi")
    fpsi, _ = encoder.forward(theta, payload, "psi")
    p = data.pairs
    negs = data.neg[p[:, 0]]
    return beta * np.einsum("nd,nkd->nk", fphi[p[:, 1]], fpsi[negs]), negs


def _draw_negatives(scores, K, R, P, negatives, rng):
    n, m_neg = scores.shape
    rows = np.arange(n)
    if negatives == "exact":
        cdf = np.cumsum(softmax(scores, axis=1), axis=1)
        u = rng.random((n, K))
        picks = np.stack([(cdf < u[:, [k]]).sum(axis=1) for k in range(K)], axis=1)
        return np.minimum(picks, m_neg - 1)
    state = rng.integers(m_neg, size=n)
    kept = []
    for r in range(R):
        prop = rng.integers(m_neg, size=n)
        u = rng.random(n)
        move = u < np.exp(np.minimum(scores[rows, prop] - scores[rows, state], 0.0))
        state = np.where(move, prop, state)
        if r >= P:
            kept.append(state)
    return np.stack(kept, axis=1)


def grad_bias_study(theta, encoder, data, config, n_estimates, rng, negatives="mcmc", chunk=None) -> GradBias:
    """Mean of independent EMC² estimates at frozen ``theta`` against the exact gradient.

    Every estimate draws ``batch_size`` stored pairs uniformly with
    replacement and runs a fresh chain per anchor for ``R`` steps, keeping the
    last ``R - P`` states. With ``negatives="exact"`` the chain is replaced by
    i.i.d. softmax draws. Estimates are averaged in equal chunks, and the
    standard error comes from the spread of the chunk means.
    """
    if negatives not in ("mcmc", "exact"):
        raise ConfigError(f"negatives must be 'mcmc' or 'exact', got {negatives!r}")
    R = config.R if config.R is not None else 2
    P = config.P if config.P is not None else R - 1
    if not 0 <= P < R:
        raise ConfigError(f"need 0 <= P < R, got R={R}, P={P}")
    if chunk is None:
        chunk = n_estimates // 100 if n_estimates >= 200 and n_estimates % 100 == 0 else 1
    if n_estimates < 2 * chunk or n_estimates % chunk:
        raise ConfigError("n_estimates must be a multiple of chunk with at least two chunks")
    beta, B, K = config.beta, config.batch_size, R - P
    scores, negs = _pair_scores(theta, encoder, data, beta)
    pairs = data.pairs
    means = []
    for _ in range(n_estimates // chunk):
        rows = rng.integers(pairs.shape[0], size=chunk * B)
        pos = _draw_negatives(scores[rows], K, R, P, negatives, rng)
        z = np.take_along_axis(negs[rows], pos, axis=1)
        sample = MiniBatchSample.from_items(data, encoder, pairs[rows, 1], pairs[rows, 2], z)
        means.append(emc2_gradient_estimate(sample, theta, encoder, beta))
    means = np.asarray(means)
    mean = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / math.sqrt(means.shape[0])
    exact = exact_grad(theta, encoder, data, beta)
    return GradBias(float(np.linalg.norm(mean - exact)), float(np.sqrt((se ** 2).sum())), mean, exact, se)


def grad_bias_estimate(theta, encoder, data, config, n_estimates, rng, negatives="mcmc"):
    """``(bias_norm, std_error)``; the error combines the componentwise standard errors in quadrature."""
    res = grad_bias_study(theta, encoder, data, config, n_estimates, rng, negatives)
    return res.bias_norm, res.std_error


def loss_range(theta, encoder, data, beta, c=None):
    """``(loss, lower, upper)`` with the bounds implied by ``||features|| <= c``."""
    c = feature_bound(encoder) if c is None else c
    base = math.log(data.m_neg)
    return global_loss(theta, encoder, data, beta), base - 2 * c * c * beta, base + 2 * c * c * beta


def loss_range_check(theta, encoder, data, beta, c=None, tol=1e-12) -> bool:
    loss, lo, hi = loss_range(theta, encoder, data, beta, c)
    return lo - tol <= loss <= hi + tol


def min_acceptance_check(theta, encoder, data, beta, c=None):
    """``(min Q over all anchors and state pairs, exp(-2 c^2 beta))``.

    For one anchor the smallest ratio is ``exp(beta (min s - max s))``, so the
    minimum over all triples is exact without enumerating them.
    """
    c = feature_bound(encoder) if c is None else c
    payload = data.payloads(np.arange(data.n_items), encoder)
    fphi, _ = encoder.forward(theta, payload, "phi")
    fpsi, _ = encoder.forward(theta, payload, "psi")
    s = np.einsum("nd,nkd->nk", fphi, fpsi[data.neg[data.base_of]])
    spread = float((s.max(axis=1) - s.min(axis=1)).max())
    return math.exp(-beta * spread), math.exp(-2.0 * c * c * beta)


def report_entry(name, inputs, measured, bound, passed) -> dict:
    return {"name": name, "inputs": inputs, "measured": measured, "bound": bound, "pass": bool(passed)}


def write_report(path, entries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=2, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, TheoryConstants):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def finite_difference_grad(fn, theta, h=1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    work = theta.copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        work[i] = theta[i] + h
        up = fn(work)
        work[i] = theta[i] - h
        down = fn(work)
        work[i] = theta[i]
        grad[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """``max |a - b|`` scaled by ``max(1, max |b|)``.

    Relative for gradients of unit size or larger and absolute below that, so
    finite-difference rounding noise around an exactly zero gradient does not
    count as a 100% error.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1.0))
