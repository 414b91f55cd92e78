import json
import math

import numpy as np
import pytest
from scipy.special import softmax

from emc2.diagnostics import (_anchor_scores, build_exact_kernel, empirical_mixing_curve, estimate_similarity_lipschitz,
                              finite_difference_grad, kernel_from_scores, kernel_perturbation_probe,
                              lemma1_rate_bound, lemma2_lipschitz_bound, loss_range, loss_range_check,
                              min_acceptance_check, r_step_kernel_bound, relative_error, report_entry,
                              theory_constants, tv_distance, write_report)
from emc2.encoders import grad_similarity
from emc2.errors import ConfigError, DomainError, SizeError

from conftest import KINDS, make_data, make_encoder, make_theta


def test_lemma1_frozen_values():
    assert lemma1_rate_bound(1, 1, 1, 4, 0.0, 5.0) == 0.875
    assert abs(lemma1_rate_bound(1, 1, 1, 4, 1.0, 0.5) - 0.9540150) < 1e-7
    # BR = m m_neg at c = 0 is the edge of the domain
    assert lemma1_rate_bound(2, 4, 2, 4, 0.0, 1.0) == 0.5
    with pytest.raises(DomainError):
        lemma1_rate_bound(3, 4, 2, 4, 0.0, 1.0)
    with pytest.raises(DomainError):
        lemma1_rate_bound(0, 1, 1, 4, 1.0, 1.0)
    with pytest.raises(DomainError):
        lemma1_rate_bound(1, 1, 1, 4, 1.0, -1.0)
    # no overflow for huge beta: the rate tends to 1
    assert lemma1_rate_bound(1, 1, 1, 4, 1.0, 1e6) == 1.0


def test_lemma2_frozen_values():
    assert lemma2_lipschitz_bound(2, 1, 1.0, 0.0, 1.0) == 8.0
    assert lemma2_lipschitz_bound(2, 1, 1.0, 1.0, 0.0) == 0.0
    assert lemma2_lipschitz_bound(3, 1, 1.0, 0.0, 1.0) == 16.0
    assert lemma2_lipschitz_bound(2, 3, 1.0, 0.0, 1.0) == 24.0
    with pytest.raises(DomainError):
        lemma2_lipschitz_bound(0, 1, 1.0, 0.0, 1.0)
    assert r_step_kernel_bound(1, 1.0, 0.0, 1.0, 1.0) == 2.0
    assert r_step_kernel_bound(3, 0.5, 0.0, 2.0, 0.1) == pytest.approx(2 * 7 * 0.5 * 2.0 * 0.1, rel=1e-15)


def test_uniform_target_kernel():
    np.testing.assert_array_equal(kernel_from_scores([0.0, 0.0]), np.full((2, 2), 0.5))
    np.testing.assert_allclose(kernel_from_scores(np.zeros(5)), np.full((5, 5), 0.2), atol=1e-16)


def test_two_state_kernel_hand_values():
    K = kernel_from_scores([0.0, math.log(2.0)])
    np.testing.assert_allclose(K, [[0.5, 0.25], [0.5, 0.75]], atol=1e-15)
    np.testing.assert_allclose(K @ [1 / 3, 2 / 3], [1 / 3, 2 / 3], atol=1e-15)
    # the smallest off-diagonal move probability is exp(-beta spread) / n
    K = kernel_from_scores([0.0, -2.0])
    assert abs(2 * K[1, 0] - 0.1353353) < 1e-7


@pytest.mark.parametrize("kind", KINDS)
def test_kernel_identities(kind):
    data = make_data(m=5, views=2)
    enc = make_encoder(kind, data)
    theta = make_theta(enc, 3, 2.0)
    for anchor in range(data.n_items):
        K = build_exact_kernel(anchor, theta, enc, data, 5.0).entries
        np.testing.assert_allclose(K.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(K >= 0)
        pi = softmax(_anchor_scores(anchor, theta, enc, data, 5.0))
        flow = K * pi[None, :]
        np.testing.assert_allclose(flow, flow.T, atol=1e-12)
        np.testing.assert_allclose(K @ pi, pi, atol=1e-12)


def test_tv_distance():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([0.2, 0.8], [0.6, 0.4]) == pytest.approx(0.4, abs=1e-15)


def test_mixing_curve_exact(small):
    data, enc, theta = small
    curve = empirical_mixing_curve(0, theta, enc, data, 1e-300, 5)
    assert curve.mode == "exact"
    assert curve.tv[0] == pytest.approx(1 - 1 / data.m_neg, abs=1e-12)
    assert curve.tv[1] < 1e-12
    curve = empirical_mixing_curve(0, theta, enc, data, 5.0, 50)
    pi = softmax(_anchor_scores(0, theta, enc, data, 5.0))
    assert curve.tv[0] == pytest.approx(1 - pi.min(), abs=1e-12)
    assert np.all(np.diff(curve.tv) <= 1e-12)
    assert curve.dominated()
    assert curve.rows[0] == (0, curve.tv[0], 1.0)


def test_mixing_curve_sampled(small):
    data, enc, theta = small
    curve = empirical_mixing_curve(0, theta, enc, data, 1.0, 40, rng=np.random.default_rng(0), exact=False)
    exact = empirical_mixing_curve(0, theta, enc, data, 1.0, 40)
    assert curve.mode == "sampled"
    assert curve.tv[-1] < 0.03
    assert np.all(curve.tv <= exact.tv + 0.03)
    with pytest.raises(SizeError):
        empirical_mixing_curve(0, theta, enc, data, 1.0, 5, replicas=100, exact=False)


def _theory_oracle(B, R, m, m_neg, c, beta, L_P, L_H, sigma):
    rho = 1 - B * R / (2 * m * m_neg * math.exp(2 * c * c * beta))
    D = 1 - rho
    LP = 2 ** (R + 1) * B * L_P * math.exp(2 * c * c * beta) * beta
    return dict(rho_bar=rho, sigma_bar=2 * beta * sigma, L_bar_P=LP, L_bar_H=2 * beta * L_H,
                L_PH_0=2 * beta * sigma * rho / D,
                L_PH_1=6 * 2 ** (R + 1) * B * math.e ** (2 * c * c * beta) * beta ** 2 * sigma * L_P / D ** 2
                + 2 * beta * L_H / D,
                loss_gap_bound=4 * c * c * beta)


@pytest.mark.parametrize("args", [
    (4, 6, 100, 198, 1.0, 5.0, 2.0, 3.0, 1.5),
    (1, 1, 10, 9, 0.5, 0.1, 1.0, 1.0, 1.0),
    (2, 3, 5, 8, 1.0, 1.0, 0.3, 7.0, 0.0),
])
def test_theory_constants_match_oracle(args):
    got = theory_constants(*args)
    for k, v in _theory_oracle(*args).items():
        assert getattr(got, k) == pytest.approx(v, rel=1e-12, abs=1e-300), k


def test_theory_constants_degenerate_cases():
    t = theory_constants(2, 3, 5, 8, 1.0, 1.0, 0.3, 7.0, 0.0)
    assert t.sigma_bar == 0.0 and t.L_PH_0 == 0.0
    t = theory_constants(2, 3, 5, 8, 1.0, 0.0, 0.3, 7.0, 1.0)
    assert t.L_bar_P == t.L_PH_0 == t.L_PH_1 == t.loss_gap_bound == 0.0


def test_perturbation_probe(small):
    data, enc, theta = small
    measured, bound = kernel_perturbation_probe(0, theta, theta, enc, data, 5.0, 2, 1.0)
    assert measured == 0.0 and bound == 0.0
    other = theta + 0.1
    measured, bound = kernel_perturbation_probe(0, theta, other, enc, data, 0.0, 2, 1.0)
    assert measured < 1e-15 and bound == 0.0
    L_P = estimate_similarity_lipschitz(enc, data, [theta, other], n_pairs=2000)
    measured, bound = kernel_perturbation_probe(0, theta, theta + 1e-3, enc, data, 5.0, 4, 1.5 * L_P)
    assert 0 < measured <= bound
    with pytest.raises(SizeError):
        kernel_perturbation_probe(0, theta, theta, enc, data, 5.0, 17, 1.0)


def test_similarity_lipschitz_estimate(small):
    data, enc, theta = small
    a = estimate_similarity_lipschitz(enc, data, [theta], n_pairs=500, rng=np.random.default_rng(4))
    b = estimate_similarity_lipschitz(enc, data, [theta], n_pairs=500, rng=np.random.default_rng(4))
    assert a == b
    payload = data.payloads(np.arange(data.n_items), enc)
    every = max(np.linalg.norm(grad_similarity(payload[x], payload[z], theta, enc))
                for x in range(data.n_items) for z in range(data.n_items))
    assert 0 < a <= every + 1e-15
    with pytest.raises(ConfigError):
        estimate_similarity_lipschitz(enc, data, [])


def test_size_guards():
    big = make_data(m=4098, views=1, input_dim=2)
    enc = make_encoder("linear", big, d=2)
    theta = make_theta(enc)
    with pytest.raises(SizeError):
        build_exact_kernel(0, theta, enc, big, 1.0)
    mid = make_data(m=66, views=1, input_dim=2)
    enc = make_encoder("linear", mid, d=2)
    with pytest.raises(SizeError):
        empirical_mixing_curve(0, make_theta(enc), enc, mid, 1.0, 3, exact=True)
    assert empirical_mixing_curve(0, make_theta(enc), enc, mid, 1.0, 3, rng=np.random.default_rng(0)).mode == "sampled"


@pytest.mark.parametrize("kind", KINDS)
def test_loss_range_and_acceptance(kind):
    data = make_data(m=6, views=2)
    enc = make_encoder(kind, data)
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = make_theta(enc, int(rng.integers(1 << 30)), 3.0)
        assert loss_range_check(theta, enc, data, 5.0)
        loss, lo, hi = loss_range(theta, enc, data, 5.0)
        assert lo == pytest.approx(math.log(data.m_neg) - 10.0) and hi == pytest.approx(math.log(data.m_neg) + 10.0)
        q, bound = min_acceptance_check(theta, enc, data, 5.0)
        assert bound == pytest.approx(math.exp(-10.0)) and q >= bound


def test_min_acceptance_matches_enumeration(small):
    data, enc, theta = small
    best = min(math.exp(a - b) for x in range(data.n_items) for s in [_anchor_scores(x, theta, enc, data, 2.0)]
               for a in s for b in s)
    assert min_acceptance_check(theta, enc, data, 2.0)[0] == pytest.approx(best, rel=1e-12)


def test_report_schema(tmp_path):
    entry = report_entry("k", {"beta": np.float64(5.0), "R": 2}, np.array([0.1, 0.2]), 1.0, np.bool_(True))
    write_report(tmp_path / "sub" / "r.json", [entry])
    doc = json.loads((tmp_path / "sub" / "r.json").read_text())
    assert doc == [{"name": "k", "inputs": {"beta": 5.0, "R": 2}, "measured": [0.1, 0.2], "bound": 1.0, "pass": True}]


def test_finite_difference_and_relative_error():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.5, -1.0])
    fd = finite_difference_grad(lambda t: 0.5 * t @ A @ t, x)
    np.testing.assert_allclose(fd, A @ x, atol=1e-9)
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.1, 2.0], [1.0, 2.0]) == pytest.approx(0.05)
    assert relative_error([1e-11], [0.0]) == pytest.approx(1e-11)
    assert relative_error([0.011], [0.01]) == pytest.approx(1e-3)
