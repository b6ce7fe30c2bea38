import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarse2fine.errors import InfeasibleRelationError
from coarse2fine.losses import (EPS, LossWeights, coarse_loss, confidence_loss, entropy_reg,
                                fine_loss, neighbor_loss, sibling_mask, target_q, total_loss)
from coarse2fine.nncore import softmax_rows


def random_relation(rng, k_f, k_c):
    while True:
        a = rng.integers(0, k_c, size=k_f)
        if np.bincount(a, minlength=k_c).min() >= 1:
            m = np.zeros((k_f, k_c), dtype=np.int64)
            m[np.arange(k_f), a] = 1
            return m


def random_problem(rng, n=6, k_f=5, k_c=2, n_nb=3):
    m = random_relation(rng, k_f, k_c)
    labels = rng.integers(0, k_c, size=n)
    return dict(
        logits=rng.normal(size=(n, k_f)),
        ema_logits=rng.normal(size=(n, k_f)),
        neighbor_probs=softmax_rows(rng.normal(size=(n * n_nb, k_f))).reshape(n, n_nb, k_f),
        siblings=sibling_mask(m, labels),
        relation=m,
        labels=labels,
    )


# scalar references ---------------------------------------------------------------

def ref_coarse(p, m, labels):
    total = 0.0
    for n, y in enumerate(labels):
        total -= math.log(sum(p[n][i] for i in range(len(p[n])) if m[i][y] == 1))
    return total / len(labels)


def ref_conf(q, p):
    return -sum(q[n][i] * math.log(p[n][i]) for n in range(len(p)) for i in range(len(p[n]))) / len(p)


def ref_masked_softmax(s, members, t):
    e = {i: math.exp(s[i] / t) for i in members}
    z = sum(e.values())
    return [e[i] / z if i in e else 0.0 for i in range(len(s))]


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5):
    scale = max(1.0, np.abs(numeric).max())
    assert np.abs(analytic - numeric).max() <= rtol * scale


# coarse ---------------------------------------------------------------------------

def test_coarse_identity_one_hot_is_zero():
    m = np.eye(3, dtype=int)
    p = np.eye(3)[[0, 2, 1]]
    labels = np.array([0, 2, 1])
    assert coarse_loss(p, sibling_mask(m, labels)).value == pytest.approx(0.0, abs=1e-15)


def test_coarse_uniform_two_per_coarse():
    m = np.array([[1, 0], [1, 0], [0, 1], [0, 1]])
    p = np.full((3, 4), 0.25)
    assert coarse_loss(p, sibling_mask(m, [0, 1, 1])).value == pytest.approx(-math.log(0.5), rel=1e-14)


def test_coarse_matches_scalar_reference(rng):
    prob = random_problem(rng, n=8, k_f=6, k_c=3)
    p = softmax_rows(prob["logits"])
    term = coarse_loss(p, prob["siblings"])
    assert term.value == pytest.approx(ref_coarse(p.tolist(), prob["relation"].tolist(), prob["labels"]),
                                       rel=1e-13)
    num = fd_grad(lambda x: ref_coarse(x.tolist(), prob["relation"].tolist(), prob["labels"]), p)
    assert_grad_close(term.grad, num)


def test_coarse_clamps_zero_mass():
    m = np.array([[1, 0], [0, 1]])
    term = coarse_loss(np.array([[1.0, 0.0]]), sibling_mask(m, [1]))
    assert term.clamped == 1
    assert term.value == pytest.approx(-math.log(EPS))
    assert not term.grad.any()


@pytest.mark.parametrize("seed", range(20))
def test_coarse_gradient_equal_on_siblings(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, n=5, k_f=7, k_c=3)
    p = softmax_rows(prob["logits"])
    g = coarse_loss(p, prob["siblings"]).grad
    for n in range(5):
        sib = prob["siblings"][n]
        assert np.all(g[n, ~sib] == 0.0)
        assert np.all(g[n, sib] == g[n, sib][0])


# neighbour -------------------------------------------------------------------------

def test_neighbor_same_one_hot_is_zero():
    p = np.array([[0.0, 1.0, 0.0]])
    assert neighbor_loss(p, p[:, None, :]).value == 0.0


def test_neighbor_orthogonal_hits_clamp():
    p = np.array([[0.0, 1.0, 0.0]])
    nb = np.array([[[1.0, 0.0, 0.0]]])
    term = neighbor_loss(p, nb)
    assert term.clamped == 1
    assert term.value == pytest.approx(-math.log(EPS))


def test_neighbor_uniform():
    p = np.full((2, 5), 0.2)
    nb = np.full((2, 4, 5), 0.2)
    assert neighbor_loss(p, nb).value == pytest.approx(-math.log(1 / 5), rel=1e-14)


def test_neighbor_gradient_fd(rng):
    prob = random_problem(rng)
    p = softmax_rows(prob["logits"])
    nb = prob["neighbor_probs"]
    num = fd_grad(lambda x: neighbor_loss(x, nb).value, p)
    assert_grad_close(neighbor_loss(p, nb).grad, num)


# target ----------------------------------------------------------------------------

def test_target_single_sibling_is_one_hot():
    m = np.array([[1, 0], [0, 1], [0, 1]])
    q = target_q(np.array([[5.0, 1.0, 2.0]]), sibling_mask(m, [0]), 0.9)
    np.testing.assert_array_equal(q, [[1.0, 0.0, 0.0]])


def test_target_equal_logits_uniform_on_siblings():
    m = np.array([[1, 0], [0, 1], [1, 0], [1, 0]])
    q = target_q(np.array([[2.0, -7.0, 2.0, 2.0]]), sibling_mask(m, [0]), 0.9)
    np.testing.assert_allclose(q, [[1 / 3, 0.0, 1 / 3, 1 / 3]], atol=1e-15)


def test_target_masked_softmax_reference():
    m = np.array([[1, 0], [0, 1], [1, 0]])
    q = target_q(np.array([[1.0, 2.0, 3.0]]), sibling_mask(m, [0]), 0.9)
    np.testing.assert_allclose(q[0], ref_masked_softmax([1.0, 2.0, 3.0], {0, 2}, 0.9), rtol=1e-14)


def test_target_empty_siblings_rejected():
    with pytest.raises(InfeasibleRelationError):
        target_q(np.zeros((1, 2)), np.array([[False, False]]), 1.0)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_target_support_and_mass(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, n=4, k_f=6, k_c=3)
    q = target_q(prob["ema_logits"] * 10, prob["siblings"], 0.9)
    assert np.all(q[~prob["siblings"]] == 0.0)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


# confidence -------------------------------------------------------------------------

def test_confidence_at_equality_is_entropy(rng):
    q = softmax_rows(rng.normal(size=(4, 5)))
    entropy = -np.sum(q * np.log(q)) / 4
    assert confidence_loss(q, q).value == pytest.approx(entropy, rel=1e-13)


def test_confidence_one_hot_match_is_zero():
    q = np.array([[0.0, 1.0]])
    assert confidence_loss(q, q).value == 0.0


def test_confidence_reference_and_logit_gradient(rng):
    q = softmax_rows(rng.normal(size=(5, 4)))
    logits = rng.normal(size=(5, 4))
    p = softmax_rows(logits)
    assert confidence_loss(q, p).value == pytest.approx(ref_conf(q.tolist(), p.tolist()), rel=1e-13)
    from coarse2fine.nncore import softmax_backward
    g = softmax_backward(p, confidence_loss(q, p).grad)
    np.testing.assert_allclose(g, (p - q) / 5, atol=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_confidence_bounded_by_entropy(seed):
    rng = np.random.default_rng(seed)
    q = softmax_rows(rng.normal(size=(3, 4)))
    p = softmax_rows(rng.normal(size=(3, 4)))
    entropy = -np.sum(q * np.log(q)) / 3
    assert confidence_loss(q, p).value >= entropy - 1e-12


# fine / reg / total ---------------------------------------------------------------

def test_fine_is_sum_of_parts(rng):
    prob = random_problem(rng)
    p = softmax_rows(prob["logits"])
    q = target_q(prob["ema_logits"], prob["siblings"], 0.9)
    whole = fine_loss(p, prob["neighbor_probs"], q)
    parts = neighbor_loss(p, prob["neighbor_probs"]).value + confidence_loss(q, p).value
    assert abs(whole.value - parts) <= 1e-12


def test_entropy_reg_values():
    assert entropy_reg(np.full((3, 4), 0.25)).value == 0.0
    assert entropy_reg(np.array([[1.0, 0, 0, 0]])).value == pytest.approx(math.log(4), rel=1e-15)
    expected = math.log(3) + 0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25)
    assert entropy_reg(np.array([[0.5, 0.25, 0.25]])).value == pytest.approx(expected, rel=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_entropy_reg_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = softmax_rows(rng.normal(scale=3, size=(5, 6)))
    assert entropy_reg(p).value >= 0.0


def test_entropy_reg_gradient_fd(rng):
    p = softmax_rows(rng.normal(size=(6, 4)))
    num = fd_grad(lambda x: entropy_reg(x).value, p)
    assert_grad_close(entropy_reg(p).grad, num)


def test_total_weights_select_terms(rng):
    prob = random_problem(rng)
    args = (prob["logits"], prob["siblings"], prob["neighbor_probs"], prob["ema_logits"])
    only_coarse = total_loss(*args, LossWeights(lambda1=1, lambda2=0, lambda3=0))
    assert only_coarse.value == pytest.approx(coarse_loss(softmax_rows(prob["logits"]), prob["siblings"]).value,
                                              rel=1e-15)
    zero = total_loss(*args, LossWeights(lambda1=0, lambda2=0, lambda3=0))
    assert zero.value == 0.0 and not zero.grad_logits.any()


def test_total_default_weights_is_weighted_sum(rng):
    prob = random_problem(rng)
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3) == (0.5, 0.5, 2.0)
    t = total_loss(prob["logits"], prob["siblings"], prob["neighbor_probs"], prob["ema_logits"], w)
    p = softmax_rows(prob["logits"])
    q = target_q(prob["ema_logits"], prob["siblings"], w.temperature)
    expected = (0.5 * coarse_loss(p, prob["siblings"]).value
                + 0.5 * (neighbor_loss(p, prob["neighbor_probs"]).value + confidence_loss(q, p).value)
                + 2.0 * entropy_reg(p).value)
    assert t.value == pytest.approx(expected, rel=1e-14)


def test_total_gradient_fd(rng):
    prob = random_problem(rng)
    w = LossWeights()
    args = (prob["siblings"], prob["neighbor_probs"], prob["ema_logits"], w)
    num = fd_grad(lambda s: total_loss(s, *args).value, prob["logits"])
    assert_grad_close(total_loss(prob["logits"], *args).grad_logits, num)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
    with pytest.raises(ValueError):
        LossWeights(gamma=1.0)
