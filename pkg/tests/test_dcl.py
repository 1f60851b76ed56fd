import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crlsc.dcl import DEFAULT_TAU, dcl_loss, dcl_loss_backward
from crlsc.errors import ValidationError


def scalar_dcl(a, p, tau, policy="positives"):
    """Reference loss: plain loops, long-double accumulation."""
    a = [[np.longdouble(x) for x in row] for row in a]
    p = [[np.longdouble(x) for x in row] for row in p]
    t = np.longdouble(tau)
    bsz = len(a)

    def dot(u, v):
        acc = np.longdouble(0)
        for x, y in zip(u, v):
            acc += x * y
        return acc

    def one_dir(z, other):
        losses = []
        for i in range(bsz):
            neg = [other[j] for j in range(bsz) if j != i]
            if policy == "all":
                neg += [z[j] for j in range(bsz) if j != i]
            denom = np.longdouble(0)
            for n in neg:
                denom += np.exp(dot(z[i], n) / t)
            num = np.exp(dot(z[i], other[i]) / t)
            losses.append(-np.log(num / denom))
        return losses

    la, lp = one_dir(a, p), one_dir(p, a)
    return float(sum((x + y) / 2 for x, y in zip(la, lp)) / bsz)


def unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_uniform_similarity_is_log_k():
    e = np.eye(6)
    res = dcl_loss(e[:3], e[3:], tau=0.1)
    assert res.loss == pytest.approx(math.log(2), abs=1e-9)
    assert res.loss == pytest.approx(0.6931, abs=1e-4)


@pytest.mark.parametrize("bsz", [2, 4, 7])
def test_uniform_similarity_general_k(bsz):
    e = np.eye(2 * bsz)
    assert dcl_loss(e[:bsz], e[bsz:]).loss == pytest.approx(math.log(bsz - 1), abs=1e-9)
    assert dcl_loss(e[:bsz], e[bsz:], negatives="all").loss == pytest.approx(math.log(2 * bsz - 2), abs=1e-9)


def test_default_tau():
    assert DEFAULT_TAU == 0.1


def test_matches_scalar_reference():
    rng = np.random.default_rng(20)
    a, p = unit_rows(rng, 2, 2), unit_rows(rng, 2, 2)
    assert dcl_loss(a, p, 0.1).loss == pytest.approx(scalar_dcl(a, p, 0.1), abs=1e-9)
    for policy in ("positives", "all"):
        a, p = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        assert dcl_loss(a, p, 0.3, policy).loss == pytest.approx(scalar_dcl(a, p, 0.3, policy), abs=1e-9)


def test_errors():
    with pytest.raises(ValidationError):
        dcl_loss(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValidationError):
        dcl_loss(np.ones((2, 2)), np.ones((2, 2)), tau=0.0)
    with pytest.raises(ValidationError):
        dcl_loss(np.ones((2, 2)), np.ones((3, 2)))


def _fd_grads(a, p, tau, policy, h=1e-5):
    ga, gp = np.zeros_like(a), np.zeros_like(p)
    for arr, g in ((a, ga), (p, gp)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = dcl_loss(a, p, tau, policy).loss
            arr[idx] = old - h
            fm = dcl_loss(a, p, tau, policy).loss
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
    return ga, gp


def _rel_err(x, y):
    return np.max(np.abs(x - y) / np.maximum(np.abs(x) + np.abs(y), 1e-7))


@pytest.mark.parametrize("policy", ["positives", "all"])
def test_backward_finite_differences(policy):
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(20):
        a, p = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
        res = dcl_loss(a, p, 0.5, policy)
        ga, gp = dcl_loss_backward(res.cache)
        na, np_ = _fd_grads(a, p, 0.5, policy)
        worst = max(worst, _rel_err(ga, na), _rel_err(gp, np_))
    assert worst < 1e-4


def test_backward_symmetric_configuration():
    e = np.eye(6)
    res = dcl_loss(e[:3], e[3:])
    ga, gp = dcl_loss_backward(res.cache)
    norms = np.linalg.norm(np.vstack([ga, gp]), axis=1)
    np.testing.assert_allclose(norms, norms[0], rtol=1e-12)


def test_backward_large_tau_limit():
    rng = np.random.default_rng(22)
    bsz, tau = 6, 1e3
    a, p = unit_rows(rng, bsz, 5), unit_rows(rng, bsz, 5)
    ga, gp = dcl_loss_backward(dcl_loss(a, p, tau).cache)
    # uniform negative weights 1/(B-1) in both directions
    uni = (np.ones((bsz, bsz)) - np.eye(bsz)) / (bsz - 1)
    g_sim = 0.5 / (bsz * tau) * (2 * uni - 2 * np.eye(bsz))
    np.testing.assert_allclose(ga, g_sim @ p, atol=1e-6, rtol=0)
    np.testing.assert_allclose(gp, g_sim.T @ a, atol=1e-6, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_property_shift_invariance(seed, c):
    # with a shared extra coordinate, every anchor dot product shifts by the same c
    rng = np.random.default_rng(seed)
    a, p = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    base = dcl_loss(a, p, 0.2).per_sample
    a2 = np.hstack([a, np.full((4, 1), 1.0)])
    p2 = np.hstack([p, np.full((4, 1), c)])
    shifted = dcl_loss(a2, p2, 0.2).per_sample
    np.testing.assert_allclose(shifted, base, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_property_monotonicity(seed):
    rng = np.random.default_rng(seed)
    a, p = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    base = dcl_loss(a, p, 0.2).per_sample[0]
    # move p0 toward a0: positive similarity up; p0 is also a negative only for other anchors' rows
    a2 = np.hstack([a, [[1.0], [0.0], [0.0], [0.0]]])
    closer = np.hstack([p, [[0.5], [0.0], [0.0], [0.0]]])
    farther = np.hstack([p, [[0.0], [0.5], [0.0], [0.0]]])
    assert dcl_loss(a2, closer, 0.2).per_sample[0] < base
    assert dcl_loss(a2, farther, 0.2).per_sample[0] > base
