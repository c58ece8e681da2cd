import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adail import autodiff as ad
from adail.discriminator import (Normalizer, disc_forward, disc_update_cls, disc_update_reg,
                                 imitation_reward, make_discriminator, reg_gradients, reward_from_prob)


def make(k=2, seed=0, **kw):
    return make_discriminator(4, 2, k, np.random.default_rng(seed), **kw)


def batch(n, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 4)) + shift, rng.normal(size=(n, 2)) + shift


def snapshot(net):
    return {k: v.copy() for k, v in net.entries.items()}


def unchanged(net, snap):
    return all(np.array_equal(net.entries[k], snap[k]) for k in snap)


def test_zero_weight_outputs_half():
    d = make(zero=True)
    s, a = batch(5)
    p, c = disc_forward(d, s, a)
    np.testing.assert_array_equal(p, 0.5)
    assert c.shape == (5, 2)
    assert make(k=1).k == 1


def test_forward_is_pure_and_bounded():
    d = make()
    s, a = batch(7)
    p1, c1 = disc_forward(d, s, a)
    p2, c2 = disc_forward(d, s, a)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(c1, c2)
    assert np.all((p1 > 0) & (p1 < 1))


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="input width"):
        disc_forward(make(), np.zeros((2, 3)), np.zeros((2, 2)))


def test_reward_examples():
    assert reward_from_prob(0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert reward_from_prob(0.0) == 0.0
    assert reward_from_prob(1 - 1e-12) == 10.0
    assert reward_from_prob(1.0) == 10.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_reward_monotone_and_bounded(p, q):
    lo, hi = sorted((p, q))
    r_lo, r_hi = reward_from_prob(lo), reward_from_prob(hi)
    assert 0.0 <= r_lo <= r_hi <= 10.0


def test_logit_reward_matches_probability_reward():
    d = make()
    s, a = batch(20)
    p, _ = disc_forward(d, s, a)
    np.testing.assert_allclose(imitation_reward(d, s, a), reward_from_prob(p), atol=1e-12)


def test_zero_weight_balanced_loss_is_ln2():
    d = make(zero=True)
    s, a = batch(8)
    out = disc_update_cls(d, s, a, s, a)
    assert out["cls_loss"] == pytest.approx(math.log(2), abs=1e-12)


def test_separable_blobs_reach_full_accuracy():
    d = make(lr=1e-2)
    sp, ap = batch(64, 1, shift=-1.5)
    se, ae = batch(64, 2, shift=1.5)
    for _ in range(200):
        out = disc_update_cls(d, sp, ap, se, ae)
    assert out["cls_acc"] == 1.0


def test_identical_data_stays_near_chance():
    d = make(lr=1e-3)
    s, a = batch(64, 3)
    for _ in range(50):
        out = disc_update_cls(d, s, a, s, a)
    assert out["cls_loss"] == pytest.approx(math.log(2), abs=0.01)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        disc_update_cls(make(), np.zeros((0, 4)), np.zeros((0, 2)), *batch(3))


def test_cls_update_leaves_reg_head_and_reg_update_leaves_cls_head():
    d = make()
    s, a = batch(16)
    reg = snapshot(d.reg_head)
    disc_update_cls(d, s, a, *batch(16, 5))
    assert unchanged(d.reg_head, reg)
    cls = snapshot(d.cls_head)
    disc_update_reg(d, s, a, np.zeros((16, 2)))
    assert unchanged(d.cls_head, cls)


def test_lambda_zero_freezes_trunk_but_reg_head_learns():
    d = make(lambda_grl=0.0)
    s, a = batch(16)
    trunk, reg = snapshot(d.trunk), snapshot(d.reg_head)
    disc_update_reg(d, s, a, np.full((16, 2), 0.3))
    assert unchanged(d.trunk, trunk)
    assert not unchanged(d.reg_head, reg)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([0.0, 0.5, 1.0, 2.0]), st.integers(0, 1000))
def test_grl_trunk_gradients_are_reversed(lam, seed):
    d = make(seed=seed, lambda_grl=lam)
    s, a = batch(12, seed)
    c = np.random.default_rng(seed).uniform(-1, 1, size=(12, 2))
    _, on = reg_gradients(d, s, a, c, use_grl=True)
    _, off = reg_gradients(d, s, a, c, use_grl=False)
    for k in d.trunk.entries:
        np.testing.assert_allclose(on[k], -lam * off[k], atol=1e-10, rtol=0)
    for k in d.reg_head.entries:
        np.testing.assert_array_equal(on[k], off[k])


def test_reg_labels_required_and_shaped():
    d = make()
    s, a = batch(4)
    with pytest.raises(ValueError):
        disc_update_reg(d, s, a, None)
    with pytest.raises(ValueError):
        disc_update_reg(d, s, a, np.zeros((4, 3)))


def test_constant_label_regression_converges():
    d = make(lr=1e-2)
    s, a = batch(64)
    for _ in range(900):
        out = disc_update_reg(d, s, a, np.full((64, 2), 0.4))
    assert out["reg_mse"] < 1e-3


def test_cls_accuracy_invariant_to_reg_head_reinit():
    d = make()
    sp, ap = batch(32, 1, -1.0)
    se, ae = batch(32, 2, 1.0)
    for _ in range(30):
        disc_update_cls(d, sp, ap, se, ae)
    p_before, _ = disc_forward(d, se, ae)
    d.reg_head = ad.init_mlp([32, 2], np.random.default_rng(99), prefix="d.reg.")
    p_after, _ = disc_forward(d, se, ae)
    np.testing.assert_array_equal(p_before, p_after)


def test_state_only_drops_action():
    d = make(state_only=True)
    s, _ = batch(3)
    p1, _ = disc_forward(d, s, np.zeros((3, 2)))
    p2, _ = disc_forward(d, s, np.ones((3, 2)))
    np.testing.assert_array_equal(p1, p2)


def test_normalizer_fit_and_clip():
    x = np.array([[0.0, 1.0], [2.0, 1.0]])
    n = Normalizer.fit(x)
    np.testing.assert_allclose(n.mean, [1.0, 1.0])
    np.testing.assert_allclose(n.std, [1.0, 1e-2])
    np.testing.assert_allclose(n(np.array([[3.0, 2.0]])), [[2.0, 10.0]])
