import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adail import autodiff as ad
from adail.checks import finite_difference_check
from adail.discriminator import Normalizer
from adail.envs import step_puck
from adail.posterior import posterior_features
from adail.vae import (VaeConfig, contrastive_from_kls, contrastive_loss, elbo, fit_delta_stats, elbo_node, encode, kl_diag_gaussians,
                       make_decoder, make_encoder, reparam_sample, sample_pairs, vae_objective, vae_update)


def spearman(x, y):
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        VaeConfig(lambda_contrastive=-0.1)
    with pytest.raises(ValueError):
        VaeConfig(d0=0.0)


def test_zero_encoder_is_standard_normal_and_pure():
    e = make_encoder(10, 2, np.random.default_rng(0), hidden=(8,), zero=True)
    mu, var = encode(e, np.ones((3, 4)), np.ones((3, 2)), np.ones((3, 4)))
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(var, 1.0)
    e2 = make_encoder(10, 2, np.random.default_rng(0), hidden=(8,))
    x = np.random.default_rng(1).normal(size=(2, 10))
    a = encode(e2, x[:, :4], x[:, 4:6], x[:, 6:])
    b = encode(e2, x[:, :4], x[:, 4:6], x[:, 6:])
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_reparam_sample():
    mu = np.array([[0.3, -1.0]])
    np.testing.assert_allclose(reparam_sample(mu, np.exp(np.full((1, 2), -10.0)), np.random.default_rng(0)), mu,
                               atol=0.03)
    eps = np.random.default_rng(1).standard_normal((1, 2))
    np.testing.assert_array_equal(reparam_sample(mu, np.ones((1, 2)), eps=eps),
                                  reparam_sample(mu, np.ones((1, 2)), eps=eps))
    n = 100_000
    draws = reparam_sample(np.full((n, 1), 0.7), np.full((n, 1), 4.0), np.random.default_rng(2))
    assert abs(draws.mean() - 0.7) < 3 * 2.0 / math.sqrt(n)


def test_kl_examples():
    assert kl_diag_gaussians([0.0], [1.0], [0.0], [1.0]) == 0.0
    assert kl_diag_gaussians([0.0], [1.0], [1.0], [1.0]) == pytest.approx(0.5)
    assert kl_diag_gaussians([0.0], [4.0], [0.0], [1.0]) == pytest.approx(0.5 * (4 - 1 - math.log(4)))
    with pytest.raises(ValueError):
        kl_diag_gaussians([0.0], [0.0], [0.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(0.05, 5), min_size=2, max_size=2),
       st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(0.05, 5), min_size=2, max_size=2))
def test_kl_nonnegative_and_zero_on_self(m1, v1, m2, v2):
    assert kl_diag_gaussians(m1, v1, m2, v2) >= -1e-12
    assert kl_diag_gaussians(m1, v1, m1, v1) == pytest.approx(0.0, abs=1e-12)


def test_perfect_decoder_with_prior_posterior():
    e = make_encoder(10, 1, np.random.default_rng(0), hidden=(8,), zero=True)
    dec = make_decoder(6, 1, 4, np.random.default_rng(0), hidden=(8,), zero=True)
    s = np.random.default_rng(1).normal(size=(5, 4))
    # zero decoder predicts no state change, so s' = s is reconstructed exactly
    val = elbo(e, dec, s, np.zeros((5, 2)), s, rng=np.random.default_rng(2))
    assert val == -(4 / 2) * math.log(2 * math.pi)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_elbo_at_most_reconstruction(seed):
    rng = np.random.default_rng(seed)
    e = make_encoder(10, 2, rng, hidden=(8,))
    dec = make_decoder(6, 2, 4, rng, hidden=(8,))
    s, a, s2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 2)), rng.normal(size=(6, 4))
    val, recon, kl = elbo_node(e, dec, s, a, s2, rng.standard_normal((6, 2)))
    assert kl >= 0.0
    assert float(val.value) <= recon + 1e-12


def test_contrastive_examples():
    assert contrastive_from_kls(0.1, 25.0, 10.0) == pytest.approx(-9.9)
    assert contrastive_from_kls(0.1, 3.0, 10.0) == pytest.approx(-2.9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.1, 50))
def test_contrastive_bounded_below(same, diff, d0):
    assert contrastive_from_kls(same, diff, d0) >= -d0


def test_constant_encoder_gives_zero_contrastive():
    e = make_encoder(10, 1, np.random.default_rng(0), hidden=(8,), zero=True)
    x = np.random.default_rng(1).normal(size=(4, 10))
    assert contrastive_loss(e, (x[:2], x[2:]), (x[:2], x[2:]), 10.0) == 0.0


def test_pair_sampling():
    ids = np.array([0, 0, 0, 1, 1, 2])
    same, diff = sample_pairs(ids, np.random.default_rng(0), 200)
    assert np.all(ids[same[:, 0]] == ids[same[:, 1]]) and np.all(same[:, 0] != same[:, 1])
    assert np.all(ids[diff[:, 0]] != ids[diff[:, 1]])
    with pytest.raises(ValueError):
        sample_pairs([3, 3, 3], np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        sample_pairs([0, 1, 2], np.random.default_rng(0), 4)


def test_lambda_zero_never_samples_pairs(monkeypatch):
    import adail.vae as vae_mod

    def boom(*a, **k):
        raise AssertionError("pairs sampled")

    monkeypatch.setattr(vae_mod, "sample_pairs", boom)
    rng = np.random.default_rng(0)
    e = make_encoder(10, 1, rng, hidden=(8,))
    dec = make_decoder(6, 1, 4, rng, hidden=(8,))
    x = rng.normal(size=(8, 10))
    diag = vae_update(e, dec, x[:, :4], x[:, 4:6], x[:, 6:], np.zeros(8), VaeConfig(lambda_contrastive=0.0), rng)
    assert diag["contrastive"] == 0.0


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    e = make_encoder(3, 1, rng, hidden=(4,))
    dec = make_decoder(2, 1, 1, rng, hidden=(4,))
    x = rng.normal(size=(6, 3))
    s, a, s2 = x[:, :1], x[:, 1:2], x[:, 2:]
    eps = rng.standard_normal((6, 1))
    pairs = (np.array([[0, 1], [2, 3]]), np.array([[0, 4], [1, 5]]))
    cfg = VaeConfig(lambda_contrastive=0.1, d0=10.0)
    err = finite_difference_check(lambda: vae_objective(e, dec, s, a, s2, eps, cfg, pairs)[0], (e.net, dec.net), rng)
    assert err < 1e-3


def test_elbo_increases_on_linear_dynamics():
    rng = np.random.default_rng(0)
    e = make_encoder(3, 1, rng, hidden=(32, 32), lr=3e-3)
    dec = make_decoder(2, 1, 1, rng, hidden=(32, 32), lr=3e-3)
    cfg = VaeConfig(lambda_contrastive=0.0)
    held = rng.normal(size=(256, 2))
    held_s2 = held[:, :1] + 0.5 * held[:, 1:]
    before = elbo(e, dec, held[:, :1], held[:, 1:], held_s2, eps=np.zeros((256, 1)))
    for _ in range(300):
        x = rng.normal(size=(64, 2))
        vae_update(e, dec, x[:, :1], x[:, 1:], x[:, :1] + 0.5 * x[:, 1:], np.zeros(64), cfg, rng)
    after = elbo(e, dec, held[:, :1], held[:, 1:], held_s2, eps=np.zeros((256, 1)))
    assert after > before + 0.1


def _friction_batch(rng, n_traj, per=20):
    """Independent random transitions grouped into pseudo-trajectories of one friction each."""
    fr = np.repeat(rng.choice([0.0, 2.0, 4.0], n_traj), per)
    n = len(fr)
    s = np.concatenate([rng.uniform(-2, 2, (n, 2)), rng.uniform(-3, 3, (n, 2))], axis=1)
    a = rng.uniform(-10, 10, (n, 2))
    s2, _, _ = step_puck(s, a, np.zeros(n), fr)
    return s, a, s2, np.repeat(np.arange(n_traj), per), fr


@pytest.mark.slow
def test_encoder_separates_friction_after_training():
    rng = np.random.default_rng(0)
    s, a, s2, ids, fr = _friction_batch(rng, 150)
    mean, std, lin = fit_delta_stats(s, a, s2)
    e = make_encoder(10, 1, rng, hidden=(64, 64), lr=1e-3, norm=Normalizer.fit(posterior_features(s, a, s2)))
    dec = make_decoder(6, 1, 4, rng, hidden=(64, 64), lr=1e-3, norm=Normalizer.fit(np.concatenate([s, a], 1)),
                       delta_mean=mean, delta_std=0.3 * std, delta_lin=lin)
    # a strong contrastive weight with a small margin keeps the code on the
    # per-trajectory friction instead of per-transition noise
    cfg = VaeConfig(lambda_contrastive=10.0, d0=0.5)
    for _ in range(10000):
        idx = rng.integers(len(s), size=128)
        vae_update(e, dec, s[idx], a[idx], s2[idx], ids[idx], cfg, rng)
    hs, ha, hs2, hids, hfr = _friction_batch(np.random.default_rng(7), 15)
    mu, var = encode(e, hs, ha, hs2)
    assert abs(spearman(mu[:, 0], hfr)) > 0.5
    # friction 0 vs 4 pairs against same-trajectory pairs, symmetrized KL
    sym = lambda i, j: (kl_diag_gaussians(mu[i], var[i], mu[j], var[j])
                        + kl_diag_gaussians(mu[j], var[j], mu[i], var[i]))
    prng = np.random.default_rng(9)
    zero, four = np.flatnonzero(hfr == 0.0), np.flatnonzero(hfr == 4.0)
    wins = []
    for _ in range(200):
        i = prng.choice(zero)
        j = prng.choice(np.flatnonzero((hids == hids[i]) & (np.arange(len(hids)) != i)))
        wins.append(sym(i, prng.choice(four)) > sym(i, j))
    assert np.mean(wins) >= 0.7
