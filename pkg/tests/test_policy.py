import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adail import autodiff as ad
from adail.envs import CARTPOLE, PUCK
from adail.policy import (ContextSource, PPOConfig, PPOOptimizers, act, collect_rollouts, compute_gae,
                          dist_logp_entropy, finish_batch, make_policy, make_value_fn, policy_input,
                          ppo_update)


def gae_by_definition(r, v, v_next, dones, terminals, gamma, lam):
    """A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at the episode end."""
    T = len(r)
    delta = r + gamma * v_next * (1 - terminals) - v
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for u in range(t, T):
            adv[t] += coef * delta[u]
            if dones[u]:
                break
            coef *= gamma * lam
    return adv


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.floats(0.5, 0.999), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_gae_matches_definition(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v, vn = rng.normal(size=T), rng.normal(size=T), rng.normal(size=T)
    dones = rng.random(T) < 0.2
    terminals = dones & (rng.random(T) < 0.5)
    adv, ret = compute_gae(r[:, None], v[:, None], vn[:, None], dones[:, None], gamma, lam, terminals[:, None])
    ref = gae_by_definition(r, v, vn, dones.astype(float), terminals.astype(float), gamma, lam)
    np.testing.assert_allclose(adv[:, 0], ref, atol=1e-10)
    np.testing.assert_allclose(ret[:, 0], ref + v, atol=1e-10)


def test_gae_lambda_zero_is_td_error():
    r = np.array([[1.0], [2.0]])
    v = np.array([[0.5], [0.25]])
    vn = np.array([[0.25], [0.0]])
    adv, _ = compute_gae(r, v, vn, np.array([[False], [True]]), 0.9, 0.0)
    np.testing.assert_allclose(adv[:, 0], [1.0 + 0.9 * 0.25 - 0.5, 2.0 - 0.25])


def test_categorical_probabilities_and_logp():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    s = np.random.default_rng(1).normal(size=(50, 4))
    logits = ad.mlp_numpy(pol.net, s)
    probs = np.exp(logits - np.logaddexp.reduce(logits, axis=1, keepdims=True))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    a, logp = act(pol, s, None, np.random.default_rng(2))
    np.testing.assert_allclose(logp, np.log(probs[np.arange(50), a]), atol=1e-12)


def test_sampling_frequencies_follow_probabilities():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    s = np.tile(np.array([[0.01, 0.0, -0.02, 0.03]]), (20000, 1))
    a, logp = act(pol, s, None, np.random.default_rng(3))
    p1 = np.exp(logp[a == 1][0]) if (a == 1).any() else 0.0
    assert abs(a.mean() - p1) < 0.02


def test_gaussian_head_logp_and_std():
    pol = make_policy(PUCK, "true_params", np.random.default_rng(0), init_log_std=np.log(2.0))
    assert pol.input_dim == 6
    s, c = np.zeros((3, 4)), np.zeros((3, 2))
    a, logp = act(pol, s, c, np.random.default_rng(1))
    mean = ad.mlp_numpy(pol.net, policy_input(pol, s, c))
    z = (a - mean) / 2.0
    ref = np.sum(-0.5 * z * z - np.log(2.0) - 0.5 * np.log(2 * np.pi), axis=1)
    np.testing.assert_allclose(logp, ref, atol=1e-12)
    a_det, _ = act(pol, s, c, None, deterministic=True)
    np.testing.assert_array_equal(a_det, mean)


def test_graph_logp_matches_sampling_logp():
    for fam, mode in ((CARTPOLE, "none"), (PUCK, "random")):
        pol = make_policy(fam, mode, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        s = rng.normal(size=(8, fam.obs_dim))
        c = rng.uniform(-1, 1, size=(8, pol.ctx_dim))
        a, logp = act(pol, s, c, rng)
        node, _ = dist_logp_entropy(pol, policy_input(pol, s, c), a)
        np.testing.assert_allclose(node.value, logp, atol=1e-10)


def test_context_width_validation():
    pol = make_policy(PUCK, "true_params", np.random.default_rng(0))
    with pytest.raises(ValueError, match="context width"):
        policy_input(pol, np.zeros((1, 4)), np.zeros((1, 3)))
    free = make_policy(PUCK, "none", np.random.default_rng(0))
    assert free.input_dim == 4


def test_context_source_modes():
    rng = np.random.default_rng(0)
    c = np.array([[0.5], [-0.25]])
    src = ContextSource("true_params", 2, 1)
    src.start(np.arange(2), c, rng)
    np.testing.assert_array_equal(src.ctx, c)
    rnd = ContextSource("random", 2, 1, rng=np.random.default_rng(5))
    rnd.start(np.arange(2), c)
    assert np.all(np.abs(rnd.ctx) <= 1) and not np.array_equal(rnd.ctx, c)
    with pytest.raises(ValueError):
        ContextSource("posterior", 2, 1)
    with pytest.raises(ValueError):
        ContextSource("bogus", 2, 1)


def _fixed_sampler(values):
    v = np.asarray(values, dtype=np.float64)
    return lambda rng: v


def test_rollout_shapes_and_episode_bookkeeping():
    pol = make_policy(CARTPOLE, "true_params", np.random.default_rng(0))
    ctx = ContextSource("true_params", 3, 1)
    b = collect_rollouts(pol, CARTPOLE, np.random.default_rng(1), 3, 64, _fixed_sampler([0.5]), ctx,
                         keep_true_reward=True)
    assert b.obs.shape == (64, 3, 4) and b.act_enc.shape == (64, 3, 2)
    np.testing.assert_array_equal(b.c_norm, 0.5)
    np.testing.assert_array_equal(b.ctx, 0.5)
    # every finished episode's length matches the count of its steps
    assert len(b.episode_lengths) == int(b.dones.sum())
    assert sum(b.episode_true_returns) <= b.r_true.sum()
    # next obs of a non-final step is the obs of the next step in that env
    cont = ~b.dones[:-1]
    np.testing.assert_array_equal(b.obs_next[:-1][cont], b.obs[1:][cont])


def test_true_reward_hidden_by_default():
    pol = make_policy(PUCK, "none", np.random.default_rng(0))
    b = collect_rollouts(pol, PUCK, np.random.default_rng(1), 2, 10, _fixed_sampler([0.0, 1.0]),
                         ContextSource("none", 2, 2))
    assert b.r_true is None and b.episode_true_returns == []


def test_rollouts_are_deterministic():
    def run():
        pol = make_policy(PUCK, "random", np.random.default_rng(0))
        ctx = ContextSource("random", 2, 2, rng=np.random.default_rng(9))
        return collect_rollouts(pol, PUCK, np.random.default_rng(1), 2, 120, _fixed_sampler([1.0, 2.0]), ctx,
                                env_rng=np.random.default_rng(2))

    a, b = run(), run()
    for name in ("obs", "actions", "ctx", "logp", "dones"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_env_stream_independent_of_action_noise():
    def samples(action_seed):
        pol = make_policy(PUCK, "none", np.random.default_rng(0))
        sampler = lambda rng: rng.uniform([-5, 0], [5, 4])
        b = collect_rollouts(pol, PUCK, np.random.default_rng(action_seed), 2, 250, sampler,
                             ContextSource("none", 2, 2), env_rng=np.random.default_rng(4))
        return b.c_samples

    np.testing.assert_array_equal(samples(1), samples(2))


def _batch(pol, vf, fam, n=4, T=64, seed=0):
    ctx = ContextSource(pol.context_mode, n, fam.k)
    b = collect_rollouts(pol, fam, np.random.default_rng(seed), n, T, _fixed_sampler(fam.source_values), ctx,
                         keep_true_reward=True)
    return finish_batch(b, pol, vf, b.r_true, 0.99, 0.95)


def test_advantages_normalized():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    vf = make_value_fn(pol, np.random.default_rng(1))
    b = _batch(pol, vf, CARTPOLE)
    assert abs(b.advantages.mean()) < 1e-10
    assert abs(b.advantages.std() - 1.0) < 1e-10


def test_first_ppo_ratio_is_one_and_update_changes_policy():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    vf = make_value_fn(pol, np.random.default_rng(1))
    b = _batch(pol, vf, CARTPOLE)
    before = pol.net.copy()
    diag = ppo_update(pol, vf, b, PPOConfig(epochs=2), PPOOptimizers(ad.AdamState(1e-3), ad.AdamState(1e-3)),
                      np.random.default_rng(2))
    assert diag["first_ratio_dev"] < 1e-12
    assert diag["epochs"] >= 1 and 0.0 <= diag["clip_frac"] <= 1.0
    assert any(not np.array_equal(before.entries[k], pol.net.entries[k]) for k in before.entries)


def test_ppo_kl_early_stop():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    vf = make_value_fn(pol, np.random.default_rng(1))
    b = _batch(pol, vf, CARTPOLE)
    diag = ppo_update(pol, vf, b, PPOConfig(epochs=10, target_kl=1e-9),
                      PPOOptimizers(ad.AdamState(1e-2), ad.AdamState(1e-2)), np.random.default_rng(2))
    assert diag["epochs"] == 1


def test_ppo_nan_batch_restores_parameters():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    vf = make_value_fn(pol, np.random.default_rng(1))
    b = _batch(pol, vf, CARTPOLE)
    b.advantages = np.full_like(b.advantages, np.nan)
    before = pol.net.copy()
    diag = ppo_update(pol, vf, b, PPOConfig(), PPOOptimizers(ad.AdamState(), ad.AdamState()),
                      np.random.default_rng(2))
    assert diag["aborted"]
    for k in before.entries:
        np.testing.assert_array_equal(before.entries[k], pol.net.entries[k])


def test_ppo_improves_cartpole_return():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    vf = make_value_fn(pol, np.random.default_rng(1))
    opts = PPOOptimizers(ad.AdamState(5.586e-4), ad.AdamState(1e-3))
    rng = np.random.default_rng(3)
    first = None
    for it in range(6):
        ctx = ContextSource("none", 8, 1)
        b = collect_rollouts(pol, CARTPOLE, rng, 8, 256, _fixed_sampler([1.0]), ctx, keep_true_reward=True)
        mean_ret = np.mean(b.episode_true_returns)
        first = mean_ret if first is None else first
        finish_batch(b, pol, vf, b.r_true, 0.99, 0.95)
        ppo_update(pol, vf, b, PPOConfig(), opts, rng)
    assert mean_ret > 2 * first
