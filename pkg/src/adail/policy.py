"""Context-conditioned policy, critic, rollout collection and PPO."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .envs import EnvFamily

CONTEXT_MODES = ("none", "true_params", "posterior", "random")


@dataclass
class Policy:
    net: ad.ParamNet
    head: str  # "categorical" | "gaussian"
    context_mode: str
    obs_dim: int
    ctx_dim: int
    act_dim: int
    family_id: str

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.ctx_dim

    def copy(self) -> "Policy":
        return Policy(self.net.copy(), self.head, self.context_mode, self.obs_dim,
                      self.ctx_dim, self.act_dim, self.family_id)


@dataclass
class ValueFn:
    net: ad.ParamNet

    def copy(self) -> "ValueFn":
        return ValueFn(self.net.copy())


def make_policy(family: EnvFamily, context_mode: str, rng, hidden=(64, 64), init_log_std=0.0,
                ctx_dim: int | None = None) -> Policy:
    if context_mode not in CONTEXT_MODES:
        raise ValueError(f"context_mode must be one of {CONTEXT_MODES}")
    if ctx_dim is None:
        ctx_dim = 0 if context_mode == "none" else family.k
    if context_mode == "none":
        ctx_dim = 0
    if family.action_kind == "categorical":
        head, out = "categorical", family.n_actions
    else:
        head, out = "gaussian", family.act_dim
    net = ad.init_mlp([family.obs_dim + ctx_dim, *hidden, out], rng, prefix="pi.")
    if head == "gaussian":
        net.entries["pi.log_std"] = np.full(out, float(init_log_std))
    return Policy(net, head, context_mode, family.obs_dim, ctx_dim, family.act_dim, family.family_id)


def make_value_fn(policy: Policy, rng, hidden=(64, 64)) -> ValueFn:
    return ValueFn(ad.init_mlp([policy.input_dim, *hidden, 1], rng, prefix="vf."))


def policy_input(policy: Policy, s, c) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if policy.ctx_dim == 0:
        if c is not None and np.size(c) and policy.context_mode != "none":
            raise ValueError("context width mismatch")
        return s
    c = np.asarray(c, dtype=np.float64).reshape(s.shape[0], -1)
    if c.shape[1] != policy.ctx_dim:
        raise ValueError(f"context width mismatch: expected {policy.ctx_dim}, got {c.shape[1]}")
    return np.concatenate([s, c], axis=1)


def act(policy: Policy, s, c, rng, deterministic=False):
    """Sample an action (or the mode) and its exact log-probability.

    Works on one state (returns scalars / 1-D action) or a batch of rows.
    """
    single = np.asarray(s).ndim == 1
    x = policy_input(policy, s, c)
    out = ad.mlp_numpy(policy.net, x)
    if policy.head == "categorical":
        logp_all = out - np.logaddexp.reduce(out, axis=1, keepdims=True)
        if deterministic:
            a = np.argmax(out, axis=1)
        else:
            u = rng.random(len(out))[:, None]
            a = (u > np.cumsum(np.exp(logp_all), axis=1)).sum(axis=1)
            a = np.minimum(a, out.shape[1] - 1)
        logp = logp_all[np.arange(len(a)), a]
    else:
        log_std = policy.net.entries["pi.log_std"]
        std = np.exp(log_std)
        a = out if deterministic else out + std * rng.standard_normal(out.shape)
        z = (a - out) / std
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * ad.LOG_2PI, axis=1)
    if single:
        return a[0], float(logp[0])
    return a, logp


def dist_logp_entropy(policy: Policy, x, actions):
    """Graph nodes for log pi(a|x) and the mean entropy over the batch."""
    out = ad.forward_mlp(policy.net, x)
    if policy.head == "categorical":
        logp_all = ad.log_softmax(out)
        logp = ad.gather(logp_all, actions)
        ent = ad.scale(ad.total(ad.mul(ad.exp(logp_all), logp_all)), -1.0 / out.shape[0])
        return logp, ent
    log_std = policy.net.node("log_std")
    logp = ad.gaussian_logp(actions, out, log_std)
    ent = ad.total(ad.add(log_std, 0.5 * (1.0 + ad.LOG_2PI)))
    return logp, ent


def categorical_entropy(logits) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    logp = logits - np.logaddexp.reduce(logits)
    return float(-np.sum(np.exp(logp) * logp))


def values(value_fn: ValueFn, x) -> np.ndarray:
    return ad.mlp_numpy(value_fn.net, x)[:, 0]


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values_, next_values, dones, gamma, lambda_gae, terminals=None):
    """GAE(gamma, lambda) along axis 0.

    ``dones`` cut the recursion at episode ends.  ``terminals`` (defaults to
    ``dones``) zero the bootstrap value; a done step that is not terminal is a
    time-limit truncation and bootstraps from ``next_values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values_ = np.asarray(values_, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    terminals = dones if terminals is None else np.asarray(terminals, dtype=bool)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * (~terminals[t]) - values_[t]
        last = delta + gamma * lambda_gae * (~dones[t]) * last
        adv[t] = last
    return adv, adv + values_


# ---------------------------------------------------------------------------
# rollouts


class ContextSource:
    """Per-environment policy context for one of the context modes.

    ``posterior`` mode keeps an online EMA of the posterior's per-transition
    predictions, restarted at every episode.
    """

    def __init__(self, mode: str, n: int, k: int, posterior=None, beta: float = 0.9, rng=None):
        if mode not in CONTEXT_MODES:
            raise ValueError(f"context mode must be one of {CONTEXT_MODES}")
        if mode == "posterior" and posterior is None:
            raise ValueError("posterior context requires a posterior")
        self.mode, self.n, self.k = mode, n, k
        self.rng = rng
        self.posterior = posterior
        self.beta = beta
        self.ctx = np.zeros((n, k if mode != "none" else 0))
        self.seen = np.zeros(n, dtype=np.int64)

    def start(self, idx, c_norm, rng=None):
        """Begin episodes for env rows ``idx`` whose true normalized params are ``c_norm``."""
        idx = np.atleast_1d(idx)
        rng = self.rng if self.rng is not None else rng
        if self.mode == "true_params":
            self.ctx[idx] = c_norm
        elif self.mode == "random":
            self.ctx[idx] = rng.uniform(-1.0, 1.0, size=(len(idx), self.k))
        elif self.mode == "posterior":
            self.ctx[idx] = self.posterior.initial_context(np.atleast_2d(c_norm))
            self.seen[idx] = 0

    def observe(self, s, a_enc, s_next, c_norm):
        if self.mode != "posterior":
            return
        pred = self.posterior.predict(s, a_enc, s_next, c_true=c_norm)
        first = self.seen == 0
        ema = self.ctx + (1.0 - self.beta) * (pred - self.ctx)
        self.ctx = np.clip(np.where(first[:, None], pred, ema), -1.0, 1.0)
        self.seen += 1


@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, n, obs)
    ctx: np.ndarray          # (T, n, ctx) context the action was taken under
    ctx_next: np.ndarray     # (T, n, ctx) context in force after the step
    actions: np.ndarray      # (T, n) int or (T, n, act)
    act_enc: np.ndarray      # (T, n, enc) actions as applied / fed to discriminators
    logp: np.ndarray         # (T, n)
    obs_next: np.ndarray     # (T, n, obs)
    dones: np.ndarray        # (T, n)
    terminals: np.ndarray    # (T, n)
    c_norm: np.ndarray       # (T, n, k) normalized true params of the generating env
    episode_ids: np.ndarray  # (T, n) globally unique within the batch
    r_true: np.ndarray | None = None
    rewards: np.ndarray | None = None
    values: np.ndarray | None = None
    next_values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    c_samples: np.ndarray | None = None          # raw params drawn per episode
    episode_true_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]

    def flat(self, name):
        arr = getattr(self, name)
        return arr.reshape(self.size, *arr.shape[2:])


def collect_rollouts(policy: Policy, family: EnvFamily, rng, n_envs: int, steps_per_env: int,
                     sampler, context: ContextSource, keep_true_reward=False, deterministic=False,
                     env_rng=None):
    """Run ``n_envs`` environment instances for ``steps_per_env`` steps each.

    ``sampler(rng)`` returns raw dynamics parameters (k,) for each new
    episode.  Episodes unfinished at the end are truncated.  True rewards are
    only retained when ``keep_true_reward`` is set.  ``env_rng`` (default
    ``rng``) drives dynamics sampling and resets so action noise does not
    shift the sequence of sampled environments.
    """
    env_rng = rng if env_rng is None else env_rng
    T, n, k = steps_per_env, n_envs, family.k
    obs_b = np.zeros((T, n, family.obs_dim))
    nxt_b = np.zeros_like(obs_b)
    ctx_b = np.zeros((T, n, context.ctx.shape[1]))
    ctx_nb = np.zeros_like(ctx_b)
    if family.action_kind == "categorical":
        act_b = np.zeros((T, n), dtype=np.int64)
    else:
        act_b = np.zeros((T, n, family.act_dim))
    enc_b = np.zeros((T, n, family.act_encoding_dim))
    logp_b = np.zeros((T, n))
    done_b = np.zeros((T, n), dtype=bool)
    term_b = np.zeros((T, n), dtype=bool)
    c_b = np.zeros((T, n, k))
    ep_b = np.zeros((T, n), dtype=np.int64)
    r_b = np.zeros((T, n)) if keep_true_reward else None

    samples = []
    params = np.zeros((n, k))
    step_idx = np.zeros(n, dtype=np.int64)
    ep_id = np.zeros(n, dtype=np.int64)
    ep_ret = np.zeros(n)
    next_ep = 0
    states = np.zeros((n, family.obs_dim))
    true_returns, lengths = [], []

    def begin(rows):
        nonlocal next_ep
        for i in rows:
            params[i] = sampler(env_rng)
            samples.append(params[i].copy())
            states[i] = family.reset_fn(env_rng, 1)[0]
            ep_id[i] = next_ep
            next_ep += 1
        step_idx[rows] = 0
        ep_ret[rows] = 0.0
        context.start(rows, family.normalize(params[rows]), rng)

    begin(np.arange(n))
    for t in range(T):
        a, logp = act(policy, states, context.ctx, rng, deterministic=deterministic)
        nxt, r, term = family.step_fn(states, a, params)
        step_idx += 1
        done = term | (step_idx >= family.horizon)
        enc = family.encode_action(a)
        c_norm = family.normalize(params)
        obs_b[t], nxt_b[t], ctx_b[t] = states, nxt, context.ctx
        act_b[t], enc_b[t], logp_b[t] = a, enc, logp
        done_b[t], term_b[t], c_b[t], ep_b[t] = done, term, c_norm, ep_id
        if keep_true_reward:
            r_b[t] = r
            ep_ret += r
        context.observe(states, enc, nxt, c_norm)
        ctx_nb[t] = context.ctx
        states = nxt
        ended = np.flatnonzero(done)
        for i in ended:
            lengths.append(int(step_idx[i]))
            if keep_true_reward:
                true_returns.append(float(ep_ret[i]))
        if len(ended) and t < T - 1:
            begin(ended)
    return RolloutBatch(obs_b, ctx_b, ctx_nb, act_b, enc_b, logp_b, nxt_b, done_b, term_b, c_b, ep_b,
                        r_true=r_b, c_samples=np.array(samples), episode_true_returns=true_returns,
                        episode_lengths=lengths)


def finish_batch(batch: RolloutBatch, policy: Policy, value_fn: ValueFn, rewards, gamma, lam):
    """Attach rewards, critic values, GAE advantages (normalized) and returns."""
    T, n = batch.dones.shape
    x = np.concatenate([batch.flat("obs"), batch.flat("ctx")], axis=1)
    x_next = np.concatenate([batch.flat("obs_next"), batch.flat("ctx_next")], axis=1)
    batch.values = values(value_fn, x).reshape(T, n)
    batch.next_values = values(value_fn, x_next).reshape(T, n)
    batch.rewards = np.asarray(rewards, dtype=np.float64).reshape(T, n)
    adv, ret = compute_gae(batch.rewards, batch.values, batch.next_values, batch.dones, gamma, lam,
                           terminals=batch.terminals)
    batch.returns = ret
    std = adv.std()
    batch.advantages = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
    return batch


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    target_kl: float = 0.02
    max_grad_norm: float | None = 0.5
    gamma: float = 0.99
    lam: float = 0.95


@dataclass
class PPOOptimizers:
    policy: ad.AdamState
    value: ad.AdamState


def ppo_update(policy: Policy, value_fn: ValueFn, batch: RolloutBatch, cfg: PPOConfig,
               opts: PPOOptimizers, rng):
    """Clipped-surrogate PPO over minibatches; returns a diagnostics dict.

    Parameters are restored and the update abandoned if any loss is NaN.
    """
    obs = np.concatenate([batch.flat("obs"), batch.flat("ctx")], axis=1)
    actions = batch.flat("actions")
    logp_old = batch.flat("logp")
    adv = batch.flat("advantages")
    ret = batch.flat("returns")
    N = len(obs)
    pi_snap, vf_snap = policy.net.copy(), value_fn.net.copy()
    diag = {"approx_kl": 0.0, "clip_frac": 0.0, "epochs": 0, "pi_loss": 0.0, "vf_loss": 0.0,
            "entropy": 0.0, "first_ratio_dev": None, "aborted": False}
    for epoch in range(cfg.epochs):
        perm = rng.permutation(N)
        kls, clips = [], []
        for start in range(0, N, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            logp, ent = dist_logp_entropy(policy, obs[idx], actions[idx])
            ratio = ad.exp(ad.sub(logp, logp_old[idx]))
            if diag["first_ratio_dev"] is None:
                diag["first_ratio_dev"] = float(np.max(np.abs(ratio.value - 1.0)))
            a_mb = adv[idx]
            surr = ad.minimum(ad.mul(ratio, a_mb), ad.mul(ad.clip(ratio, 1 - cfg.clip, 1 + cfg.clip), a_mb))
            pi_loss = ad.neg(ad.mean(surr))
            v = ad.forward_mlp(value_fn.net, obs[idx])
            vf_loss = ad.mean(ad.square(ad.sub(ad.take_cols(v, 0, 1), ret[idx][:, None])))
            loss = ad.add(ad.add(pi_loss, ad.scale(vf_loss, cfg.vf_coef)), ad.scale(ent, -cfg.ent_coef))
            if not np.isfinite(loss.value):
                policy.net.load_from(pi_snap)
                value_fn.net.load_from(vf_snap)
                diag["aborted"] = True
                return diag
            grads = ad.backward(loss)
            ad.adam_step(policy.net, grads, opts.policy, cfg.max_grad_norm)
            ad.adam_step(value_fn.net, grads, opts.value, cfg.max_grad_norm)
            kls.append(float(np.mean(logp_old[idx] - logp.value)))
            clips.append(float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip)))
            diag["pi_loss"], diag["vf_loss"], diag["entropy"] = (
                float(pi_loss.value), float(vf_loss.value), float(ent.value))
        diag["epochs"] = epoch + 1
        diag["approx_kl"] = float(np.mean(kls))
        diag["clip_frac"] = float(np.mean(clips))
        if diag["approx_kl"] > cfg.target_kl:
            break
    return diag
