"""Experiment orchestration: expert, demonstrations, ADAIL, VAE-ADAIL and baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import IMITATION, ConfigError, RunConfig, write_snapshot
from .discriminator import (Discriminator, Normalizer, disc_update_cls, disc_update_reg,
                            imitation_reward, make_discriminator)
from .envs import Blackout, DemoSet, EnvFamily, GridSpec, get_family, sample_dynamics
from .evaluation import blackout_region, run_episodes
from .policy import (ContextSource, PPOConfig, PPOOptimizers, Policy, ValueFn, act, collect_rollouts,
                     finish_batch, make_policy, make_value_fn, ppo_update)
from .posterior import Posterior, ReplayBuffer, posterior_features, make_posterior, posterior_update
from .seeding import substream
from .vae import (Decoder, Encoder, EncoderContext, VaeConfig, fit_delta_stats, make_decoder, make_encoder,
                  vae_update)

log = logging.getLogger(__name__)

CARTPOLE_TARGET = 195.0


@dataclass
class TrainResult:
    policy: Policy
    value_fn: ValueFn
    metrics: list = field(default_factory=list)
    discriminator: Discriminator | None = None
    posterior: Posterior | None = None
    encoder: Encoder | None = None
    decoder: Decoder | None = None
    c_samples: np.ndarray | None = None
    reached_target: bool | None = None
    target: float | None = None


class MetricsWriter:
    """Append-only CSV; one row per iteration, fixed column order."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(",".join(self.columns) + "\n")

    def write(self, row: dict):
        if self.path is None:
            return
        vals = []
        for c in self.columns:
            v = row.get(c, "")
            vals.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        with open(self.path, "a") as fh:
            fh.write(",".join(vals) + "\n")


def ppo_config(cfg: RunConfig, family: EnvFamily) -> PPOConfig:
    p = cfg.ppo
    return PPOConfig(clip=p.clip, epochs=p.epochs, minibatch=p.minibatch, vf_coef=p.vf_coef,
                     ent_coef=p.ent_coef, target_kl=p.target_kl,
                     max_grad_norm=p.max_grad_norm if p.max_grad_norm > 0 else None,
                     gamma=p.gamma, lam=p.lam)


def build_blackout(cfg: RunConfig, family: EnvFamily) -> Blackout | None:
    if cfg.run.blackout in ("", "none"):
        return None
    grid = GridSpec.for_family(family, cfg.run.grid_cells)
    return Blackout(grid, blackout_region(grid, cfg.run.blackout, grid.cell_of(family.source_values)))


def make_sampler(cfg: RunConfig, family: EnvFamily, blackout=None):
    if cfg.run.prior == "source":
        src = np.array(family.source_values, dtype=np.float64)
        return lambda rng: src
    if cfg.run.prior != "family":
        raise ValueError(f"run.prior must be 'family' or 'source', got {cfg.run.prior!r}")
    return lambda rng: sample_dynamics(family, rng, blackout).values


def _run_dir(cfg: RunConfig):
    if not cfg.run.output_dir:
        return None
    path = Path(cfg.run.output_dir)
    (path / "checkpoints").mkdir(parents=True, exist_ok=True)
    (path / "final").mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, path / "config.snapshot")
    return path


def _init_policy(cfg, family, context_mode, ctx_dim=None):
    rng = substream(cfg.run.seed, "policy-init")
    pol = make_policy(family, context_mode, rng, cfg.policy.hidden, cfg.policy.init_log_std, ctx_dim)
    vf = make_value_fn(pol, rng, cfg.policy.hidden)
    opts = PPOOptimizers(ad.AdamState(cfg.policy.lr), ad.AdamState(cfg.policy.value_lr))
    return pol, vf, opts


def _flat_batch(batch):
    return batch.flat("obs"), batch.flat("act_enc"), batch.flat("obs_next"), batch.flat("c_norm")


# ---------------------------------------------------------------------------
# experts


def pd_controller_return(family: EnvFamily, n_episodes=100, seed=0, kp=10.56, kd=3.82):
    """Mean return of a hand-tuned PD controller at the puck source domain."""
    rng = substream(seed, "pd-oracle")
    params = np.tile(np.array(family.source_values), (n_episodes, 1))
    s = family.reset_fn(rng, n_episodes)
    total = np.zeros(n_episodes)
    for _ in range(family.horizon):
        a = -kp * s[:, :2] - kd * s[:, 2:]
        s, r, _ = family.step_fn(s, a, params)
        total += r
    return float(total.mean())


def expert_target(family: EnvFamily) -> float:
    if family.action_kind == "categorical":
        return CARTPOLE_TARGET
    oracle = pd_controller_return(family)
    return oracle * 1.1 if oracle < 0 else oracle * 0.9


def evaluate_at(policy: Policy, family: EnvFamily, values, n_episodes, seed, context_source="none",
                posterior=None):
    params = np.tile(np.asarray(values, dtype=np.float64), (n_episodes, 1))
    rngs = [substream(seed, "source-eval", i) for i in range(n_episodes)]
    return run_episodes(policy, family, params, rngs, context_source, posterior)


def _ppo_true_reward_loop(cfg: RunConfig, family: EnvFamily, context_mode: str, sampler, target=None,
                          writer=None, run_dir=None):
    pol, vf, opts = _init_policy(cfg, family, context_mode)
    pcfg = ppo_config(cfg, family)
    env_rng = substream(cfg.run.seed, "env")
    act_rng = substream(cfg.run.seed, "rollout")
    ctx_rng = substream(cfg.run.seed, "context")
    ppo_rng = substream(cfg.run.seed, "ppo")
    metrics, samples = [], []
    reached = False
    for it in range(cfg.run.iterations):
        ctx = ContextSource(context_mode, cfg.ppo.n_envs, family.k, rng=ctx_rng)
        batch = collect_rollouts(pol, family, act_rng, cfg.ppo.n_envs, cfg.ppo.steps_per_env, sampler, ctx,
                                 keep_true_reward=True, env_rng=env_rng)
        samples.append(batch.c_samples)
        finish_batch(batch, pol, vf, batch.r_true, pcfg.gamma, pcfg.lam)
        diag = ppo_update(pol, vf, batch, pcfg, opts, ppo_rng)
        row = {"iteration": it, "env_steps": (it + 1) * cfg.steps_per_iter,
               "episodes": len(batch.episode_lengths),
               "mean_true_return": float(np.mean(batch.episode_true_returns)) if batch.episode_true_returns else float("nan"),
               "ppo_kl": diag["approx_kl"], "ppo_clipfrac": diag["clip_frac"], "ppo_epochs": diag["epochs"],
               "eval_return": ""}
        if target is not None and (it + 1) % cfg.expert.eval_every == 0:
            ev = float(np.mean(evaluate_at(pol, family, family.source_values, cfg.expert.eval_episodes,
                                           cfg.run.seed)))
            row["eval_return"] = ev
            reached = ev >= target
        metrics.append(row)
        if writer:
            writer.write(row)
        _maybe_checkpoint(cfg, run_dir, it, pol)
        if reached and cfg.expert.stop_at_target:
            break
    return pol, vf, metrics, np.concatenate(samples) if samples else np.zeros((0, family.k)), reached


TRUE_REWARD_COLUMNS = ["iteration", "env_steps", "episodes", "mean_true_return", "ppo_kl", "ppo_clipfrac",
                       "ppo_epochs", "eval_return"]


def train_expert(cfg: RunConfig, family: EnvFamily | None = None) -> TrainResult:
    """PPO on the true reward at the fixed source domain, context-free."""
    family = family or get_family(cfg.run.family)
    run_dir = _run_dir(cfg)
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, TRUE_REWARD_COLUMNS)
    target = expert_target(family)
    src = np.array(family.source_values, dtype=np.float64)
    pol, vf, metrics, samples, reached = _ppo_true_reward_loop(
        cfg, family, "none", lambda rng: src, target, writer, run_dir)
    if not reached:
        log.warning("expert budget exhausted below target %.3f", target)
        if run_dir:
            (run_dir / "WARNING_below_target").write_text(f"target {target}\n")
    res = TrainResult(pol, vf, metrics, c_samples=samples, reached_target=reached, target=target)
    if run_dir:
        save_result(run_dir / "final", res, family)
    return res


def up_true_train(cfg: RunConfig, family: EnvFamily | None = None) -> TrainResult:
    """PPO on the true reward across sampled dynamics, conditioned on the true parameters."""
    family = family or get_family(cfg.run.family)
    run_dir = _run_dir(cfg)
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, TRUE_REWARD_COLUMNS)
    sampler = make_sampler(cfg, family, build_blackout(cfg, family))
    pol, vf, metrics, samples, _ = _ppo_true_reward_loop(cfg, family, "true_params", sampler, None, writer, run_dir)
    res = TrainResult(pol, vf, metrics, c_samples=samples)
    if run_dir:
        save_result(run_dir / "final", res, family)
        _write_samples(run_dir, samples, family)
    return res


def collect_demos(expert: Policy, family: EnvFamily, source_c, n: int, seed: int) -> DemoSet:
    """n full deterministic episodes of the expert at ``source_c``; rewards are not kept."""
    params = np.tile(np.asarray(source_c, dtype=np.float64), (n, 1))
    rngs = [substream(seed, "demos", i) for i in range(n)]
    states = np.stack([family.reset_fn(r, 1)[0] for r in rngs])
    active = np.ones(n, dtype=bool)
    rec = {"s": [], "a": [], "s_next": [], "done": [], "active": []}
    returns = np.zeros(n)
    for t in range(family.horizon):
        a, _ = act(expert, states, np.zeros((n, 0)), None, deterministic=True)
        if family.action_kind == "continuous":
            a = family.encode_action(a)
        nxt, r, term = family.step_fn(states, a, params)
        done = term | (t + 1 >= family.horizon)
        returns += np.where(active, r, 0.0)
        for key, val in (("s", states), ("a", a), ("s_next", nxt), ("done", done), ("active", active.copy())):
            rec[key].append(val)
        active &= ~done
        states = nxt
        if not active.any():
            break
    episodes = []
    act_arr = np.stack(rec["a"], axis=1)
    for i in range(n):
        keep = np.stack(rec["active"], axis=1)[i]
        episodes.append({
            "s": np.stack(rec["s"], axis=1)[i][keep],
            "a": act_arr[i][keep],
            "s_next": np.stack(rec["s_next"], axis=1)[i][keep],
            "done": np.stack(rec["done"], axis=1)[i][keep],
        })
    demos = DemoSet(family.family_id, np.asarray(source_c, dtype=np.float64), episodes)
    demos.episode_returns = returns  # kept in memory only, never written
    return demos


# ---------------------------------------------------------------------------
# imitation


IMITATION_COLUMNS = ["iteration", "env_steps", "episodes", "mean_ep_len", "mean_imitation_reward",
                     "cls_loss", "cls_acc", "reg_mse", "post_loss", "vae_elbo", "vae_contrastive",
                     "ppo_kl", "ppo_clipfrac", "ppo_epochs"]


def _check_demos(cfg, family, demos):
    if demos is None:
        raise ValueError("demos required for imitation algorithms")
    if demos.family_id != family.family_id:
        raise ValueError(f"demos are from {demos.family_id!r}, run family is {family.family_id!r}")


def _demo_arrays(family, demos):
    s, a, s2 = demos.arrays()
    return s, family.encode_action(a), s2


def imitation_train(cfg: RunConfig, demos: DemoSet, family: EnvFamily | None = None) -> TrainResult:
    """Adversarial imitation loop shared by gail, gail_rand and the adail variants.

    Per iteration: fresh dynamics per episode from the prior (respecting any
    blackout), rollouts, discriminator classification step(s), GRL
    regression step(s), posterior step(s), then PPO on imitation rewards.
    """
    family = family or get_family(cfg.run.family)
    _check_demos(cfg, family, demos)
    if cfg.run.algorithm == "vae_adail":
        return vae_adail_train(cfg, demos, family)
    run_dir = _run_dir(cfg)
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, IMITATION_COLUMNS)
    blackout = build_blackout(cfg, family)
    sampler = make_sampler(cfg, family, blackout)
    context_mode = cfg.context_mode()

    s_e, a_e, s2_e = _demo_arrays(family, demos)
    d_rng = substream(cfg.run.seed, "disc-init")
    x_e = s_e if cfg.disc.state_only else np.concatenate([s_e, a_e], axis=1)
    norm = Normalizer.fit(x_e) if cfg.disc.normalize else None
    disc = make_discriminator(family.obs_dim, family.act_encoding_dim, family.k, d_rng, cfg.disc.hidden,
                              cfg.disc.lr, cfg.disc.lambda_grl, (cfg.disc.reward_clip_lo, cfg.disc.reward_clip_hi),
                              cfg.disc.state_only, norm)
    posterior = buffer = None
    if cfg.posterior.enabled:
        q_norm = Normalizer.fit(posterior_features(s_e, a_e, s2_e)) if cfg.disc.normalize else None
        posterior = make_posterior(2 * family.obs_dim + family.act_encoding_dim, family.k,
                                   substream(cfg.run.seed, "posterior-init"), cfg.posterior.hidden,
                                   cfg.posterior.lr, cfg.posterior.delta, q_norm)
        buffer = ReplayBuffer(cfg.posterior.buffer_size, family.obs_dim, family.act_encoding_dim, family.k)
    if context_mode == "posterior" and posterior is None:
        raise ValueError("context 'posterior' during training needs posterior.enabled")

    pol, vf, opts = _init_policy(cfg, family, context_mode)
    pcfg = ppo_config(cfg, family)
    env_rng = substream(cfg.run.seed, "env")
    act_rng = substream(cfg.run.seed, "rollout")
    ctx_rng = substream(cfg.run.seed, "context")
    ppo_rng = substream(cfg.run.seed, "ppo")
    disc_rng = substream(cfg.run.seed, "disc")
    post_rng = substream(cfg.run.seed, "posterior")
    metrics, samples = [], []
    for it in range(cfg.run.iterations):
        ctx = ContextSource(context_mode, cfg.ppo.n_envs, family.k, posterior=posterior,
                            beta=cfg.posterior.ema_beta, rng=ctx_rng)
        batch = collect_rollouts(pol, family, act_rng, cfg.ppo.n_envs, cfg.ppo.steps_per_env, sampler, ctx,
                                 env_rng=env_rng)
        samples.append(batch.c_samples)
        s_p, a_p, s2_p, c_p = _flat_batch(batch)
        row = {"iteration": it, "env_steps": (it + 1) * cfg.steps_per_iter,
               "episodes": len(batch.episode_lengths),
               "mean_ep_len": float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float(cfg.ppo.steps_per_env)}
        row.update(_disc_steps(cfg, disc, s_p, a_p, s_e, a_e, disc_rng))
        if cfg.disc.use_grl:
            row.update(_reg_steps(cfg, disc, s_p, a_p, c_p, disc_rng))
        if posterior is not None:
            buffer.add(s_p, a_p, s2_p, c_p)
            row.update(_posterior_steps(cfg, posterior, buffer, post_rng))
        rewards = imitation_reward(disc, s_p, a_p)
        row["mean_imitation_reward"] = float(np.mean(rewards))
        finish_batch(batch, pol, vf, rewards, pcfg.gamma, pcfg.lam)
        diag = ppo_update(pol, vf, batch, pcfg, opts, ppo_rng)
        row.update({"ppo_kl": diag["approx_kl"], "ppo_clipfrac": diag["clip_frac"], "ppo_epochs": diag["epochs"]})
        metrics.append(row)
        writer.write(row)
        _maybe_checkpoint(cfg, run_dir, it, pol, disc, posterior)
    samples = np.concatenate(samples) if samples else np.zeros((0, family.k))
    res = TrainResult(pol, vf, metrics, disc, posterior, c_samples=samples)
    if run_dir:
        save_result(run_dir / "final", res, family)
        _write_samples(run_dir, samples, family)
    return res


def _disc_steps(cfg, disc, s_p, a_p, s_e, a_e, rng):
    out = {}
    n = len(s_p) if cfg.disc.batch_size <= 0 else cfg.disc.batch_size
    for _ in range(cfg.disc.steps_per_iter):
        ip = rng.integers(0, len(s_p), size=n) if cfg.disc.batch_size > 0 else np.arange(len(s_p))
        ie = rng.integers(0, len(s_e), size=n)
        out = disc_update_cls(disc, s_p[ip], a_p[ip], s_e[ie], a_e[ie])
    return out


def _reg_steps(cfg, disc, s_p, a_p, c_p, rng):
    out = {}
    for _ in range(cfg.disc.steps_per_iter):
        if cfg.disc.batch_size > 0:
            ip = rng.integers(0, len(s_p), size=cfg.disc.batch_size)
            out = disc_update_reg(disc, s_p[ip], a_p[ip], c_p[ip])
        else:
            out = disc_update_reg(disc, s_p, a_p, c_p)
    return out


def _posterior_steps(cfg, posterior, buffer, rng):
    out = {}
    for _ in range(cfg.posterior.steps_per_iter):
        s, a, s2, c = buffer.sample(rng, cfg.posterior.batch_size)
        out = posterior_update(posterior, s, a, s2, c)
    return out


def adail_train(cfg: RunConfig, demos: DemoSet, family: EnvFamily | None = None) -> TrainResult:
    return imitation_train(cfg, demos, family)


def gail_rand_train(cfg: RunConfig, demos: DemoSet, use_grl: bool, family: EnvFamily | None = None) -> TrainResult:
    """GAIL with dynamics randomization; ``use_grl`` keeps the reversed regression head."""
    cfg.disc.use_grl = use_grl
    cfg.posterior.enabled = False
    if cfg.run.context == "auto":
        cfg.run.context = "none"
    return imitation_train(cfg, demos, family)


def vae_adail_train(cfg: RunConfig, demos: DemoSet, family: EnvFamily | None = None, probe=None) -> TrainResult:
    """VAE-ADAIL loop: rollouts conditioned on the smoothed encoder mean,
    discriminator classification step, VAE step, then PPO.

    ``probe(iteration, encoder, decoder)``, if given, is called before the
    VAE steps of each iteration and once more (with ``cfg.run.iterations``)
    after the last one.
    """
    family = family or get_family(cfg.run.family)
    _check_demos(cfg, family, demos)
    run_dir = _run_dir(cfg)
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, IMITATION_COLUMNS)
    blackout = build_blackout(cfg, family)
    sampler = make_sampler(cfg, family, blackout)
    s_e, a_e, s2_e = _demo_arrays(family, demos)
    x_e = s_e if cfg.disc.state_only else np.concatenate([s_e, a_e], axis=1)
    norm = Normalizer.fit(x_e) if cfg.disc.normalize else None
    disc = make_discriminator(family.obs_dim, family.act_encoding_dim, family.k,
                              substream(cfg.run.seed, "disc-init"), cfg.disc.hidden, cfg.disc.lr,
                              cfg.disc.lambda_grl, (cfg.disc.reward_clip_lo, cfg.disc.reward_clip_hi),
                              cfg.disc.state_only, norm)
    d = cfg.vae.latent_dim
    vrng = substream(cfg.run.seed, "vae-init")
    enc_norm = Normalizer.fit(posterior_features(s_e, a_e, s2_e))
    dec_norm = Normalizer.fit(np.concatenate([s_e, a_e], axis=1))
    if cfg.vae.recon_scale <= 0:
        raise ConfigError("vae.recon_scale must be positive")
    if cfg.vae.per_trajectory < 0 or cfg.vae.per_trajectory == 1:
        raise ConfigError("vae.per_trajectory must be 0 (uniform) or at least 2")
    encoder = make_encoder(2 * family.obs_dim + family.act_encoding_dim, d, vrng, cfg.vae.hidden,
                           cfg.vae.encoder_lr, enc_norm)
    decoder = None  # built from the first imitator batch, see below
    vcfg = VaeConfig(d, cfg.vae.lambda_contrastive, cfg.vae.d0, cfg.vae.n_pairs)
    ctx_model = EncoderContext(encoder)
    context_mode = cfg.run.context if cfg.run.context != "auto" else "posterior"

    pol, vf, opts = _init_policy(cfg, family, context_mode, ctx_dim=d)
    pcfg = ppo_config(cfg, family)
    env_rng = substream(cfg.run.seed, "env")
    act_rng = substream(cfg.run.seed, "rollout")
    ctx_rng = substream(cfg.run.seed, "context")
    ppo_rng = substream(cfg.run.seed, "ppo")
    disc_rng = substream(cfg.run.seed, "disc")
    vae_rng = substream(cfg.run.seed, "vae")
    buffer = ReplayBuffer(cfg.posterior.buffer_size, family.obs_dim, family.act_encoding_dim, 1)
    ep_offset = 0
    metrics, samples = [], []
    for it in range(cfg.run.iterations):
        ctx = ContextSource(context_mode, cfg.ppo.n_envs, d, posterior=ctx_model,
                            beta=cfg.posterior.ema_beta, rng=ctx_rng)
        batch = collect_rollouts(pol, family, act_rng, cfg.ppo.n_envs, cfg.ppo.steps_per_env, sampler, ctx,
                                 env_rng=env_rng)
        samples.append(batch.c_samples)
        s_p, a_p, s2_p, _ = _flat_batch(batch)
        traj = batch.flat("episode_ids") + ep_offset
        ep_offset = int(traj.max()) + 1
        row = {"iteration": it, "env_steps": (it + 1) * cfg.steps_per_iter,
               "episodes": len(batch.episode_lengths),
               "mean_ep_len": float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float(cfg.ppo.steps_per_env)}
        row.update(_disc_steps(cfg, disc, s_p, a_p, s_e, a_e, disc_rng))
        buffer.add(s_p, a_p, s2_p, traj[:, None].astype(np.float64))
        if decoder is None:
            # demos come from one fixed domain, where a linear fit of s' - s is
            # exact; the residual scale must come from randomized dynamics
            d_mean, d_std, d_lin = fit_delta_stats(s_p, a_p, s2_p)
            decoder = make_decoder(family.obs_dim + family.act_encoding_dim, d, family.obs_dim, vrng,
                                   cfg.vae.hidden, cfg.vae.decoder_lr, dec_norm, d_mean,
                                   cfg.vae.recon_scale * d_std, d_lin)
        if probe is not None:
            probe(it, encoder, decoder)
        for _ in range(cfg.vae.steps_per_iter):
            if cfg.vae.per_trajectory > 0:
                s, a, s2, tid = buffer.sample_grouped(vae_rng, max(2, cfg.vae.batch_size // cfg.vae.per_trajectory),
                                                      cfg.vae.per_trajectory)
            else:
                s, a, s2, tid = buffer.sample(vae_rng, cfg.vae.batch_size)
            diag = vae_update(encoder, decoder, s, a, s2, tid[:, 0].astype(np.int64), vcfg, vae_rng)
        row["vae_elbo"], row["vae_contrastive"] = diag["elbo"], diag["contrastive"]
        rewards = imitation_reward(disc, s_p, a_p)
        row["mean_imitation_reward"] = float(np.mean(rewards))
        finish_batch(batch, pol, vf, rewards, pcfg.gamma, pcfg.lam)
        pd = ppo_update(pol, vf, batch, pcfg, opts, ppo_rng)
        row.update({"ppo_kl": pd["approx_kl"], "ppo_clipfrac": pd["clip_frac"], "ppo_epochs": pd["epochs"]})
        metrics.append(row)
        writer.write(row)
        _maybe_checkpoint(cfg, run_dir, it, pol, disc)
    if probe is not None:
        probe(cfg.run.iterations, encoder, decoder)
    samples = np.concatenate(samples) if samples else np.zeros((0, family.k))
    res = TrainResult(pol, vf, metrics, disc, encoder=encoder, decoder=decoder, c_samples=samples)
    if run_dir:
        save_result(run_dir / "final", res, family)
        _write_samples(run_dir, samples, family)
    return res


def train(cfg: RunConfig, demos: DemoSet | None = None) -> TrainResult:
    """Dispatch on ``cfg.run.algorithm``."""
    family = get_family(cfg.run.family)
    algo = cfg.run.algorithm
    if algo == "expert":
        return train_expert(cfg, family)
    if algo == "up_true":
        return up_true_train(cfg, family)
    if algo in IMITATION:
        return imitation_train(cfg, demos, family)
    raise ValueError(f"unknown algorithm {algo!r}")


# ---------------------------------------------------------------------------
# artifacts


def _write_samples(run_dir, samples, family):
    with open(Path(run_dir) / "c_samples.csv", "w") as fh:
        fh.write(",".join(family.param_names) + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _maybe_checkpoint(cfg, run_dir, it, pol, disc=None, posterior=None):
    every = cfg.run.checkpoint_every
    if run_dir is None or every <= 0 or (it + 1) % every:
        return
    base = run_dir / "checkpoints" / f"iter_{it + 1:06d}"
    ad.save_net(f"{base}.policy", pol.net)
    if disc is not None:
        ad.save_checkpoint(f"{base}.disc", disc.entries())
    if posterior is not None:
        ad.save_net(f"{base}.posterior", posterior.net)


def _norm_entries(prefix, norm):
    return {} if norm is None else {f"{prefix}.mean": norm.mean, f"{prefix}.std": norm.std}


def save_policy(path_base, pol: Policy) -> None:
    ad.save_net(f"{path_base}.ckpt", pol.net)
    with open(f"{path_base}.meta", "w") as fh:
        fh.write(f"family_id={pol.family_id}\ncontext_mode={pol.context_mode}\nhead={pol.head}\n"
                 f"ctx_dim={pol.ctx_dim}\nactivations={','.join(pol.net.activations)}\n")


def load_policy(path_base) -> Policy:
    meta = dict(line.split("=", 1) for line in Path(f"{path_base}.meta").read_text().splitlines() if line)
    net = ad.load_net(f"{path_base}.ckpt", meta["activations"].split(","), prefix="pi.")
    family = get_family(meta["family_id"])
    ctx_dim = int(meta["ctx_dim"])
    return Policy(net, meta["head"], meta["context_mode"], family.obs_dim, ctx_dim, family.act_dim,
                  family.family_id)


def save_result(final_dir, res: TrainResult, family: EnvFamily) -> None:
    final_dir = Path(final_dir)
    final_dir.mkdir(parents=True, exist_ok=True)
    save_policy(final_dir / "policy", res.policy)
    ad.save_net(final_dir / "value.ckpt", res.value_fn.net)
    if res.discriminator is not None:
        d = res.discriminator
        ad.save_checkpoint(final_dir / "disc.ckpt", {**d.entries(), **_norm_entries("d.norm", d.norm)})
    if res.posterior is not None:
        q = res.posterior
        ad.save_checkpoint(final_dir / "posterior.ckpt", {**q.net.entries, **_norm_entries("q.norm", q.norm)})
    if res.encoder is not None:
        e = res.encoder
        ad.save_checkpoint(final_dir / "encoder.ckpt", {**e.net.entries, **_norm_entries("enc.norm", e.norm)})
    if res.decoder is not None:
        dec = res.decoder
        extra = {"dec.delta.mean": dec.delta_mean, "dec.delta.std": dec.delta_std}
        if dec.delta_lin is not None:
            extra["dec.delta.lin"] = dec.delta_lin
        ad.save_checkpoint(final_dir / "decoder.ckpt", {**dec.net.entries, **_norm_entries("dec.norm", dec.norm), **extra})


def _split_net(entries, prefix):
    sub = {k: v for k, v in entries.items() if k.startswith(prefix + "W") or k.startswith(prefix + "b")}
    sizes, i = [], 0
    while f"{prefix}W{i}" in sub:
        w = sub[f"{prefix}W{i}"]
        if not sizes:
            sizes.append(w.shape[0])
        sizes.append(w.shape[1])
        i += 1
    return ad.ParamNet(sub, sizes, ["tanh"] * (i - 1) + ["linear"], prefix)


def _load_norm(entries, prefix):
    if f"{prefix}.mean" not in entries:
        return None
    return Normalizer(entries[f"{prefix}.mean"], entries[f"{prefix}.std"])


def load_posterior(path, delta=1.0) -> Posterior:
    entries = ad.load_checkpoint(path)
    return Posterior(_split_net(entries, "q."), delta, _load_norm(entries, "q.norm"))


def load_encoder(path) -> Encoder:
    entries = ad.load_checkpoint(path)
    net = _split_net(entries, "enc.")
    return Encoder(net, net.sizes[-1] // 2, _load_norm(entries, "enc.norm"))


def load_discriminator(path, cfg: RunConfig | None = None) -> Discriminator:
    entries = ad.load_checkpoint(path)
    trunk = _split_net(entries, "d.trunk.")
    trunk.activations = ["tanh"] * len(trunk.activations)
    d = Discriminator(trunk, _split_net(entries, "d.cls."), _split_net(entries, "d.reg."),
                      norm=_load_norm(entries, "d.norm"))
    if cfg is not None:
        d.lambda_grl = cfg.disc.lambda_grl
        d.reward_clip = (cfg.disc.reward_clip_lo, cfg.disc.reward_clip_hi)
        d.state_only = cfg.disc.state_only
    return d
