"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite.

Each driver trains what it needs from scratch under fixed seeds and returns
a plain dict of per-seed statistics plus the pass/fail verdicts of the
directional checks it supports.  Budgets live in module-level dicts so the
scripts and the tests run exactly the same configuration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, apply_overrides, defaults_for
from .envs import DemoSet, GridSpec, get_family
from .evaluation import blackout_region, grid_eval, posterior_rmse_grid, run_episodes
from .posterior import OraclePosterior
from .seeding import substream
from .trainer import (TrainResult, collect_demos, evaluate_at, imitation_train, train_expert,
                      vae_adail_train)
from .vae import EncoderContext, elbo, encode, kl_diag_gaussians

EXPERT_OVERRIDES = {
    "cartpole": {"run.iterations": 500},
    "puck": {"run.iterations": 300, "policy.lr": 3e-4},
    "puck_friction": {"run.iterations": 300, "policy.lr": 3e-4},
}

# imitation budgets; the discriminator takes several steps per iteration at a
# higher rate than the family default so reward shaping keeps up with the policy,
# and the posterior takes enough steps per iteration to track its buffer
IMITATION_OVERRIDES = {
    "cartpole": {"disc.steps_per_iter": 5, "disc.lr": 1e-3},
    "puck": {"disc.steps_per_iter": 5, "disc.lr": 1e-3, "policy.lr": 3e-4, "posterior.steps_per_iter": 50},
    "puck_friction": {"disc.steps_per_iter": 5, "disc.lr": 1e-3, "policy.lr": 3e-4,
                      "posterior.steps_per_iter": 50},
}

ITERATIONS = {
    "gail": 100,
    "fig4a": 150,
    "fig4b": 100,
    "posterior": 100,
    "blackout": 100,
    "vae": 150,
}

VAE_OVERRIDES = {"vae.lambda_contrastive": 10.0, "vae.d0": 0.5, "vae.recon_scale": 0.3,
                 "vae.steps_per_iter": 50, "vae.batch_size": 128, "vae.hidden": "64,64",
                 "vae.encoder_lr": 1e-3, "vae.decoder_lr": 1e-3}

EVAL_CELLS = 13
EVAL_EPISODES = 10
EVAL_SEED = 3
N_DEMOS = 16


@dataclass
class Setup:
    family_id: str
    expert: TrainResult
    demos: DemoSet


def make_config(family: str, algorithm: str, seed: int, iterations: int, extra=None) -> RunConfig:
    cfg = defaults_for(family, algorithm)
    over = {"run.seed": seed, "run.iterations": iterations}
    if algorithm == "expert":
        over.update(EXPERT_OVERRIDES[family])
    else:
        over.update(IMITATION_OVERRIDES[family])
    if algorithm == "vae_adail":
        over.update(VAE_OVERRIDES)
    over.update(extra or {})
    return apply_overrides(cfg, over)


def prepare(family: str, seed: int = 0, n_demos: int = N_DEMOS) -> Setup:
    """Train the source-domain expert and collect its demonstrations."""
    fam = get_family(family)
    cfg = make_config(family, "expert", seed, EXPERT_OVERRIDES[family]["run.iterations"])
    expert = train_expert(cfg, fam)
    demos = collect_demos(expert.policy, fam, fam.source_values, n_demos, seed + 1)
    return Setup(family, expert, demos)


def _eval_posterior(res: TrainResult):
    if res.encoder is not None:
        return EncoderContext(res.encoder)
    return res.posterior


def evaluate(res: TrainResult, family: str, context: str, cells=EVAL_CELLS, episodes=EVAL_EPISODES,
             seed=EVAL_SEED, mask=None):
    fam = get_family(family)
    grid = GridSpec.for_family(fam, cells)
    return grid_eval(res.policy, fam, grid, context, episodes, seed, posterior=_eval_posterior(res), mask=mask)


def _train(setup: Setup, algorithm: str, seed: int, iterations: int, extra=None) -> tuple[TrainResult, float]:
    t0 = time.time()
    res = imitation_train(make_config(setup.family_id, algorithm, seed, iterations, extra), setup.demos)
    return res, time.time() - t0


# ---------------------------------------------------------------------------
# cartpole: expert and plain GAIL at the source domain


def source_return(policy, family: str, episodes=100, seed=EVAL_SEED) -> float:
    fam = get_family(family)
    return float(np.mean(evaluate_at(policy, fam, fam.source_values, episodes, seed)))


def expert_check(seed=0) -> dict:
    """Train the cartpole expert twice under one seed; report the 100-episode return."""
    fam = get_family("cartpole")
    cfg = make_config("cartpole", "expert", seed, EXPERT_OVERRIDES["cartpole"]["run.iterations"])
    t0 = time.time()
    first = train_expert(cfg, fam)
    secs = time.time() - t0
    second = train_expert(make_config("cartpole", "expert", seed, cfg.run.iterations), fam)
    ret = source_return(first.policy, "cartpole")
    same = first.metrics == second.metrics and all(
        np.array_equal(first.policy.net.entries[k], second.policy.net.entries[k])
        for k in first.policy.net.entries)
    out = {"return": ret, "iterations": len(first.metrics), "deterministic": bool(same), "seconds": secs}
    out["checks"] = {"return_195": ret >= 195.0, "within_500": len(first.metrics) <= 500,
                     "deterministic": out["deterministic"]}
    return out


def gail_sanity(setup: Setup, seed=0, iterations=None) -> dict:
    iterations = iterations or ITERATIONS["gail"]
    res, secs = _train(setup, "gail", seed, iterations)
    expert = source_return(setup.expert.policy, setup.family_id)
    gail = source_return(res.policy, setup.family_id)
    out = {"expert_return": expert, "gail_return": gail, "seconds": secs}
    out["checks"] = {"gail_90pct": gail >= 0.9 * expert}
    return out


# ---------------------------------------------------------------------------
# cartpole: generalization across the force multiplier


def _side_means(values, centers):
    pos = values[centers >= 0.3 - 1e-9].mean()
    neg = values[centers <= -0.3 + 1e-9].mean()
    return float(pos), float(neg)


def fig4a(setup: Setup, seeds=(0, 1, 2), iterations=None) -> dict:
    iterations = iterations or ITERATIONS["fig4a"]
    centers = GridSpec.for_family(get_family("cartpole"), EVAL_CELLS).axis_centers(0)
    out = {"seeds": list(seeds), "runs": {}}
    for algo, ctx in (("gail_rand", "none"), ("adail_pred", "posterior"), ("adail_rand", "random")):
        rows = []
        for seed in seeds:
            res, secs = _train(setup, algo, seed, iterations)
            h = evaluate(res, "cartpole", ctx)
            pos, neg = _side_means(h.values, centers)
            rows.append({"seed": seed, "values": h.values.tolist(), "grid_mean": h.aggregate()[0],
                         "pos": pos, "neg": neg, "seconds": secs})
        out["runs"][algo] = rows
    gr, ap, ar = (out["runs"][a] for a in ("gail_rand", "adail_pred", "adail_rand"))
    # per-seed statistics, median across seeds
    med = lambda xs: float(np.median(xs))
    # GAIL-rand learns one side; "positive side" is read as the side it learned
    learned = [max(r["pos"], r["neg"]) for r in gr]
    other = [min(r["pos"], r["neg"]) for r in gr]
    gr_pos = med([r["pos"] for r in gr])
    gr_neg = med([r["neg"] for r in gr])
    out["stats"] = {
        "gail_rand_pos": gr_pos, "gail_rand_neg": gr_neg,
        "gail_rand_learned_side": med(learned), "gail_rand_other_side": med(other),
        "adail_pred_neg": med([r["neg"] for r in ap]),
        "adail_pred_grid": med([r["grid_mean"] for r in ap]),
        "adail_rand_grid": med([r["grid_mean"] for r in ar]),
    }
    s = out["stats"]
    out["checks"] = {
        "a": gr_pos >= 150 and gr_neg <= 0.5 * gr_pos,
        "b": s["adail_pred_neg"] >= 2 * gr_neg,
        "c": s["adail_rand_grid"] <= 0.7 * s["adail_pred_grid"],
    }
    return out


# ---------------------------------------------------------------------------
# puck: GRL ablation, posterior quality, blackout


def fig4b(setup: Setup, seeds=(0, 1, 2, 3, 4), iterations=None) -> dict:
    iterations = iterations or ITERATIONS["fig4b"]
    out = {"seeds": list(seeds)}
    for name, grl in (("without_grl", False), ("with_grl", True)):
        means = []
        for seed in seeds:
            res, _ = _train(setup, "gail_rand", seed, iterations, {"disc.use_grl": grl})
            means.append(evaluate(res, setup.family_id, "none").aggregate()[0])
        out[name] = means
    out["mean_with"] = float(np.mean(out["with_grl"]))
    out["mean_without"] = float(np.mean(out["without_grl"]))
    out["checks"] = {"grl_not_worse": out["mean_with"] >= out["mean_without"]}
    return out


def posterior_quality(setup: Setup, seed=0, iterations=None) -> dict:
    iterations = iterations or ITERATIONS["posterior"]
    fam = get_family(setup.family_id)
    res, _ = _train(setup, "adail_pred", seed, iterations)
    grid = GridSpec.for_family(fam, EVAL_CELLS)
    h = posterior_rmse_grid(res.posterior, res.policy, fam, grid, EVAL_EPISODES, EVAL_SEED)
    per_dim = h.per_dim.reshape(-1, fam.k).mean(axis=0)
    widths = np.asarray(fam.hi) - np.asarray(fam.lo)
    small = GridSpec.for_family(fam, 5)
    true = grid_eval(res.policy, fam, small, "true", 2, EVAL_SEED)
    oracle = grid_eval(res.policy, fam, small, "posterior", 2, EVAL_SEED, posterior=OraclePosterior(fam.k))
    out = {"rmse_per_dim": per_dim.tolist(), "rmse_fraction": (per_dim / widths).tolist(),
           "oracle_identical": bool(np.array_equal(true.values, oracle.values))}
    out["checks"] = {"rmse_below_25pct": bool(np.all(per_dim < 0.25 * widths)),
                     "oracle_identical": out["oracle_identical"]}
    return out


def blackout(setup: Setup, seeds=(0, 1, 2), iterations=None, size="5x5") -> dict:
    iterations = iterations or ITERATIONS["blackout"]
    fam = get_family(setup.family_id)
    grid = GridSpec.for_family(fam, EVAL_CELLS)
    mask = blackout_region(grid, size, grid.cell_of(fam.source_values))
    rows = []
    for seed in seeds:
        extra = {"run.blackout": size, "run.grid_cells": EVAL_CELLS}
        pred, _ = _train(setup, "adail_pred", seed, iterations, extra)
        cells = grid.cells_of(pred.c_samples)
        sampled_masked = int(mask[tuple(cells.T)].sum())
        rmse = posterior_rmse_grid(pred.posterior, pred.policy, fam, grid, EVAL_EPISODES, EVAL_SEED, mask=mask)
        ret_pred = evaluate(pred, setup.family_id, "posterior", mask=mask)
        ret_true = evaluate(pred, setup.family_id, "true", mask=mask)
        rows.append({"seed": seed, "masked_samples": sampled_masked, "n_samples": len(cells),
                     "rmse_in": rmse.region_mean(mask), "rmse_out": rmse.region_mean(~mask),
                     "pred_in": ret_pred.region_mean(mask), "true_in": ret_true.region_mean(mask)})
    med = lambda key: float(np.median([r[key] for r in rows]))
    out = {"runs": rows, "stats": {k: med(k) for k in ("rmse_in", "rmse_out", "pred_in", "true_in")}}
    s = out["stats"]
    out["checks"] = {"a": all(r["masked_samples"] == 0 for r in rows),
                     "b": s["rmse_in"] > s["rmse_out"],
                     "c": s["pred_in"] <= s["true_in"]}
    return out


# ---------------------------------------------------------------------------
# VAE-ADAIL on 1D friction


def _spearman(x, y) -> float:
    rx = np.argsort(np.argsort(x, kind="stable"), kind="stable").astype(float)
    ry = np.argsort(np.argsort(y, kind="stable"), kind="stable").astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


def _rollout_transitions(policy, family, frictions, seed, context_source="none", posterior=None):
    """One episode per friction value; arrays shaped (n_traj, T, dim)."""
    params = np.asarray(frictions, dtype=np.float64).reshape(-1, 1)
    rngs = [substream(seed, "vae-rollout", i) for i in range(len(params))]
    record = []
    run_episodes(policy, get_family(family), params, rngs, context_source, posterior, record=record)
    s, a, s2 = (np.stack([r[i] for r in record], axis=1) for i in range(3))
    return s, a, s2


def _sym_kl(mu1, var1, mu2, var2):
    return kl_diag_gaussians(mu1, var1, mu2, var2) + kl_diag_gaussians(mu2, var2, mu1, var1)


def latent_diagnostics(encoder, policy, family, seed=0, per_level=10, n_pairs=500, n_points=300) -> dict:
    """Held-out rollouts at frictions {0, 2, 4}: pair KLs and mean-vs-friction rank correlation.

    A pair "wins" when two transitions of one trajectory are closer (symmetrized
    KL) than the first of them and a transition from a trajectory with a
    different friction level.
    """
    levels = np.repeat([0.0, 2.0, 4.0], per_level)
    s, a, s2 = _rollout_transitions(policy, family, levels, seed + 1000, "posterior", EncoderContext(encoder))
    n_traj, T = s.shape[:2]
    mu, var = encode(encoder, s.reshape(n_traj * T, -1), a.reshape(n_traj * T, -1), s2.reshape(n_traj * T, -1))
    mu, var = mu.reshape(n_traj, T, -1), var.reshape(n_traj, T, -1)
    rng = substream(seed, "latent-diagnostics")
    wins = 0
    for _ in range(n_pairs):
        i = rng.integers(n_traj)
        j = rng.choice(np.flatnonzero(levels != levels[i]))
        t1, t2, t3 = rng.choice(T, size=2, replace=False).tolist() + [int(rng.integers(T))]
        same = _sym_kl(mu[i, t1], var[i, t1], mu[i, t2], var[i, t2])
        diff = _sym_kl(mu[i, t1], var[i, t1], mu[j, t3], var[j, t3])
        wins += bool(same < diff)
    pick = rng.choice(n_traj * T, size=n_points, replace=False)
    rho = _spearman(mu.reshape(n_traj * T, -1)[pick, 0], np.repeat(levels, T)[pick])
    return {"pair_fraction": wins / n_pairs, "spearman": rho}


def vae_experiment(setup: Setup, seed=0, iterations=None) -> dict:
    iterations = iterations or ITERATIONS["vae"]
    fam = get_family(setup.family_id)
    # held-out batch: expert rollouts at random frictions, never seen by the VAE
    held_fr = substream(seed, "vae-heldout").uniform(fam.lo[0], fam.hi[0], size=40)
    hs, ha, hs2 = (x.reshape(-1, x.shape[-1]) for x in _rollout_transitions(setup.expert.policy, setup.family_id,
                                                                            held_fr, seed + 2000))
    cfg = make_config(setup.family_id, "vae_adail", seed, iterations)
    # common random numbers so the two ELBO readings differ only through the weights
    eps = substream(seed, "vae-heldout-eps").standard_normal((len(hs), cfg.vae.latent_dim))
    elbos = {}

    def probe(it, enc, dec):
        if it in (0, iterations):
            elbos[it] = elbo(enc, dec, hs, ha, hs2, eps=eps)

    t0 = time.time()
    vae = vae_adail_train(cfg, setup.demos, fam, probe=probe)
    vae_secs = time.time() - t0
    # the VAE loop has no GRL regression step, so the supervised reference runs
    # without it too and the two differ only in how the dynamics are inferred
    sup, _ = _train(setup, "adail_pred", seed, iterations, {"disc.use_grl": False})
    diag = latent_diagnostics(vae.encoder, vae.policy, setup.family_id, seed)
    ret_vae = evaluate(vae, setup.family_id, "posterior").aggregate()[0]
    ret_sup = evaluate(sup, setup.family_id, "posterior").aggregate()[0]
    out = {"elbo_first": elbos[0], "elbo_last": elbos[iterations], **diag, "return_vae": ret_vae,
           "return_adail_pred": ret_sup, "seconds": vae_secs}
    out["checks"] = {
        "elbo_improves": out["elbo_last"] > out["elbo_first"],
        "pairs_70pct": diag["pair_fraction"] >= 0.7,
        "spearman": abs(diag["spearman"]) > 0.5,
        "return_within_25pct": abs(ret_vae - ret_sup) <= 0.25 * abs(ret_sup),
    }
    return out
