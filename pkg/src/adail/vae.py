"""Unsupervised dynamics embedding: conditional VAE with a forward-model decoder.

Encoder  q(c | s, a, s')  -> diagonal Gaussian over the latent code.
Decoder  p(s' | s, a, c)  -> unit-variance Gaussian over the next state, expressed
in standardized state-change units (s' - s - mean) / std so the fixed unit
variance is on the scale of the dynamics rather than of the raw state.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .discriminator import Normalizer
from .posterior import posterior_features

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class VaeConfig:
    latent_dim: int = 1
    lambda_contrastive: float = 0.1
    d0: float = 10.0
    n_pairs: int = 64

    def __post_init__(self):
        if self.lambda_contrastive < 0:
            raise ValueError("lambda_contrastive must be >= 0")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")


@dataclass
class Encoder:
    net: ad.ParamNet
    latent_dim: int
    norm: Normalizer | None = None
    opt: ad.AdamState = field(default_factory=ad.AdamState)

    def inputs(self, s, a_enc, s_next):
        x = posterior_features(s, a_enc, s_next)
        return self.norm(x) if self.norm is not None else x


@dataclass
class Decoder:
    net: ad.ParamNet
    obs_dim: int
    norm: Normalizer | None = None       # over (s, a)
    delta_mean: np.ndarray | None = None
    delta_std: np.ndarray | None = None
    delta_lin: np.ndarray | None = None  # (sa_dim + 1, obs_dim) least-squares baseline
    opt: ad.AdamState = field(default_factory=ad.AdamState)

    def sa_inputs(self, s, a_enc):
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a_enc)], axis=1)
        return self.norm(x) if self.norm is not None else x

    def baseline(self, s, a_enc):
        """Expected state change before standardization: a constant or a linear fit."""
        if self.delta_lin is not None:
            s, a_enc = np.atleast_2d(s), np.atleast_2d(a_enc)
            return np.concatenate([s, a_enc, np.ones((len(s), 1))], axis=1) @ self.delta_lin
        return self.delta_mean

    def target(self, s, a_enc, s_next):
        """Next state in the decoder's standardized coordinates."""
        d = np.atleast_2d(s_next) - np.atleast_2d(s)
        if self.delta_std is None:
            return d
        return (d - self.baseline(s, a_enc)) / self.delta_std

    def to_state(self, s, a_enc, y):
        y = np.atleast_2d(y)
        if self.delta_std is not None:
            y = y * self.delta_std + self.baseline(s, a_enc)
        return np.atleast_2d(s) + y


def make_encoder(in_dim, latent_dim, rng, hidden=(200, 200), lr=1e-3, norm=None, zero=False):
    net = ad.init_mlp([in_dim, *hidden, 2 * latent_dim], rng, prefix="enc.", zero=zero)
    return Encoder(net, latent_dim, norm, ad.AdamState(lr))


def make_decoder(sa_dim, latent_dim, obs_dim, rng, hidden=(200, 200), lr=1e-3, norm=None,
                 delta_mean=None, delta_std=None, delta_lin=None, zero=False):
    net = ad.init_mlp([sa_dim + latent_dim, *hidden, obs_dim], rng, prefix="dec.", zero=zero)
    return Decoder(net, obs_dim, norm, delta_mean, delta_std, delta_lin, ad.AdamState(lr))


def fit_delta_stats(s, a_enc, s_next, floor=1e-3):
    """Least-squares linear map (s, a, 1) -> s' - s and the residual scale.

    Standardizing by the residual rather than the raw spread keeps the
    unit-variance likelihood sharp enough that a latent code which explains
    the dynamics-dependent part of the motion is worth its KL cost.
    """
    s, a_enc, s_next = np.atleast_2d(s), np.atleast_2d(a_enc), np.atleast_2d(s_next)
    x = np.concatenate([s, a_enc, np.ones((len(s), 1))], axis=1)
    d = s_next - s
    lin, *_ = np.linalg.lstsq(x, d, rcond=None)
    resid = d - x @ lin
    std = np.maximum(resid.std(axis=0), floor * np.maximum(d.std(axis=0), 1e-12))
    return d.mean(axis=0), std, lin


def _encode_nodes(e: Encoder, x):
    out = ad.forward_mlp(e.net, x)
    d = e.latent_dim
    mu = ad.take_cols(out, 0, d)
    log_var = ad.clip(ad.take_cols(out, d, 2 * d), LOG_VAR_MIN, LOG_VAR_MAX)
    return mu, log_var


def encode(e: Encoder, s, a_enc, s_next):
    """(mu, var) of the diagonal Gaussian posterior per row."""
    out = ad.mlp_numpy(e.net, e.inputs(s, a_enc, s_next))
    d = e.latent_dim
    return out[:, :d], np.exp(np.clip(out[:, d:], LOG_VAR_MIN, LOG_VAR_MAX))


def reparam_sample(mu, var, rng=None, eps=None):
    """mu + sqrt(var) * eps with eps ~ N(0, I); works on arrays or graph nodes."""
    if eps is None:
        eps = rng.standard_normal(np.shape(mu.value if isinstance(mu, ad.Node) else mu))
    if isinstance(mu, ad.Node) or isinstance(var, ad.Node):
        return ad.add(mu, ad.mul(ad.exp(ad.scale(ad.log(var), 0.5)), eps))
    return np.asarray(mu) + np.sqrt(np.asarray(var)) * eps


def kl_diag_gaussians(mu1, var1, mu2, var2):
    """KL(N(mu1, var1) || N(mu2, var2)) summed over the last axis."""
    mu1, var1, mu2, var2 = (np.asarray(v, dtype=np.float64) for v in (mu1, var1, mu2, var2))
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * np.sum(np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0, axis=-1)


def kl_node(mu1, lv1, mu2, lv2):
    """Graph version over log-variances, summed over the last axis."""
    diff = ad.sub(mu1, mu2)
    term = ad.mul(ad.add(ad.exp(lv1), ad.square(diff)), ad.exp(ad.neg(lv2)))
    return ad.scale(ad.total(ad.add(ad.sub(ad.sub(lv2, lv1), 1.0), term), axis=-1), 0.5)


def kl_to_prior_node(mu, log_var):
    inner = ad.sub(ad.add(ad.exp(log_var), ad.square(mu)), ad.add(log_var, 1.0))
    return ad.scale(ad.total(inner, axis=-1), 0.5)


def elbo_node(e: Encoder, dec: Decoder, s, a_enc, s_next, eps):
    """Mean ELBO node plus its (reconstruction, KL) parts, one sample per datum."""
    mu, log_var = _encode_nodes(e, e.inputs(s, a_enc, s_next))
    c = ad.add(mu, ad.mul(ad.exp(ad.scale(log_var, 0.5)), eps))
    y_hat = ad.forward_mlp(dec.net, ad.concat([dec.sa_inputs(s, a_enc), c], axis=1))
    y = dec.target(s, a_enc, s_next)
    recon = ad.sub(ad.scale(ad.total(ad.square(ad.sub(y, y_hat)), axis=1), -0.5),
                   0.5 * dec.obs_dim * ad.LOG_2PI)
    kl = kl_to_prior_node(mu, log_var)
    return ad.mean(ad.sub(recon, kl)), float(np.mean(recon.value)), float(np.mean(kl.value))


def elbo(e: Encoder, dec: Decoder, s, a_enc, s_next, rng=None, eps=None) -> float:
    if eps is None:
        eps = rng.standard_normal((len(np.atleast_2d(s)), e.latent_dim))
    return float(elbo_node(e, dec, s, a_enc, s_next, eps)[0].value)


def contrastive_from_kls(kl_same, kl_diff, d0):
    """KL_same - min(KL_diff, D0), averaged over pairs."""
    return float(np.mean(np.asarray(kl_same) - np.minimum(np.asarray(kl_diff), d0)))


def contrastive_node(e: Encoder, same_pair, diff_pair, d0):
    """Same-trajectory KL minus clipped different-trajectory KL, mean over pairs.

    Each pair is (x_first, x_second) of already-normalized encoder inputs.
    """
    mu0, lv0 = _encode_nodes(e, same_pair[0])
    mu1, lv1 = _encode_nodes(e, same_pair[1])
    mu2, lv2 = _encode_nodes(e, diff_pair[0])
    mu3, lv3 = _encode_nodes(e, diff_pair[1])
    kl_same = kl_node(mu0, lv0, mu1, lv1)
    kl_diff = kl_node(mu2, lv2, mu3, lv3)
    return ad.mean(ad.sub(kl_same, ad.minimum(kl_diff, d0)))


def contrastive_loss(e: Encoder, same_pair, diff_pair, d0) -> float:
    return float(contrastive_node(e, same_pair, diff_pair, d0).value)


def sample_pairs(traj_ids, rng, n_pairs):
    """Index pairs from the same trajectory and from different trajectories."""
    traj_ids = np.asarray(traj_ids)
    uniq = np.unique(traj_ids)
    if len(uniq) < 2:
        raise ValueError("contrastive pairs need at least two trajectories")
    members = {t: np.flatnonzero(traj_ids == t) for t in uniq}
    multi = [t for t in uniq if len(members[t]) >= 2]
    if not multi:
        raise ValueError("no trajectory has two transitions to form a same pair")
    same = np.empty((n_pairs, 2), dtype=np.int64)
    diff = np.empty((n_pairs, 2), dtype=np.int64)
    for i in range(n_pairs):
        t = multi[rng.integers(len(multi))]
        same[i] = rng.choice(members[t], size=2, replace=False)
        t0, t1 = rng.choice(uniq, size=2, replace=False)
        diff[i] = (rng.choice(members[t0]), rng.choice(members[t1]))
    return same, diff


def vae_objective(e: Encoder, dec: Decoder, s, a_enc, s_next, eps, cfg: VaeConfig, pairs=None):
    """-ELBO + lambda * L_contrastive as a graph node, with diagnostics."""
    elbo_v, recon, kl = elbo_node(e, dec, s, a_enc, s_next, eps)
    loss = ad.neg(elbo_v)
    diag = {"elbo": float(elbo_v.value), "recon": recon, "kl": kl, "contrastive": 0.0}
    if cfg.lambda_contrastive > 0:
        if pairs is None:
            raise ValueError("contrastive pairs required when lambda_contrastive > 0")
        x = e.inputs(s, a_enc, s_next)
        same, diff = pairs
        con = contrastive_node(e, (x[same[:, 0]], x[same[:, 1]]), (x[diff[:, 0]], x[diff[:, 1]]), cfg.d0)
        loss = ad.add(loss, ad.scale(con, cfg.lambda_contrastive))
        diag["contrastive"] = float(con.value)
    return loss, diag


def vae_update(e: Encoder, dec: Decoder, s, a_enc, s_next, traj_ids, cfg: VaeConfig, rng):
    """One joint Adam step on encoder and decoder."""
    eps = rng.standard_normal((len(s), e.latent_dim))
    pairs = sample_pairs(traj_ids, rng, cfg.n_pairs) if cfg.lambda_contrastive > 0 else None
    loss, diag = vae_objective(e, dec, s, a_enc, s_next, eps, cfg, pairs)
    if not math.isfinite(float(loss.value)):
        raise FloatingPointError("VAE loss is NaN; update aborted")
    grads = ad.backward(loss, nets=(e.net, dec.net))
    ad.adam_step(e.net, grads, e.opt)
    ad.adam_step(dec.net, grads, dec.opt)
    return diag


class EncoderContext:
    """Adapter so the policy context machinery can smooth encoder means."""

    def __init__(self, e: Encoder):
        self.e = e
        self.k = e.latent_dim

    def predict(self, s, a_enc, s_next, c_true=None):
        return encode(self.e, s, a_enc, s_next)[0]

    def initial_context(self, c_norm):
        return np.zeros((len(c_norm), self.k))


def write_latent_dump(path, traj_ids, true_params, mu, var) -> None:
    true_params, mu, var = np.atleast_2d(true_params), np.atleast_2d(mu), np.atleast_2d(var)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id"] + [f"true{i}" for i in range(true_params.shape[1])]
                   + [f"mu{i}" for i in range(mu.shape[1])] + [f"var{i}" for i in range(var.shape[1])])
        for row in zip(traj_ids, true_params, mu, var):
            w.writerow([int(row[0])] + [repr(float(v)) for v in np.concatenate(row[1:])])
