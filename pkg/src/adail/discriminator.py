"""GAIL discriminator with a shared trunk and a gradient-reversed dynamics head.

The trunk maps (s, a) to features.  ``cls`` reads the features directly and
separates expert (label 1) from imitator (label 0) pairs; ``reg`` reads them
through a gradient reversal node and regresses the normalized dynamics
parameters, which pushes the trunk towards dynamics-invariant features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class Normalizer:
    """Frozen affine input normalization (fit once on expert data)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, floor=1e-2) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    @classmethod
    def identity(cls, dim) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x):
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) / self.std, -10.0, 10.0)


@dataclass
class Discriminator:
    trunk: ad.ParamNet
    cls_head: ad.ParamNet
    reg_head: ad.ParamNet
    lambda_grl: float = 1.0
    reward_clip: tuple = (0.0, 10.0)
    state_only: bool = False
    norm: Normalizer | None = None
    cls_opt: ad.AdamState = field(default_factory=ad.AdamState)
    reg_opt: ad.AdamState = field(default_factory=ad.AdamState)
    # one optimizer state for the shared trunk, fed by both objectives, so the
    # reversed regression gradient keeps its lambda-scaled size relative to the
    # classification gradient (separate Adam states would normalize lambda away)
    trunk_opt: ad.AdamState = field(default_factory=ad.AdamState)

    @property
    def input_dim(self) -> int:
        return self.trunk.sizes[0]

    @property
    def k(self) -> int:
        return self.reg_head.sizes[-1]

    def nets(self):
        return (self.trunk, self.cls_head, self.reg_head)

    def entries(self) -> dict:
        out = {}
        for net in self.nets():
            out.update(net.entries)
        return out


def make_discriminator(obs_dim, act_enc_dim, k, rng, hidden=(32, 32), lr=1e-3, lambda_grl=1.0,
                       reward_clip=(0.0, 10.0), state_only=False, norm=None, zero=False):
    in_dim = obs_dim + (0 if state_only else act_enc_dim)
    trunk = ad.init_mlp([in_dim, *hidden], rng, activations=["tanh"] * len(hidden),
                        prefix="d.trunk.", zero=zero)
    cls_head = ad.init_mlp([hidden[-1], 1], rng, prefix="d.cls.", zero=zero)
    reg_head = ad.init_mlp([hidden[-1], k], rng, prefix="d.reg.", zero=zero)
    return Discriminator(trunk, cls_head, reg_head, lambda_grl, tuple(reward_clip), state_only,
                         norm if norm is not None else Normalizer.identity(in_dim),
                         ad.AdamState(lr), ad.AdamState(lr), ad.AdamState(lr))


def disc_inputs(d: Discriminator, s, a_enc) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    x = s if d.state_only else np.concatenate([s, np.atleast_2d(a_enc)], axis=1)
    if x.shape[1] != d.input_dim:
        raise ValueError(f"discriminator expects input width {d.input_dim}, got {x.shape[1]}")
    return d.norm(x)


def _logit_np(d, x):
    feats = ad.mlp_numpy(d.trunk, x)
    return ad.mlp_numpy(d.cls_head, feats)[:, 0], feats


def disc_forward(d: Discriminator, s, a_enc):
    """(p_expert, c_pred) for each row; c_pred is in normalized parameter space."""
    x = disc_inputs(d, s, a_enc)
    logit, feats = _logit_np(d, x)
    c_pred = ad.mlp_numpy(d.reg_head, feats)
    return ad._sigmoid(logit), c_pred


def reward_from_prob(p, reward_clip=(0.0, 10.0)):
    """-log(1 - p) clipped; p may be exactly 0 or 1."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        r = -np.log1p(-p)
    return np.clip(r, *reward_clip)


def imitation_reward(d: Discriminator, s, a_enc) -> np.ndarray:
    """-log(1 - D(s, a)) computed from the logit as softplus(logit), then clipped."""
    logit, _ = _logit_np(d, disc_inputs(d, s, a_enc))
    return np.clip(np.logaddexp(0.0, logit), *d.reward_clip)


def cls_loss_node(d: Discriminator, x_policy, x_expert):
    """Class-balanced binary cross-entropy, expert = 1."""
    z_e = ad.forward_mlp(d.cls_head, ad.forward_mlp(d.trunk, x_expert))
    z_p = ad.forward_mlp(d.cls_head, ad.forward_mlp(d.trunk, x_policy))
    loss_e = ad.mean(ad.softplus(ad.neg(z_e)))  # -log sigmoid(z)
    loss_p = ad.mean(ad.softplus(z_p))          # -log (1 - sigmoid(z))
    return ad.scale(ad.add(loss_e, loss_p), 0.5), z_p.value[:, 0], z_e.value[:, 0]


def disc_update_cls(d: Discriminator, s_pol, a_pol, s_exp, a_exp):
    """One Adam step on trunk + cls head.  Returns loss and balanced accuracy."""
    if len(s_pol) == 0 or len(s_exp) == 0:
        raise ValueError("both batches must be non-empty")
    x_p, x_e = disc_inputs(d, s_pol, a_pol), disc_inputs(d, s_exp, a_exp)
    loss, z_p, z_e = cls_loss_node(d, x_p, x_e)
    if not np.isfinite(loss.value):
        raise FloatingPointError("discriminator loss is NaN; update aborted")
    grads = ad.backward(loss)
    grads = {k: v for k, v in grads.items() if not k.startswith("d.reg.")}
    ad.adam_step(d.trunk, grads, d.trunk_opt)
    ad.adam_step(d.cls_head, grads, d.cls_opt)
    acc = 0.5 * (np.mean(z_e > 0) + np.mean(z_p <= 0))
    return {"cls_loss": float(loss.value), "cls_acc": float(acc)}


def reg_loss_node(d: Discriminator, x, c_norm, use_grl=True):
    feats = ad.forward_mlp(d.trunk, x)
    if use_grl:
        feats = ad.grl(feats, d.lambda_grl)
    pred = ad.forward_mlp(d.reg_head, feats)
    return ad.mean(ad.total(ad.square(ad.sub(pred, c_norm)), axis=1))


def reg_gradients(d: Discriminator, s, a_enc, c_norm, use_grl=True):
    """Gradients of the dynamics-regression MSE for trunk and reg head."""
    loss = reg_loss_node(d, disc_inputs(d, s, a_enc), np.atleast_2d(c_norm), use_grl)
    grads = ad.backward(loss, nets=(d.trunk, d.reg_head))
    return float(loss.value), {k: v for k, v in grads.items() if not k.startswith("d.cls.")}


def disc_update_reg(d: Discriminator, s, a_enc, c_norm):
    """One Adam step regressing c through the GRL; the cls head is untouched."""
    if c_norm is None:
        raise ValueError("dynamics labels required for the regression update")
    c_norm = np.atleast_2d(np.asarray(c_norm, dtype=np.float64))
    if c_norm.shape != (len(np.atleast_2d(s)), d.k):
        raise ValueError(f"labels must have shape (n, {d.k})")
    loss, grads = reg_gradients(d, s, a_enc, c_norm, use_grl=True)
    if not math.isfinite(loss):
        raise FloatingPointError("regression loss is NaN; update aborted")
    ad.adam_step(d.trunk, grads, d.trunk_opt)
    ad.adam_step(d.reg_head, grads, d.reg_opt)
    return {"reg_mse": loss}
