"""Supervised dynamics posterior Q(c | s, a, s') trained with a Huber loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .discriminator import Normalizer


def huber_loss(c, c_hat, delta: float) -> float:
    """Per-dimension Huber summed over dimensions, averaged over rows."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    c_hat = np.atleast_2d(np.asarray(c_hat, dtype=np.float64))
    if c.shape != c_hat.shape:
        raise ValueError("c and c_hat must have equal shapes")
    e = np.abs(c - c_hat)
    per = np.where(e < delta, 0.5 * e * e, delta * e - 0.5 * delta * delta)
    return float(per.sum(axis=1).mean())


def huber_grad(c, c_hat, delta: float) -> np.ndarray:
    """d huber / d c_hat per element (unbatched)."""
    e = np.asarray(c_hat, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    return np.where(np.abs(e) < delta, e, delta * np.sign(e))


@dataclass
class Posterior:
    net: ad.ParamNet
    delta: float = 1.0
    norm: Normalizer | None = None
    opt: ad.AdamState = field(default_factory=ad.AdamState)

    @property
    def k(self) -> int:
        return self.net.sizes[-1]

    def inputs(self, s, a_enc, s_next):
        x = posterior_features(s, a_enc, s_next)
        if x.shape[1] != self.net.sizes[0]:
            raise ValueError(f"posterior expects input width {self.net.sizes[0]}, got {x.shape[1]}")
        return self.norm(x) if self.norm is not None else x

    def predict(self, s, a_enc, s_next, c_true=None):
        return posterior_predict(self, s, a_enc, s_next)

    def initial_context(self, c_norm):
        return np.zeros((len(c_norm), self.k))


def posterior_features(s, a_enc, s_next) -> np.ndarray:
    """Rows of (s, a, s' - s); the state change carries the dynamics signal."""
    s, s_next = np.atleast_2d(s), np.atleast_2d(s_next)
    return np.concatenate([s, np.atleast_2d(a_enc), s_next - s], axis=1)


class OraclePosterior:
    """Returns the true normalized parameters; the zero-error reference."""

    def __init__(self, k: int):
        self.k = k

    def predict(self, s, a_enc, s_next, c_true=None):
        return np.array(np.atleast_2d(c_true), dtype=np.float64)

    def initial_context(self, c_norm):
        return np.array(np.atleast_2d(c_norm), dtype=np.float64)


def make_posterior(in_dim, k, rng, hidden=(72, 177), lr=1e-3, delta=1.0, norm=None, zero=False):
    net = ad.init_mlp([in_dim, *hidden, k], rng, prefix="q.", zero=zero)
    return Posterior(net, delta, norm, ad.AdamState(lr))


def posterior_predict(q: Posterior, s, a_enc, s_next) -> np.ndarray:
    """Normalized parameter estimate per row, clipped to [-1, 1]."""
    return np.clip(ad.mlp_numpy(q.net, q.inputs(s, a_enc, s_next)), -1.0, 1.0)


def posterior_loss_node(q: Posterior, s, a_enc, s_next, c_norm):
    pred = ad.forward_mlp(q.net, q.inputs(s, a_enc, s_next))
    per = ad.huber(ad.sub(pred, np.atleast_2d(c_norm)), q.delta)
    return ad.mean(ad.total(per, axis=1))


def posterior_update(q: Posterior, s, a_enc, s_next, c_norm):
    """One Adam step on the mean Huber loss of a labelled batch."""
    loss = posterior_loss_node(q, s, a_enc, s_next, c_norm)
    if not math.isfinite(float(loss.value)):
        raise FloatingPointError("posterior loss is NaN; update aborted")
    grads = ad.backward(loss, nets=(q.net,))
    ad.adam_step(q.net, grads, q.opt)
    return {"post_loss": float(loss.value)}


class ReplayBuffer:
    """Ring buffer of labelled (s, a, s', c) transitions with uniform sampling."""

    def __init__(self, capacity, obs_dim, act_dim, k):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, act_dim))
        self.s_next = np.zeros((self.capacity, obs_dim))
        self.c = np.zeros((self.capacity, k))
        self.size = 0
        self.pos = 0
        self._groups = None

    def add(self, s, a, s_next, c):
        n = len(s)
        idx = (self.pos + np.arange(n)) % self.capacity
        self.s[idx], self.a[idx], self.s_next[idx], self.c[idx] = s, a, s_next, c
        self.pos = int((self.pos + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        self._groups = None

    def sample(self, rng, n):
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, self.size, size=n)
        return self.s[idx], self.a[idx], self.s_next[idx], self.c[idx]

    def sample_grouped(self, rng, n_groups, per):
        """``n_groups`` random label values (column 0) with ``per`` rows each, drawn with replacement.

        Only labels with at least two stored rows are eligible.  Used with
        trajectory ids as labels so every batch holds same-trajectory pairs.
        """
        if self._groups is None:
            labels = self.c[:self.size, 0]
            order = np.argsort(labels, kind="stable")
            _, starts, counts = np.unique(labels[order], return_index=True, return_counts=True)
            keep = counts >= 2
            self._groups = (order, starts[keep], counts[keep])
        order, starts, counts = self._groups
        if len(starts) == 0:
            raise ValueError("no label has two stored rows")
        g = rng.integers(0, len(starts), size=n_groups)
        offs = np.floor(rng.random((n_groups, per)) * counts[g, None]).astype(np.int64)
        idx = order[(starts[g, None] + offs).reshape(-1)]
        return self.s[idx], self.a[idx], self.s_next[idx], self.c[idx]


# ---------------------------------------------------------------------------
# Huber as a likelihood: gradient-level check of the Gaussian/Laplace reading


@dataclass
class HuberGradientReport:
    inside_constants: np.ndarray
    outside_constants: np.ndarray

    @property
    def inside_c(self) -> float:
        return float(np.mean(self.inside_constants)) if self.inside_constants.size else math.nan

    @property
    def outside_c(self) -> float:
        return float(np.mean(self.outside_constants)) if self.outside_constants.size else math.nan

    def holds(self, tol=1e-10) -> bool:
        ok = True
        for consts in (self.inside_constants, self.outside_constants):
            if consts.size:
                ok &= bool(np.all(consts > 0)) and float(np.ptp(consts)) <= tol * max(1.0, abs(consts[0]))
        return ok


def gaussian_logpdf_grad(c, c_hat, sigma):
    """d/d c_hat of log N(c; c_hat, sigma^2)."""
    return (np.asarray(c) - np.asarray(c_hat)) / sigma ** 2


def laplace_logpdf_grad(c, c_hat, b):
    """d/d c_hat of log Laplace(c; c_hat, b)."""
    return np.sign(np.asarray(c) - np.asarray(c_hat)) / b


def huber_gradient_check(delta, c, c_hat, sigma=1.0, b=1.0) -> HuberGradientReport:
    """Ratio -grad(huber) / grad(log P) per sample, split by branch.

    Inside |c - c_hat| < delta, P is Gaussian(sigma); outside it is
    Laplace(b).  Constant positive ratios per branch mean minimizing the
    Huber loss follows the log-likelihood gradient up to a positive scale.
    """
    c = np.asarray(c, dtype=np.float64).ravel()
    c_hat = np.asarray(c_hat, dtype=np.float64).ravel()
    err = np.abs(c - c_hat)
    g_h = huber_grad(c, c_hat, delta)
    inside = (err < delta) & (err > 0)
    outside = err >= delta
    ratio_in = -g_h[inside] / gaussian_logpdf_grad(c[inside], c_hat[inside], sigma)
    ratio_out = -g_h[outside] / laplace_logpdf_grad(c[outside], c_hat[outside], b)
    return HuberGradientReport(ratio_in, ratio_out)


# ---------------------------------------------------------------------------
# online estimation of the evaluation-time context


@dataclass
class OnlineEstimate:
    """EMA of per-transition predictions in normalized space."""

    ema: np.ndarray
    beta: float = 0.9
    steps_seen: int = 0

    @classmethod
    def empty(cls, k, beta=0.9) -> "OnlineEstimate":
        return cls(np.zeros(k), beta, 0)


def online_estimate_update(est: OnlineEstimate, q, s, a_enc, s_next, c_true=None) -> OnlineEstimate:
    pred = np.asarray(q.predict(s, a_enc, s_next, c_true=c_true)).reshape(est.ema.shape)
    return ema_step(est, pred)


def ema_step(est: OnlineEstimate, pred) -> OnlineEstimate:
    pred = np.asarray(pred, dtype=np.float64)
    if est.steps_seen == 0:
        ema = pred.copy()
    else:
        ema = est.ema + (1.0 - est.beta) * (pred - est.ema)
    return OnlineEstimate(np.clip(ema, -1.0, 1.0), est.beta, est.steps_seen + 1)
