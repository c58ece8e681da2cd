"""Internal invariant suite behind ``adail check``.

Finite-difference gradient checks for every layer and loss, gradient
reversal algebra, and closed-form loss values.  Each check returns
``(name, passed, detail)``.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .discriminator import cls_loss_node, make_discriminator, reg_gradients, reward_from_prob
from .posterior import huber_loss, huber_gradient_check, make_posterior, posterior_loss_node
from .seeding import substream
from .vae import elbo_node, kl_diag_gaussians, kl_node, make_decoder, make_encoder

FD_STEP = 1e-6
FD_TOL = 1e-4


def relative_error(a, b, floor=1e-7) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def finite_difference_check(loss_fn, nets, rng, coords_per_entry=4, h=FD_STEP) -> float:
    """Max relative error between ``backward`` and central differences.

    ``loss_fn()`` must rebuild the graph from the current entries of
    ``nets`` and return a scalar Node.  A random subset of coordinates of
    each entry is perturbed.
    """
    grads = ad.backward(loss_fn(), nets=nets)
    worst = 0.0
    for net in nets:
        for name, arr in net.entries.items():
            flat = arr.reshape(-1)
            picks = rng.choice(flat.size, size=min(coords_per_entry, flat.size), replace=False)
            for i in picks:
                old = flat[i]
                flat[i] = old + h
                up = float(loss_fn().value)
                flat[i] = old - h
                down = float(loss_fn().value)
                flat[i] = old
                num = (up - down) / (2 * h)
                worst = max(worst, relative_error(grads[name].reshape(-1)[i], num))
    return worst


def _leaf(name, value):
    return ad.ParamNet({name: np.array(value, dtype=np.float64)}, [], [], "")


def _case_mlp(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    net = ad.init_mlp([d, int(rng.integers(2, 7)), int(rng.integers(2, 7)), 2], rng)
    x = _leaf("x", rng.normal(size=(n, d)))
    w = rng.normal(size=(n, 2))
    return lambda: ad.total(ad.mul(ad.forward_mlp(net, x.node("x")), w)), (net, x)


def _case_cross_entropy(rng):
    d = make_discriminator(3, 2, 2, rng, hidden=(5, 4))
    xp, xe = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
    return lambda: cls_loss_node(d, xp, xe)[0], (d.trunk, d.cls_head)


def _case_gaussian_logp(rng):
    n, k = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, k))
    p = ad.ParamNet({"m": rng.normal(size=(n, k)), "s": rng.normal(scale=0.5, size=k)}, [], [], "")
    return lambda: ad.total(ad.gaussian_logp(x, p.node("m"), p.node("s"))), (p,)


def _case_huber(rng):
    q = make_posterior(5, 2, rng, hidden=(6, 5), delta=float(rng.uniform(0.3, 2.0)))
    s, a, s2 = rng.normal(size=(8, 2)), rng.normal(size=(8, 1)), rng.normal(size=(8, 2))
    c = rng.uniform(-1, 1, size=(8, 2))
    # keep residuals away from the kink at |e| = delta
    pred = ad.mlp_numpy(q.net, q.inputs(s, a, s2))
    err = np.abs(pred - c)
    near = np.abs(err - q.delta) < 1e-3
    c = np.where(near, c + 0.01, c)
    return lambda: posterior_loss_node(q, s, a, s2, c), (q.net,)


def _case_kl(rng):
    k = int(rng.integers(1, 4))
    p = ad.ParamNet({n: rng.normal(size=(3, k)) for n in ("m1", "l1", "m2", "l2")}, [], [], "")
    return lambda: ad.total(kl_node(p.node("m1"), p.node("l1"), p.node("m2"), p.node("l2"))), (p,)


def _case_elbo(rng):
    od, ad_, d = 2, 1, int(rng.integers(1, 3))
    e = make_encoder(2 * od + ad_, d, rng, hidden=(5,))
    dec = make_decoder(od + ad_, d, od, rng, hidden=(5,))
    s, a, s2 = rng.normal(size=(5, od)), rng.normal(size=(5, ad_)), rng.normal(size=(5, od))
    eps = rng.standard_normal((5, d))  # common random numbers across perturbations
    return lambda: elbo_node(e, dec, s, a, s2, eps)[0], (e.net, dec.net)


GRADIENT_CASES = {
    "mlp": _case_mlp, "sigmoid_cross_entropy": _case_cross_entropy, "gaussian_logp": _case_gaussian_logp,
    "huber": _case_huber, "kl": _case_kl, "elbo": _case_elbo,
}


def gradient_checks(seed=0, instances=100):
    out = []
    for name, build in GRADIENT_CASES.items():
        worst = 0.0
        for i in range(instances):
            rng = substream(seed, "check-grad", i)
            fn, nets = build(rng)
            worst = max(worst, finite_difference_check(fn, nets, rng))
        out.append((f"grad:{name}", worst < FD_TOL, f"max rel err {worst:.2e} over {instances} instances"))
    return out


def grl_trunk_ratio(lambda_grl, seed=0):
    """Max |g_grl - (-lambda) g_plain| over trunk gradients for one random batch."""
    rng = substream(seed, "check-grl")
    d = make_discriminator(3, 2, 2, rng, hidden=(6, 5), lambda_grl=lambda_grl)
    s, a, c = rng.normal(size=(10, 3)), rng.normal(size=(10, 2)), rng.uniform(-1, 1, size=(10, 2))
    _, g_on = reg_gradients(d, s, a, c, use_grl=True)
    _, g_off = reg_gradients(d, s, a, c, use_grl=False)
    return max(float(np.max(np.abs(g_on[k] + lambda_grl * g_off[k]))) for k in d.trunk.entries)


def grl_checks(seed=0):
    out = []
    x = substream(seed, "check-grl-forward").normal(size=(4, 3))
    out.append(("grl:forward_identity", bool(np.array_equal(ad.grl(x, 0.7).value, x)), "exact"))
    for lam in (0.0, 0.5, 1.0):
        err = grl_trunk_ratio(lam, seed)
        out.append((f"grl:trunk_lambda_{lam}", err <= 1e-10, f"max abs deviation {err:.1e}"))
    return out


def analytic_checks():
    cases = [
        ("huber_quadratic", huber_loss([[0.0]], [[0.5]], 1.0), 0.125),
        ("huber_linear", huber_loss([[0.0]], [[2.0]], 1.0), 1.5),
        ("huber_joint", huber_loss([[0.0]], [[1.0]], 1.0), 0.5),
        ("kl_equal", float(kl_diag_gaussians([0.0], [1.0], [0.0], [1.0])), 0.0),
        ("kl_shift", float(kl_diag_gaussians([1.0], [1.0], [0.0], [1.0])), 0.5),
        ("kl_var", float(kl_diag_gaussians([0.0], [4.0], [0.0], [1.0])), 0.5 * (4.0 - 1.0 - math.log(4.0))),
        ("reward_half", float(reward_from_prob(0.5)), math.log(2.0)),
        ("reward_zero", float(reward_from_prob(0.0)), 0.0),
    ]
    d = make_discriminator(3, 2, 1, substream(0, "check-zero"), zero=True)
    x = np.ones((4, 5))
    cases.append(("disc_zero_weight_loss", float(cls_loss_node(d, x, x)[0].value), math.log(2.0)))
    return [(f"analytic:{n}", abs(got - want) <= 1e-9, f"{got!r} vs {want!r}") for n, got, want in cases]


def huber_likelihood_check(seed=0):
    rng = substream(seed, "check-huber-gradient")
    delta = 1.0
    c = rng.uniform(-3, 3, size=400)
    c_hat = c + rng.uniform(-2.5 * delta, 2.5 * delta, size=400)
    rep = huber_gradient_check(delta, c, c_hat, sigma=1.0, b=1.0)
    ok = rep.holds() and rep.inside_constants.size > 0 and rep.outside_constants.size > 0
    return [("huber_likelihood:branch_constants", ok,
             f"inside {rep.inside_c:.6g}, outside {rep.outside_c:.6g}")]


def run_all(seed=0, instances=100):
    return gradient_checks(seed, instances) + grl_checks(seed) + analytic_checks() + huber_likelihood_check(seed)
