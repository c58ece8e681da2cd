#!/usr/bin/env python3
"""Upper bound on the expected source-domain puck return of any controller.

Project the motion onto the initial radial direction.  The position norm is
at least the radial coordinate, the action cost is at least the radial
action squared, and the per-coordinate clip caps the radial action at
10*sqrt(2).  The resulting 1D problem is convex in the action sequence, so
a bounded quasi-Newton solve finds its global optimum for each start distance.
Needs scipy (``pip install .[scripts]``).
"""
import numpy as np
from scipy.optimize import minimize

from adail.envs import PUCK, PUCK_ACTION_LIMIT, PUCK_DT, _puck_reset

FRICTION = PUCK.source_values[1]


def position_map(T=PUCK.horizon, dt=PUCK_DT, fr=FRICTION):
    """Matrix M with p = p0 + M @ a for the semi-implicit Euler puck in 1D."""
    M = np.zeros((T, T))
    for j in range(T):
        v = p = 0.0
        for t in range(T):
            v = (1 - dt * fr) * v + dt * (1.0 if t == j else 0.0)
            p += dt * v
            M[t, j] = p
    return M


def best_cost(d, M, eps=1e-10):
    """Minimal 1D cost from start position ``d``; |p| is smoothed as sqrt(p^2 + eps)."""
    amax = np.sqrt(2.0) * PUCK_ACTION_LIMIT

    def f(a):
        p = d + M @ a
        s = np.sqrt(p * p + eps)
        return s.sum() + 0.01 * (a * a).sum(), M.T @ (p / s) + 0.02 * a

    res = minimize(f, np.zeros(M.shape[1]), jac=True, method="L-BFGS-B", bounds=[(-amax, amax)] * M.shape[1],
                   options={"maxiter": 5000, "ftol": 1e-14, "gtol": 1e-10})
    return res.fun


def main():
    M = position_map()
    ds = np.linspace(0.0, 2.0 * np.sqrt(2.0), 40)
    costs = np.array([best_cost(-d, M) for d in ds])
    start = _puck_reset(np.random.default_rng(0), 200000)[:, :2]
    bound = -np.interp(np.linalg.norm(start, axis=1), ds, costs).mean()
    print(f"no controller exceeds an expected return of {bound:.2f}")


if __name__ == "__main__":
    main()
