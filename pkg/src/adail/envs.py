"""Dynamics-parameterized environment families.

Two analytic families are provided: ``cartpole`` (force magnitude Fm, which
may be negative and so flips the push direction) and ``puck`` (a 2D
point mass under x-gravity Gx and linear friction Fr).  ``puck_friction``
varies only friction with Gx pinned at zero.

Step functions are batched pure functions over rows so that rollouts can
drive many environment instances at once; ``Env`` wraps a single instance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

# cart-pole constants
GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
BASE_FORCE = 10.0
CARTPOLE_DT = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12.0 * 2.0 * math.pi / 360.0

# puck constants
PUCK_DT = 0.05
PUCK_ACTION_LIMIT = 10.0


class FamilyMismatch(ValueError):
    pass


class EnvDone(RuntimeError):
    pass


def step_cartpole(state, action, fm):
    """Batched Euler step.  state (n,4) = (x, x_dot, theta, theta_dot).

    Returns (next_state, r_true, terminal) where terminal marks a failure
    (cart out of bounds or pole past 12 degrees).
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action)
    fm = np.asarray(fm, dtype=np.float64)
    x, x_dot, theta, theta_dot = (state[..., i] for i in range(4))
    force = (2.0 * action - 1.0) * BASE_FORCE * fm
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot ** 2 * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos ** 2 / TOTAL_MASS)
    )
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS
    nxt = np.stack(
        [
            x + CARTPOLE_DT * x_dot,
            x_dot + CARTPOLE_DT * x_acc,
            theta + CARTPOLE_DT * theta_dot,
            theta_dot + CARTPOLE_DT * theta_acc,
        ],
        axis=-1,
    )
    terminal = (np.abs(nxt[..., 0]) > X_LIMIT) | (np.abs(nxt[..., 2]) > THETA_LIMIT)
    reward = np.where(terminal, 0.0, 1.0)
    return nxt, reward, terminal


def cartpole_force(action, fm):
    return (2.0 * np.asarray(action) - 1.0) * BASE_FORCE * np.asarray(fm, dtype=np.float64)


def step_puck(state, action, gx, fr):
    """Batched semi-implicit Euler step of the unit-mass puck.

    state (n,4) = (px, py, vx, vy); action (n,2) is clipped to [-10, 10].
    """
    state = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -PUCK_ACTION_LIMIT, PUCK_ACTION_LIMIT)
    gx = np.asarray(gx, dtype=np.float64)
    fr = np.asarray(fr, dtype=np.float64)
    p, v = state[..., :2], state[..., 2:]
    ext = np.stack([gx, np.zeros_like(gx)], axis=-1)
    v_next = v + PUCK_DT * (a + ext - fr[..., None] * v)
    p_next = p + PUCK_DT * v_next
    nxt = np.concatenate([p_next, v_next], axis=-1)
    if not np.all(np.isfinite(nxt)):
        raise FloatingPointError("puck state became non-finite")
    reward = -np.linalg.norm(p_next, axis=-1) - 0.01 * np.sum(a * a, axis=-1)
    return nxt, reward, np.zeros(nxt.shape[:-1], dtype=bool)


def _cartpole_family_step(state, action, params):
    return step_cartpole(state, action, params[..., 0])


def _puck_family_step(state, action, params):
    return step_puck(state, action, params[..., 0], params[..., 1])


def _puck_friction_family_step(state, action, params):
    fr = params[..., 0]
    return step_puck(state, action, np.zeros_like(fr), fr)


def _cartpole_reset(rng, n):
    return rng.uniform(-0.05, 0.05, size=(n, 4))


def _puck_reset(rng, n):
    pos = rng.uniform(-2.0, 2.0, size=(n, 2))
    return np.concatenate([pos, np.zeros((n, 2))], axis=-1)


@dataclass(frozen=True)
class DynParams:
    values: np.ndarray
    family_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_1d(np.asarray(self.values, dtype=np.float64)))


@dataclass(frozen=True)
class EnvFamily:
    family_id: str
    param_names: tuple
    param_ranges: tuple
    source_values: tuple
    obs_dim: int
    act_dim: int
    action_kind: str  # "categorical" | "continuous"
    horizon: int
    discount: float
    step_fn: Callable = field(repr=False, compare=False)
    reset_fn: Callable = field(repr=False, compare=False)
    n_actions: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not self.contains(self.source_values):
            raise ValueError("source parameters outside the family ranges")

    @property
    def k(self) -> int:
        return len(self.param_names)

    @property
    def lo(self) -> np.ndarray:
        return np.array([r[0] for r in self.param_ranges], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.array([r[1] for r in self.param_ranges], dtype=np.float64)

    @property
    def source_params(self) -> DynParams:
        return DynParams(np.array(self.source_values), self.family_id)

    @property
    def act_encoding_dim(self) -> int:
        """Width of the action as fed to discriminators and posteriors."""
        return self.n_actions if self.action_kind == "categorical" else self.act_dim

    def contains(self, values) -> bool:
        v = np.asarray(values, dtype=np.float64)
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))

    def normalize(self, values) -> np.ndarray:
        """Affine map of each parameter range onto [-1, 1]."""
        v = np.asarray(values, dtype=np.float64)
        return 2.0 * (v - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.lo + (z + 1.0) * 0.5 * (self.hi - self.lo)

    def encode_action(self, actions) -> np.ndarray:
        """One-hot for categorical actions, clipped values for continuous ones."""
        actions = np.asarray(actions)
        if self.action_kind == "categorical":
            idx = actions.reshape(-1).astype(np.int64)
            out = np.zeros((idx.size, self.n_actions))
            out[np.arange(idx.size), idx] = 1.0
            return out
        a = actions.reshape(-1, self.act_dim).astype(np.float64)
        return np.clip(a, -PUCK_ACTION_LIMIT, PUCK_ACTION_LIMIT)


CARTPOLE = EnvFamily(
    family_id="cartpole",
    param_names=("Fm",),
    param_ranges=((-1.0, 1.0),),
    source_values=(1.0,),
    obs_dim=4,
    act_dim=1,
    action_kind="categorical",
    horizon=200,
    discount=0.99,
    step_fn=_cartpole_family_step,
    reset_fn=_cartpole_reset,
    n_actions=2,
)

PUCK = EnvFamily(
    family_id="puck",
    param_names=("Gx", "Fr"),
    param_ranges=((-5.0, 5.0), (0.0, 4.0)),
    source_values=(0.0, 1.0),
    obs_dim=4,
    act_dim=2,
    action_kind="continuous",
    horizon=100,
    discount=0.99,
    step_fn=_puck_family_step,
    reset_fn=_puck_reset,
)

PUCK_FRICTION = EnvFamily(
    family_id="puck_friction",
    param_names=("Fr",),
    param_ranges=((0.0, 4.0),),
    source_values=(1.0,),
    obs_dim=4,
    act_dim=2,
    action_kind="continuous",
    horizon=100,
    discount=0.99,
    step_fn=_puck_friction_family_step,
    reset_fn=_puck_reset,
)

FAMILIES = {f.family_id: f for f in (CARTPOLE, PUCK, PUCK_FRICTION)}


def get_family(family_id: str) -> EnvFamily:
    try:
        return FAMILIES[family_id]
    except KeyError:
        raise KeyError(f"unknown family {family_id!r}; known: {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# grids and blackout masks over parameter space


@dataclass(frozen=True)
class GridSpec:
    """Regular partition of each parameter range into ``cells`` bins."""

    lo: tuple
    hi: tuple
    cells: tuple

    @classmethod
    def for_family(cls, family: EnvFamily, cells: int = 13) -> "GridSpec":
        return cls(tuple(family.lo), tuple(family.hi), (cells,) * family.k)

    @property
    def shape(self) -> tuple:
        return tuple(self.cells)

    def axis_centers(self, axis: int) -> np.ndarray:
        lo, hi, n = self.lo[axis], self.hi[axis], self.cells[axis]
        return lo + (np.arange(n) + 0.5) * (hi - lo) / n

    def cell_of(self, values) -> tuple:
        return tuple(int(i) for i in self.cells_of(values)[0])

    def cells_of(self, values) -> np.ndarray:
        """Vectorized cell indices, shape (n, k)."""
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        lo, hi, n = np.array(self.lo), np.array(self.hi), np.array(self.cells)
        idx = np.floor((v - lo) / (hi - lo) * n).astype(np.int64)
        return np.clip(idx, 0, n - 1)

    def cell_centers(self) -> np.ndarray:
        """All cell centers in C order, shape (n_cells, k)."""
        axes = [self.axis_centers(a) for a in range(len(self.cells))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass(frozen=True)
class Blackout:
    grid: GridSpec
    mask: np.ndarray  # bool, grid.shape

    def contains(self, values) -> np.ndarray:
        idx = self.grid.cells_of(values)
        return self.mask[tuple(idx.T)]


def sample_dynamics(family: EnvFamily, rng, blackout: Blackout | None = None, n: int | None = None):
    """Uniform draw over the family ranges, rejecting blacked-out cells.

    Returns a DynParams, or an (n, k) array of raw values when ``n`` is given.
    """
    if blackout is not None and np.all(blackout.mask):
        raise ValueError("blackout mask covers the entire parameter range")
    count = 1 if n is None else n
    out = np.empty((count, family.k))
    filled = 0
    while filled < count:
        draw = rng.uniform(family.lo, family.hi, size=(count - filled, family.k))
        if blackout is not None:
            draw = draw[~blackout.contains(draw)]
        out[filled:filled + len(draw)] = draw
        filled += len(draw)
    if n is None:
        return DynParams(out[0], family.family_id)
    return out


# ---------------------------------------------------------------------------
# single-instance environment


@dataclass
class EnvState:
    physical: np.ndarray
    step_index: int
    params: DynParams
    rng: np.random.Generator
    done: bool = False


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r_true: float
    done: bool
    logp: float
    c_true: DynParams


class Env:
    """One environment instance e_c = g(c)."""

    def __init__(self, family: EnvFamily, params: DynParams, seed: int | None = None):
        self.family = family
        self.params = params
        self.state = None
        if seed is not None:
            self.reset(seed)

    def reset(self, seed=None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        phys = self.family.reset_fn(rng, 1)[0]
        self.state = EnvState(phys, 0, self.params, rng)
        return phys.copy()

    def step(self, action):
        st = self.state
        if st is None or st.done:
            raise EnvDone("step() called on a finished episode; call reset()")
        act = np.asarray(action)[None]
        nxt, r, terminal = self.family.step_fn(st.physical[None], act, self.params.values[None])
        st.physical = nxt[0]
        st.step_index += 1
        st.done = bool(terminal[0]) or st.step_index >= self.family.horizon
        return nxt[0].copy(), float(r[0]), st.done


def generate_env(family: EnvFamily, c: DynParams, seed=None, allow_out_of_range=False) -> Env:
    if c.family_id != family.family_id:
        raise FamilyMismatch(f"params for {c.family_id!r} given to family {family.family_id!r}")
    if c.values.shape != (family.k,):
        raise ValueError(f"expected {family.k} parameters, got {c.values.shape}")
    if not allow_out_of_range and not family.contains(c.values):
        raise ValueError(f"{c.values} outside {family.param_ranges}; pass allow_out_of_range for extrapolation")
    return Env(family, c, seed)


def reset(env: Env, seed) -> np.ndarray:
    return env.reset(seed)


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class DemoSet:
    """Expert episodes from the single source environment, rewards stripped."""

    family_id: str
    source_c: np.ndarray
    episodes: list  # each: dict(s, a, s_next, done) arrays

    @property
    def count(self) -> int:
        return len(self.episodes)

    def arrays(self):
        """Concatenated (s, a, s_next) over all episodes."""
        s = np.concatenate([e["s"] for e in self.episodes])
        a = np.concatenate([e["a"] for e in self.episodes])
        s2 = np.concatenate([e["s_next"] for e in self.episodes])
        return s, a, s2

    def transitions(self):
        src = DynParams(self.source_c, self.family_id)
        for ep in self.episodes:
            for t in range(len(ep["s"])):
                yield Transition(ep["s"][t], ep["a"][t], ep["s_next"][t], float("nan"),
                                 bool(ep["done"][t]), float("nan"), src)


def write_demos(path, demos: DemoSet, family: EnvFamily) -> None:
    """Header line (JSON) then one CSV row per transition; no reward column."""
    act_w = 1 if family.action_kind == "categorical" else family.act_dim
    header = {
        "family_id": demos.family_id,
        "source_c": [float(v) for v in demos.source_c],
        "obs_dim": family.obs_dim,
        "act_dim": act_w,
        "action_kind": family.action_kind,
        "count": demos.count,
        "columns": ["episode_id", "t"] + [f"s{i}" for i in range(family.obs_dim)]
        + [f"a{i}" for i in range(act_w)] + [f"s_next{i}" for i in range(family.obs_dim)] + ["done"],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for ep_id, ep in enumerate(demos.episodes):
        for t in range(len(ep["s"])):
            vals = [str(ep_id), str(t)]
            vals += [repr(float(x)) for x in ep["s"][t]]
            vals += [repr(float(x)) for x in np.atleast_1d(ep["a"][t])]
            vals += [repr(float(x)) for x in ep["s_next"][t]]
            vals.append("1" if ep["done"][t] else "0")
            lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_demos(path) -> DemoSet:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [line.strip().split(",") for line in fh if line.strip()]
    od, ad = header["obs_dim"], header["act_dim"]
    episodes: dict[int, list] = {}
    for row in rows:
        episodes.setdefault(int(row[0]), []).append(row)
    out = []
    for ep_id in sorted(episodes):
        body = np.array([[float(x) for x in r[2:]] for r in episodes[ep_id]])
        a = body[:, od:od + ad]
        out.append({
            "s": body[:, :od],
            "a": a[:, 0].astype(np.int64) if header["action_kind"] == "categorical" else a,
            "s_next": body[:, od + ad:2 * od + ad],
            "done": body[:, -1] > 0.5,
        })
    demos = DemoSet(header["family_id"], np.array(header["source_c"]), out)
    if demos.count != header["count"]:
        raise ValueError(f"{path}: header declares {header['count']} episodes, found {demos.count}")
    return demos


def poisoned(family: EnvFamily) -> EnvFamily:
    """Copy of ``family`` whose true rewards are NaN (imitation must never read them)."""
    inner = family.step_fn

    def step(state, action, params):
        nxt, r, term = inner(state, action, params)
        return nxt, np.full_like(r, np.nan), term

    return replace(family, step_fn=step)
