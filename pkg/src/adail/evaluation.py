"""Grid evaluation over dynamics parameters and heatmap artifacts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .envs import Blackout, EnvFamily, GridSpec
from .policy import Policy, act, policy_input
from .seeding import substream


@dataclass
class Heatmap:
    family_id: str
    axes: list            # [(name, lo, hi, cells)]
    values: np.ndarray    # grid shape
    stds: np.ndarray
    episodes_per_cell: int
    mask: np.ndarray      # bool, grid shape
    statistic: str        # "return" | "rmse"
    per_dim: np.ndarray | None = None  # rmse only: grid shape + (k,)

    @property
    def shape(self):
        return tuple(a[3] for a in self.axes)

    def grid(self) -> GridSpec:
        return GridSpec(tuple(a[1] for a in self.axes), tuple(a[2] for a in self.axes), self.shape)

    def aggregate(self):
        """Mean and population std across cells of the cell means."""
        v = np.sort(self.values.ravel())
        return float(np.mean(v)), float(np.std(v))

    def region_mean(self, selector) -> float:
        return float(np.mean(self.values[selector]))


def blackout_region(grid: GridSpec, size: str, center) -> np.ndarray:
    """Boolean mask of a size x size block centered on cell ``center``."""
    try:
        w = int(str(size).lower().split("x")[0])
    except ValueError:
        raise ValueError(f"bad blackout size {size!r}") from None
    center = tuple(int(c) for c in center)
    mask = np.zeros(grid.shape, dtype=bool)
    half = w // 2
    sl = []
    for ax, c in enumerate(center):
        lo, hi = c - half, c - half + w
        if lo < 0 or hi > grid.shape[ax]:
            raise ValueError(f"{size} region around cell {center} exceeds the {grid.shape} grid")
        sl.append(slice(lo, hi))
    mask[tuple(sl)] = True
    return mask


def source_blackout(family: EnvFamily, size: str, cells: int = 13) -> Blackout:
    grid = GridSpec.for_family(family, cells)
    return Blackout(grid, blackout_region(grid, size, grid.cell_of(family.source_values)))


def _episode_rngs(seed, n_cells, episodes):
    return [[substream(seed, "eval", c, e) for e in range(episodes)] for c in range(n_cells)]


def run_episodes(policy: Policy, family: EnvFamily, params, rngs, context_source: str,
                 posterior=None, beta=0.9, deterministic=True, record=None):
    """Run one episode per row of ``params`` (raw values) to completion.

    ``rngs`` holds one generator per episode (reset, random context and
    stochastic actions all draw from it).  Returns undiscounted true returns.
    ``record``, if a list, receives (s, a_enc, s_next, active) per step.
    """
    n = len(params)
    params = np.asarray(params, dtype=np.float64)
    c_norm = family.normalize(params)
    states = np.stack([family.reset_fn(r, 1)[0] for r in rngs])
    k = family.k
    if context_source == "none":
        ctx = np.zeros((n, 0))
    elif context_source == "true":
        ctx = c_norm.copy()
    elif context_source == "random":
        ctx = np.stack([r.uniform(-1.0, 1.0, size=k) for r in rngs])
    elif context_source == "posterior":
        if posterior is None:
            raise ValueError("context_source='posterior' needs a posterior")
        ctx = np.array(posterior.initial_context(c_norm), dtype=np.float64)
    else:
        raise ValueError(f"unknown context source {context_source!r}")
    if policy.ctx_dim == 0:
        ctx = np.zeros((n, 0))
    seen = 0
    returns = np.zeros(n)
    active = np.ones(n, dtype=bool)
    for t in range(family.horizon):
        if deterministic:
            a, _ = act(policy, states, ctx, None, deterministic=True)
        else:
            a = np.stack([np.atleast_1d(act(policy, states[i], ctx[i], rngs[i])[0]) for i in range(n)])
            if family.action_kind == "categorical":
                a = a[:, 0]
        nxt, r, term = family.step_fn(states, a, params)
        returns += np.where(active, r, 0.0)
        enc = family.encode_action(a)
        if record is not None:
            record.append((states, enc, nxt, active.copy()))
        if context_source == "posterior" and policy.ctx_dim:
            pred = posterior.predict(states, enc, nxt, c_true=c_norm)
            ctx = pred if seen == 0 else ctx + (1.0 - beta) * (pred - ctx)
            ctx = np.clip(ctx, -1.0, 1.0)
            seen += 1
        active &= ~term
        states = nxt
        if not active.any():
            break
        if family.action_kind == "categorical":
            # failed cart-poles are frozen so they cannot drift to overflow
            states = np.where(active[:, None], states, 0.0)
    return returns


def grid_eval(policy: Policy, family: EnvFamily, grid: GridSpec, context_source="none",
              episodes_per_cell=10, seed=0, posterior=None, beta=0.9, deterministic=True,
              mask=None) -> Heatmap:
    """Mean/std of undiscounted return per cell over ``episodes_per_cell`` episodes.

    Episode seeds depend only on (seed, cell index, episode index), so the
    result does not depend on evaluation order.
    """
    if context_source == "posterior" and posterior is None:
        raise ValueError("posterior required for context_source='posterior'")
    centers = grid.cell_centers()
    n_cells = len(centers)
    rngs = _episode_rngs(seed, n_cells, episodes_per_cell)
    params = np.repeat(centers, episodes_per_cell, axis=0)
    flat_rngs = [r for cell in rngs for r in cell]
    ret = run_episodes(policy, family, params, flat_rngs, context_source, posterior, beta, deterministic)
    ret = ret.reshape(n_cells, episodes_per_cell)
    axes = [(family.param_names[a], grid.lo[a], grid.hi[a], grid.cells[a]) for a in range(family.k)]
    return Heatmap(family.family_id, axes, ret.mean(axis=1).reshape(grid.shape),
                   ret.std(axis=1).reshape(grid.shape), episodes_per_cell,
                   np.zeros(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool),
                   "return")


def posterior_rmse_grid(posterior, policy: Policy, family: EnvFamily, grid: GridSpec,
                        episodes_per_cell=10, seed=0, context_source="posterior", beta=0.9,
                        mask=None) -> Heatmap:
    """Per-cell RMSE (raw parameter units) of per-step posterior predictions."""
    centers = grid.cell_centers()
    n_cells = len(centers)
    rngs = [r for cell in _episode_rngs(seed, n_cells, episodes_per_cell) for r in cell]
    params = np.repeat(centers, episodes_per_cell, axis=0)
    record = []
    run_episodes(policy, family, params, rngs, context_source, posterior, beta, True, record)
    c_norm = family.normalize(params)
    half_width = 0.5 * (np.asarray(family.hi) - np.asarray(family.lo))
    sq = np.zeros((len(params), family.k))
    count = np.zeros(len(params))
    for s, enc, nxt, active in record:
        # error in raw units, taken as a difference of normalized values so an exact
        # prediction gives exactly zero
        err = (posterior.predict(s, enc, nxt, c_true=c_norm) - c_norm) * half_width
        sq += np.where(active[:, None], err ** 2, 0.0)
        count += active
    per_dim_ep = np.sqrt(sq / np.maximum(count, 1)[:, None])          # (episodes, k)
    overall_ep = np.sqrt((sq.sum(axis=1) / family.k) / np.maximum(count, 1))
    per_dim = per_dim_ep.reshape(n_cells, episodes_per_cell, family.k).mean(axis=1)
    overall = overall_ep.reshape(n_cells, episodes_per_cell)
    axes = [(family.param_names[a], grid.lo[a], grid.hi[a], grid.cells[a]) for a in range(family.k)]
    return Heatmap(family.family_id, axes, overall.mean(axis=1).reshape(grid.shape),
                   overall.std(axis=1).reshape(grid.shape), episodes_per_cell,
                   np.zeros(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool),
                   "rmse", per_dim.reshape(*grid.shape, family.k))


# ---------------------------------------------------------------------------
# artifacts

# 9 anchors of the viridis map, interpolated to 256 entries
_VIRIDIS_ANCHORS = np.array([
    [68, 1, 84], [72, 40, 120], [62, 74, 137], [49, 104, 142], [38, 130, 142],
    [31, 158, 137], [53, 183, 121], [110, 206, 88], [253, 231, 37],
], dtype=np.float64)
COLORMAP = np.stack([
    np.interp(np.linspace(0, 8, 256), np.arange(9), _VIRIDIS_ANCHORS[:, ch]) for ch in range(3)
], axis=1).round().astype(np.uint8)


def _cell_rows(h: Heatmap):
    grid = h.grid()
    centers = grid.cell_centers()
    for idx, c in zip(np.ndindex(h.shape), centers):
        yield idx, c


def write_heatmap(h: Heatmap, path_prefix, block_size=32) -> dict:
    """Write ``<prefix>.csv``, ``<prefix>.ppm`` and ``<prefix>.json``; return the paths."""
    prefix = str(path_prefix)
    paths = {"csv": prefix + ".csv", "ppm": prefix + ".ppm", "json": prefix + ".json"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p1", "p2", "mean", "std", "masked"])
        for idx, c in _cell_rows(h):
            p2 = repr(float(c[1])) if len(c) > 1 else ""
            w.writerow([repr(float(c[0])), p2, repr(float(h.values[idx])), repr(float(h.stds[idx])),
                        int(bool(h.mask[idx]))])
    mean, std = h.aggregate()
    meta = {
        "family_id": h.family_id,
        "axes": [{"name": a[0], "lo": a[1], "hi": a[2], "cells": a[3]} for a in h.axes],
        "statistic": h.statistic,
        "episodes_per_cell": h.episodes_per_cell,
        "grid_mean": mean,
        "grid_std": std,
        "std_kind": "population std across cells of the per-cell means",
        "masked_cells": int(h.mask.sum()),
        "block_size": block_size,
    }
    with open(paths["json"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    _write_ppm(h, paths["ppm"], block_size)
    return paths


def _write_ppm(h: Heatmap, path, block):
    vals = h.values if h.values.ndim == 2 else h.values[:, None]
    mask = h.mask if h.mask.ndim == 2 else h.mask[:, None]
    nx, ny = vals.shape
    lo, hi = float(np.min(vals)), float(np.max(vals))
    span = hi - lo if hi > lo else 1.0
    img = np.zeros((ny * block, nx * block, 3), dtype=np.uint8)
    for i in range(nx):
        for j in range(ny):
            color = COLORMAP[int(round((vals[i, j] - lo) / span * 255))]
            row = (ny - 1 - j) * block  # second parameter grows upward
            cell = img[row:row + block, i * block:(i + 1) * block]
            cell[:] = color
            if mask[i, j]:
                red = np.array([255, 0, 0], dtype=np.uint8)
                cell[0, :] = cell[-1, :] = red
                cell[:, 0] = cell[:, -1] = red
    with open(path, "wb") as fh:
        fh.write(f"P6\n{nx * block} {ny * block}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm_size(path):
    with open(path, "rb") as fh:
        tokens = []
        while len(tokens) < 4:
            line = fh.readline()
            tokens += line.split()
    return int(tokens[1]), int(tokens[2])


def read_heatmap(path_prefix) -> Heatmap:
    prefix = str(path_prefix)
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    axes = [(a["name"], a["lo"], a["hi"], a["cells"]) for a in meta["axes"]]
    shape = tuple(a[3] for a in axes)
    values, stds = np.zeros(shape), np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    with open(prefix + ".csv") as fh:
        rows = list(csv.DictReader(fh))
    for idx, row in zip(np.ndindex(shape), rows):
        values[idx] = float(row["mean"])
        stds[idx] = float(row["std"])
        mask[idx] = row["masked"] == "1"
    return Heatmap(meta["family_id"], axes, values, stds, meta["episodes_per_cell"], mask, meta["statistic"])


def write_rmse_csv(h: Heatmap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p1", "p2", "rmse"])
        for idx, c in _cell_rows(h):
            w.writerow([repr(float(c[0])), repr(float(c[1])) if len(c) > 1 else "", repr(float(h.values[idx]))])
