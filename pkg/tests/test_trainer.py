import numpy as np
import pytest

from adail import envs
from adail.config import apply_overrides, defaults_for
from adail.envs import CARTPOLE, PUCK, DemoSet, GridSpec, read_demos, write_demos
from adail.evaluation import blackout_region
from adail.policy import make_policy
from adail.trainer import (collect_demos, imitation_train, load_policy, read_samples, save_policy, train,
                           vae_adail_train)


def tiny(family, algorithm, **extra):
    cfg = defaults_for(family, algorithm)
    over = {"run.iterations": 2, "ppo.n_envs": 2, "ppo.steps_per_env": 32, "ppo.epochs": 1,
            "ppo.minibatch": 32, "run.output_dir": "", "posterior.batch_size": 16,
            "vae.batch_size": 16, "vae.hidden": "8,8", "disc.hidden": "16,16", "posterior.hidden": "8,8"}
    over.update(extra)
    return apply_overrides(cfg, over)


@pytest.fixture(scope="module")
def puck_demos():
    pol = make_policy(PUCK, "none", np.random.default_rng(0))
    return collect_demos(pol, PUCK, PUCK.source_values, 3, seed=0)


@pytest.fixture(scope="module")
def cart_demos():
    pol = make_policy(CARTPOLE, "none", np.random.default_rng(0))
    return collect_demos(pol, CARTPOLE, CARTPOLE.source_values, 3, seed=0)


def test_collect_demos_count_and_determinism(puck_demos):
    pol = make_policy(PUCK, "none", np.random.default_rng(0))
    again = collect_demos(pol, PUCK, PUCK.source_values, 3, seed=0)
    assert again.count == 3
    for a, b in zip(puck_demos.episodes, again.episodes):
        np.testing.assert_array_equal(a["s"], b["s"])
        assert len(a["s"]) == PUCK.horizon
    assert np.all(np.abs(puck_demos.episodes[0]["a"]) <= 10.0)


def test_same_seed_same_metrics(puck_demos):
    a = train(tiny("puck", "adail_pred"), puck_demos)
    b = train(tiny("puck", "adail_pred"), puck_demos)
    assert a.metrics == b.metrics
    assert {"cls_loss", "reg_mse", "post_loss"} <= set(a.metrics[0])


def test_gail_equals_collapsed_adail(cart_demos):
    gail = train(tiny("cartpole", "gail"), cart_demos)
    collapsed = train(tiny("cartpole", "adail_true", **{"run.prior": "source", "run.context": "none",
                                                        "disc.use_grl": False, "posterior.enabled": False}),
                      cart_demos)
    assert gail.metrics == collapsed.metrics
    for k in gail.policy.net.entries:
        np.testing.assert_array_equal(gail.policy.net.entries[k], collapsed.policy.net.entries[k])


def test_imitation_never_reads_true_reward(puck_demos, monkeypatch):
    monkeypatch.setattr(envs, "FAMILIES", {**envs.FAMILIES, "puck": envs.poisoned(PUCK)})
    res = train(tiny("puck", "adail_pred"), puck_demos)
    assert all(np.isfinite(r["mean_imitation_reward"]) for r in res.metrics)


def test_context_samples_cover_prior(puck_demos):
    cfg = tiny("puck", "gail_rand", **{"run.iterations": 1, "ppo.steps_per_env": 2000})
    res = train(cfg, puck_demos)
    c = res.c_samples
    assert len(c) >= 40
    for dim, (lo, hi) in enumerate(zip(PUCK.lo, PUCK.hi)):
        x = np.sort((c[:, dim] - lo) / (hi - lo))
        ks = np.max(np.abs(np.arange(1, len(x) + 1) / len(x) - x))
        assert ks < 1.36 / np.sqrt(len(x)) + 0.05


def test_blackout_cells_never_sampled(puck_demos, tmp_path):
    cfg = tiny("puck", "adail_true", **{"run.blackout": "5x5", "ppo.steps_per_env": 1000,
                                         "run.output_dir": str(tmp_path / "run")})
    res = train(cfg, puck_demos)
    grid = GridSpec.for_family(PUCK, cfg.run.grid_cells)
    mask = blackout_region(grid, "5x5", grid.cell_of(PUCK.source_values))
    cells = grid.cells_of(res.c_samples)
    assert not mask[cells[:, 0], cells[:, 1]].any()
    np.testing.assert_array_equal(read_samples(tmp_path / "run" / "c_samples.csv"), res.c_samples)


def test_run_directory_layout(puck_demos, tmp_path):
    out = tmp_path / "run"
    train(tiny("puck", "adail_pred", **{"run.output_dir": str(out), "run.checkpoint_every": 1}), puck_demos)
    assert (out / "config.snapshot").is_file()
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    assert sorted(p.name for p in (out / "final").iterdir()) == [
        "disc.ckpt", "policy.ckpt", "policy.meta", "posterior.ckpt", "value.ckpt"]
    assert any((out / "checkpoints").iterdir())


def test_policy_save_load_round_trip(tmp_path):
    pol = make_policy(PUCK, "true_params", np.random.default_rng(3))
    save_policy(tmp_path / "p", pol)
    back = load_policy(tmp_path / "p")
    assert back.context_mode == "true_params" and back.ctx_dim == 2
    s, c = np.ones((2, 4)), np.zeros((2, 2))
    from adail.policy import act
    np.testing.assert_allclose(act(pol, s, c, None, True)[0], act(back, s, c, None, True)[0], rtol=1e-6)


def test_demo_family_mismatch_rejected(puck_demos):
    with pytest.raises(ValueError):
        imitation_train(tiny("cartpole", "gail"), puck_demos)


def test_vae_adail_runs_and_context_bounded(tmp_path):
    pol = make_policy(envs.PUCK_FRICTION, "none", np.random.default_rng(0))
    demos = collect_demos(pol, envs.PUCK_FRICTION, envs.PUCK_FRICTION.source_values, 2, seed=0)
    res = vae_adail_train(tiny("puck_friction", "vae_adail"), demos)
    assert res.encoder.latent_dim == 1
    assert all(np.isfinite(r["vae_elbo"]) for r in res.metrics)
    res0 = vae_adail_train(tiny("puck_friction", "vae_adail", **{"vae.lambda_contrastive": 0.0}), demos)
    assert all(r["vae_contrastive"] == 0.0 for r in res0.metrics)


def test_demo_file_used_by_training(puck_demos, tmp_path):
    path = tmp_path / "demos.ndjson"
    write_demos(path, puck_demos, PUCK)
    res = train(tiny("puck", "gail"), read_demos(path))
    assert len(res.metrics) == 2
