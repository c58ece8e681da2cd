"""Run configuration: dataclass sections plus a flat ``section.key = value`` text format.

Resolution order is family/algorithm defaults, then the config file, then
command-line overrides.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields

from .autodiff import ConfigError

ALGORITHMS = ("expert", "gail", "gail_rand", "adail_true", "adail_pred", "adail_rand", "vae_adail", "up_true")
IMITATION = ("gail", "gail_rand", "adail_true", "adail_pred", "adail_rand", "vae_adail")


@dataclass
class RunSection:
    family: str = "cartpole"
    algorithm: str = "adail_pred"
    seed: int = 0
    iterations: int = 500
    output_dir: str = ""
    demos: str = ""
    prior: str = "family"          # family | source
    context: str = "auto"          # auto | none | true_params | posterior | random
    blackout: str = "none"         # none | 1x1 | 3x3 | 5x5
    grid_cells: int = 13
    n_demos: int = 16
    checkpoint_every: int = 0
    workers: int = 1


@dataclass
class PolicySection:
    lr: float = 0.0005586
    value_lr: float = 0.001
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0


@dataclass
class PPOSection:
    n_envs: int = 8
    steps_per_env: int = 256
    epochs: int = 10
    minibatch: int = 64
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    target_kl: float = 0.02
    max_grad_norm: float = 0.5


@dataclass
class DiscSection:
    lr: float = 0.000167881
    hidden: tuple = (32, 32)
    lambda_grl: float = 1.0
    use_grl: bool = True
    reward_clip_lo: float = 0.0
    reward_clip_hi: float = 10.0
    steps_per_iter: int = 1
    batch_size: int = 0            # 0 = whole policy batch
    state_only: bool = False
    normalize: bool = True


@dataclass
class PosteriorSection:
    enabled: bool = True
    lr: float = 0.00532
    hidden: tuple = (76, 140)
    delta: float = 1.0
    buffer_size: int = 50000
    batch_size: int = 256
    steps_per_iter: int = 1
    ema_beta: float = 0.9


@dataclass
class VaeSection:
    encoder_lr: float = 0.000094
    decoder_lr: float = 0.000094
    hidden: tuple = (200, 200)
    latent_dim: int = 1
    lambda_contrastive: float = 0.1
    d0: float = 10.0
    batch_size: int = 256
    steps_per_iter: int = 1
    n_pairs: int = 64
    # transitions per trajectory in a VAE batch (0 = uniform over the buffer)
    per_trajectory: int = 8
    # decoder noise scale, as a fraction of the residual spread of a linear
    # (s, a) -> s' - s fit on the demos
    recon_scale: float = 1.0


@dataclass
class ExpertSection:
    eval_every: int = 5
    eval_episodes: int = 100
    stop_at_target: bool = True


@dataclass
class EvalSection:
    cells: int = 13
    episodes_per_cell: int = 10
    context_source: str = "auto"   # auto | none | true | posterior | random


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    policy: PolicySection = field(default_factory=PolicySection)
    ppo: PPOSection = field(default_factory=PPOSection)
    disc: DiscSection = field(default_factory=DiscSection)
    posterior: PosteriorSection = field(default_factory=PosteriorSection)
    vae: VaeSection = field(default_factory=VaeSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def valid_keys(self):
        return [f"{name}.{f.name}" for name, sec in self.sections() for f in fields(sec)]

    @property
    def steps_per_iter(self) -> int:
        return self.ppo.n_envs * self.ppo.steps_per_env

    def context_mode(self) -> str:
        if self.run.context != "auto":
            return self.run.context
        return {
            "expert": "none", "gail": "none", "gail_rand": "none",
            "adail_true": "true_params", "adail_pred": "true_params", "adail_rand": "random",
            "vae_adail": "posterior", "up_true": "true_params",
        }[self.run.algorithm]

    def eval_context(self) -> str:
        if self.eval.context_source != "auto":
            return self.eval.context_source
        return {
            "expert": "none", "gail": "none", "gail_rand": "none", "adail_true": "true",
            "adail_pred": "posterior", "adail_rand": "random", "vae_adail": "posterior",
            "up_true": "true",
        }[self.run.algorithm]


# Default learning rates and posterior widths per family; the puck
# families share one set.  VAE-ADAIL has its own policy/disc rates.
FAMILY_DEFAULTS = {
    "cartpole": {"policy.lr": 0.0005586, "disc.lr": 0.000167881,
                 "posterior.hidden": (76, 140), "posterior.lr": 0.00532, "vae.latent_dim": 1},
    "puck": {"policy.lr": 0.000047, "disc.lr": 0.000037,
             "posterior.hidden": (72, 177), "posterior.lr": 0.002353, "vae.latent_dim": 2},
    "puck_friction": {"policy.lr": 0.000047, "disc.lr": 0.000037,
                      "posterior.hidden": (72, 177), "posterior.lr": 0.002353, "vae.latent_dim": 1},
}

ALGORITHM_DEFAULTS = {
    "expert": {"posterior.enabled": False, "disc.use_grl": False},
    "up_true": {"posterior.enabled": False, "disc.use_grl": False},
    "gail": {"run.prior": "source", "posterior.enabled": False, "disc.use_grl": False},
    "gail_rand": {"posterior.enabled": False, "disc.use_grl": False},
    "vae_adail": {"posterior.enabled": False, "disc.use_grl": False,
                  "policy.lr": 0.00005596, "disc.lr": 0.000046077},
}


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _set(cfg: RunConfig, key: str, raw, where: str, typed=False):
    if key not in cfg.valid_keys():
        near = difflib.get_close_matches(key, cfg.valid_keys(), n=1)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise ConfigError(f"{where}: unknown key {key!r}{hint} valid keys: {', '.join(cfg.valid_keys())}")
    section, name = key.split(".", 1)
    sec = getattr(cfg, section)
    default = getattr(sec, name)
    setattr(sec, name, raw if typed else _convert(raw, default, where))


def _read_assignments(path):
    out = []
    if path is None:
        return out
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key, val = text.split("=", 1)
            out.append((key.strip(), val.strip(), f"{path}:{lineno}"))
    return out


def _parse_overrides(overrides):
    out = []
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, val = item.split("=", 1)
        out.append((key.strip(), val.strip(), f"override {item!r}"))
    return out


def parse_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, then the file, then overrides."""
    assignments = _read_assignments(path) + _parse_overrides(overrides)
    probe = RunConfig()
    for key, val, where in assignments:
        if key in ("run.family", "run.algorithm"):
            _set(probe, key, val, where)
    if probe.run.family not in FAMILY_DEFAULTS:
        raise ConfigError(f"unknown family {probe.run.family!r}; valid: {sorted(FAMILY_DEFAULTS)}")
    if probe.run.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {probe.run.algorithm!r}; valid: {ALGORITHMS}")
    cfg = defaults_for(probe.run.family, probe.run.algorithm)
    for key, val, where in assignments:
        _set(cfg, key, val, where)
    return cfg


def defaults_for(family: str, algorithm: str) -> RunConfig:
    cfg = RunConfig()
    cfg.run.family, cfg.run.algorithm = family, algorithm
    for key, val in {**FAMILY_DEFAULTS[family], **ALGORITHM_DEFAULTS.get(algorithm, {})}.items():
        _set(cfg, key, val, "defaults", typed=True)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, val in overrides.items():
        if isinstance(val, str):
            _set(cfg, key, val, "override")
        else:
            _set(cfg, key, val, "override", typed=True)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, sec in cfg.sections():
        for f in fields(sec):
            lines.append(f"{name}.{f.name} = {_format(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"


def write_snapshot(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
