"""Experiment configuration: nested YAML blocks, strict keys, dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Any, Mapping

import yaml

from .envs import ConfigError, EnvConfig, resolve_category_mix
from .policy import PolicyConfig
from .router import RouterConfig

__all__ = [
    "RouterBlock", "AlgorithmConfig", "TrainingConfig", "ExperimentConfig",
    "load_config", "parse_config", "apply_overrides", "config_to_dict", "dump_config",
    "ALGORITHMS", "ROUTING_MODES", "SURGERY_MODES",
]

ALGORITHMS = ("ppo", "rloo", "grpo", "gigpo")
ROUTING_MODES = ("phase", "token", "token_top2", "trajectory", "none")
SURGERY_MODES = ("off", "pcgrad", "gradnorm", "cagrad")


@dataclasses.dataclass
class RouterBlock:
    L: int = 5
    d: int = 64
    n_layers: int = 3
    action_dim: int = 16
    mlp_hidden: int = 64
    use_history: bool = True
    use_goal_attention: bool = True
    tau0: float = 2.0
    tauf: float = 0.5
    T_anneal: int = 3000
    lambda_s: float = 0.05
    token_m: int = 8
    reroute_on_fault: bool = False

    def router_config(self, K: int) -> RouterConfig:
        return RouterConfig(K=K, L=self.L, d=self.d, n_layers=self.n_layers,
                            action_dim=self.action_dim, mlp_hidden=self.mlp_hidden,
                            use_history=self.use_history,
                            use_goal_attention=self.use_goal_attention)


@dataclasses.dataclass
class AlgorithmConfig:
    algorithm: str = "gigpo"
    n_group: int = 8
    epsilon: float = 0.2
    alpha: float = 0.01
    beta: float = 0.001
    gamma_coeff: float = 1.0
    tau_div: float = 0.1
    div_interval: int = 100
    div_sample: int = 64
    buffer_cap: int = 1000
    standardize: bool = True
    gae_gamma: float = 0.99
    gae_lambda: float = 0.95
    step_gamma: float = 0.95
    value_coef: float = 0.5
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    max_grad_norm: float = 1.0
    gradnorm_asymmetry: float = 1.5
    cagrad_c: float = 0.5


@dataclasses.dataclass
class TrainingConfig:
    total_env_steps: int = 20000
    groups_per_batch: int = 4
    minibatch_trajectories: int = 4
    seeds: tuple = (0, 1, 2)
    conflict_interval: int = 10
    eval_episodes: int = 48
    warmup_episodes: int = 200
    warmup_updates: int = 300
    checkpoint: bool = True


@dataclasses.dataclass
class ExperimentConfig:
    env: EnvConfig = dataclasses.field(default_factory=EnvConfig)
    policy: PolicyConfig = dataclasses.field(default_factory=PolicyConfig)
    router: RouterBlock = dataclasses.field(default_factory=RouterBlock)
    algorithm: AlgorithmConfig = dataclasses.field(default_factory=AlgorithmConfig)
    training: TrainingConfig = dataclasses.field(default_factory=TrainingConfig)
    routing: str = "phase"
    surgery: str = "off"
    output_dir: str = "runs"
    run_name: str = "run"

    def validate(self) -> None:
        self.env.validate()
        if self.routing not in ROUTING_MODES:
            raise ConfigError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")
        if self.surgery not in SURGERY_MODES:
            raise ConfigError(f"surgery must be one of {SURGERY_MODES}, got {self.surgery!r}")
        a = self.algorithm
        if a.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {a.algorithm!r}")
        if a.algorithm != "ppo" and a.n_group < 2:
            raise ConfigError("group estimators need n_group >= 2")
        if not 0 < a.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        for name in ("alpha", "beta", "gamma_coeff", "tau_div", "lr", "max_grad_norm"):
            if getattr(a, name) < 0:
                raise ConfigError(f"algorithm.{name} must be nonnegative")
        if a.div_interval < 1 or a.div_sample < 1 or a.buffer_cap < 1:
            raise ConfigError("div_interval, div_sample and buffer_cap must be positive")
        # K=0 means one shared adapter without a router
        if self.policy.K < 0:
            raise ConfigError("policy.K must be >= 0")
        if self.policy.K == 0 and self.routing != "none":
            raise ConfigError("K=0 requires routing: none")
        if self.routing == "none" and self.policy.K not in (0, 1):
            raise ConfigError("routing: none requires K=0 (single shared adapter)")
        if self.surgery != "off" and self.policy.K != 0:
            raise ConfigError("gradient surgery applies to the single-adapter arm (K=0)")
        if self.routing == "token_top2" and self.policy.K < 2:
            raise ConfigError("top-2 token routing needs K >= 2")
        if self.policy.rank < 1 or self.policy.d_model < 1:
            raise ConfigError("policy.rank and policy.d_model must be positive")
        r = self.router
        if r.L < 1 or r.d < 1 or r.n_layers < 1 or r.token_m < 1:
            raise ConfigError("router sizes must be positive")
        if not (r.tau0 > 0 and r.tauf > 0 and r.tau0 >= r.tauf and r.T_anneal > 0):
            raise ConfigError("need tau0 >= tauf > 0 and T_anneal > 0")
        t = self.training
        if t.total_env_steps < 1 or t.groups_per_batch < 1 or t.minibatch_trajectories < 1:
            raise ConfigError("training sizes must be positive")
        if not t.seeds:
            raise ConfigError("training.seeds must list at least one seed")

    @property
    def n_adapters(self) -> int:
        return max(1, self.policy.K)


_BLOCKS = {"env": EnvConfig, "policy": PolicyConfig, "router": RouterBlock,
           "algorithm": AlgorithmConfig, "training": TrainingConfig}
_SCALARS = ("routing", "surgery", "output_dir", "run_name")


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, dict) or default is None:
        return value
    return value


def _build_block(cls, raw: Mapping, where: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}")
        current = getattr(obj, key)
        if key == "category_mix":
            try:
                resolve_category_mix(value)
            except ConfigError as exc:
                raise ConfigError(f"{where}.category_mix: {exc}") from None
            value = dict(value)
        else:
            value = _coerce(value, current, f"{where}.{key}")
        setattr(obj, key, value)
    return obj


def parse_config(raw: Mapping | None) -> ExperimentConfig:
    """Build and validate a config from a nested mapping; unknown keys are errors."""
    raw = dict(raw or {})
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in _BLOCKS:
            setattr(cfg, key, _build_block(_BLOCKS[key], value or {}, key))
        elif key in _SCALARS:
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    if cfg.policy.K == 0 and "routing" not in raw:
        # the single shared adapter has nothing to route
        cfg.routing = "none"
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in _BLOCKS:
        block = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in block.items()}
    for name in _SCALARS:
        out[name] = getattr(cfg, name)
    return out


def _parse_scalar(text: str):
    value = yaml.safe_load(text)
    return value


def apply_overrides(raw: Mapping | None, overrides) -> dict:
    """Apply ``a.b=value`` overrides to a nested mapping (values parsed as YAML)."""
    out = copy.deepcopy(dict(raw or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"bad override path {path!r}")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a scalar")
        node[keys[-1]] = _parse_scalar(text)
    return out


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at top level")
    return parse_config(apply_overrides(raw, overrides))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
