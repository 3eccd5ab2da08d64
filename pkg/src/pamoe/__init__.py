"""Phase-aware mixture of LoRA experts for RL agents, on a from-scratch autodiff core."""
from .config import ExperimentConfig, load_config, parse_config
from .envs import ConfigError, EnvConfig, Phase, PhasedGridWorld, UsageError
from .harness import ablate, compare_routing, report, run_experiment
from .policy import MoEPolicy, PolicyConfig
from .router import PhaseRouter, RouterConfig, switching_penalty
from .training import NumericalAbort, Trainer

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load_config", "parse_config", "ConfigError", "UsageError", "EnvConfig",
    "Phase", "PhasedGridWorld", "MoEPolicy", "PolicyConfig", "PhaseRouter", "RouterConfig",
    "switching_penalty", "Trainer", "NumericalAbort", "run_experiment", "compare_routing",
    "ablate", "report", "__version__",
]
