from .config import (
    AgentConfig,
    ConfigError,
    EnvConfig,
    EvalConfig,
    ExperimentConfig,
    KGEConfig,
    SystemConfig,
    TrainConfig,
)

__all__ = [
    "AgentConfig",
    "ConfigError",
    "EnvConfig",
    "EvalConfig",
    "ExperimentConfig",
    "KGEConfig",
    "SystemConfig",
    "TrainConfig",
]
