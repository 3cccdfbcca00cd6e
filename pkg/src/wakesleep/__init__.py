"""Wake-sleep lifelong reinforcement learning on grid-world strategy tasks."""

from .config import ConfigError, RunConfig, load_config, loads_config
from .lifetime import load_ste_baselines, run_lifetime, run_ste
from .reporting import report

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "loads_config",
    "run_lifetime",
    "run_ste",
    "load_ste_baselines",
    "report",
    "__version__",
]
