"""Run configuration: a typed dataclass tree loaded from a flat YAML file.

A configuration file is one YAML mapping (scalars, maps, lists -- no anchors
and no file includes). A top-level ``templates`` section holds shared values;
any string of the form ``${name}`` elsewhere in the file is replaced by the
named template value, and references embedded in longer strings substitute
textually. Command-line ``key.path=value`` pairs override file values before
templates expand. Unknown keys and type mismatches are rejected with their
full key path, and the fully resolved tree serializes next to the run outputs
so a run can be reproduced from its snapshot alone.
"""
from __future__ import annotations

import re
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from . import gridworld as gw

SCENARIOS = ("pairwise", "alternating", "condensed")
PRIORITY_MODES = ("safe", "dangerous")

_REF = re.compile(r"\$\{([^}]+)\}")


class ConfigError(ValueError):
    """A configuration file or override that cannot be applied."""


def _all_tasks() -> list:
    return list(gw.TASKS)


@dataclass
class SyllabusConfig:
    """Which tasks the lifetime sees, in which layout, at what block lengths."""

    scenario: str = "condensed"
    tasks: list = field(default_factory=_all_tasks)
    lb_steps: int = 50_000
    eb_episodes: int = 30

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.tasks:
            raise ValueError("tasks must name at least one task")
        for t in self.tasks:
            gw.task_spec(t)
        if self.lb_steps < 0:
            raise ValueError("lb_steps must be nonnegative")
        if self.eb_episodes < 1:
            raise ValueError("eb_episodes must be positive")


@dataclass
class ModelConfig:
    """Network sizes shared by the wake policy and the sleep eigentasks."""

    hidden: list = field(default_factory=lambda: [96])
    feature_dim: int = 64
    latent_dim: int = 16
    vae_hidden: int = 64
    policy_features: list = field(default_factory=lambda: ["flat"])

    def __post_init__(self):
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ValueError("hidden must be a non-empty list of positive widths")
        if min(self.feature_dim, self.latent_dim, self.vae_hidden) < 1:
            raise ValueError("feature_dim, latent_dim and vae_hidden must be positive")
        if not self.policy_features:
            raise ValueError("policy_features must name at least one feature")


@dataclass
class WakeConfig:
    """Plastic learner: optimizer, off-policy correction, and advice."""

    lr: float = 1e-3
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    unroll: int = 20
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    traj_per_update: int = 32
    update_every: int = 64
    buffer_capacity: int = 10_000
    advice_p0: float = 0.8
    reset_on_wake: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.rho_bar < self.c_bar or self.c_bar <= 0:
            raise ValueError("need rho_bar >= c_bar > 0")
        if min(self.unroll, self.traj_per_update, self.update_every, self.buffer_capacity) < 1:
            raise ValueError("unroll, traj_per_update, update_every and buffer_capacity must be positive")
        if not 0 <= self.advice_p0 <= 1:
            raise ValueError("advice_p0 must lie in [0, 1]")


@dataclass
class SleepSection:
    """Consolidation: loss weights, schedule, and the eigentask bank."""

    iterations: int = 4500
    batch: int = 64
    w_imitation: float = 50.0
    w_recon: float = 200.0
    w_kl: float = 5.0
    w_value: float = 1.0
    gen_replay_from_sleep: int = 2
    forced_per_lb: int = 2
    eigentask_count: int = 1
    skill_eval_episodes: int = 5

    def __post_init__(self):
        if min(self.iterations, self.batch, self.eigentask_count, self.skill_eval_episodes) < 1:
            raise ValueError("iterations, batch, eigentask_count and skill_eval_episodes must be positive")
        if min(self.w_imitation, self.w_recon, self.w_kl) <= 0 or self.w_value < 0:
            raise ValueError("loss weights must be positive (w_value may be zero)")
        if self.gen_replay_from_sleep < 1:
            raise ValueError("gen_replay_from_sleep must be positive")
        if self.forced_per_lb < 0:
            raise ValueError("forced_per_lb must be nonnegative")


@dataclass
class ReplaySection:
    """Exemplar anchoring and priority-aware wake-batch sampling."""

    capacity: int = 10_000
    exemplars_per_sleep: int = 96
    prioritized: bool = False
    alpha: float = 0.6
    uniform_mix: float = 0.1
    danger_priority_mode: str = "safe"

    def __post_init__(self):
        if self.capacity < 1 or self.exemplars_per_sleep < 1:
            raise ValueError("capacity and exemplars_per_sleep must be positive")
        if self.alpha < 0 or not 0 <= self.uniform_mix <= 1:
            raise ValueError("need alpha >= 0 and uniform_mix in [0, 1]")
        if self.danger_priority_mode not in PRIORITY_MODES:
            raise ValueError(
                f"danger_priority_mode must be one of {PRIORITY_MODES}, got {self.danger_priority_mode!r}"
            )


@dataclass
class WatchSection:
    """Adaptive sleep triggering over the stable extractor's features."""

    reference_size: int = 200
    window_size: int = 50
    kappa: float = 3.0
    min_history: int = 10
    n_boot: int = 24
    min_sleep_gap: int = 5000
    keep_forced: bool = True

    def __post_init__(self):
        if min(self.reference_size, self.window_size, self.min_history) < 1:
            raise ValueError("reference_size, window_size and min_history must be positive")
        if self.kappa <= 0 or self.n_boot < 0 or self.min_sleep_gap < 0:
            raise ValueError("need kappa > 0, n_boot >= 0 and min_sleep_gap >= 0")


@dataclass
class ComponentToggles:
    """On/off switches for each optional subsystem."""

    sleep: bool = True
    adaptive_sleep: bool = False
    remind: bool = False
    danger: bool = False
    stam: bool = False
    random_replay: bool = True


@dataclass
class RunConfig:
    syllabus: SyllabusConfig = field(default_factory=SyllabusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    wake: WakeConfig = field(default_factory=WakeConfig)
    sleep: SleepSection = field(default_factory=SleepSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    watch: WatchSection = field(default_factory=WatchSection)
    components: ComponentToggles = field(default_factory=ComponentToggles)
    seed: int = 0
    workers: int = 8
    out_dir: str = "runs/run"
    ste_dir: str = "ste"
    env: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if not self.out_dir:
            raise ValueError("out_dir must be a nonempty path")


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------


def parse_overrides(pairs) -> dict:
    """``key.path=value`` strings into a nested dict; values parse as YAML."""
    tree: dict = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw) if raw else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {pair!r} has an unparseable value: {exc}") from exc
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {pair!r} descends through scalar key {part!r}")
        node[parts[-1]] = value
    return tree


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def _substitute(value, templates: dict, path: str):
    if isinstance(value, str):
        exact = _REF.fullmatch(value)
        if exact:
            name = exact.group(1)
            if name not in templates:
                raise ConfigError(f"{path}: unresolved template reference '${{{name}}}'")
            return templates[name]

        def repl(match):
            name = match.group(1)
            if name not in templates:
                raise ConfigError(f"{path}: unresolved template reference '${{{name}}}'")
            return str(templates[name])

        return _REF.sub(repl, value)
    if isinstance(value, list):
        return [_substitute(v, templates, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        return {k: _substitute(v, templates, f"{path}.{k}") for k, v in value.items()}
    return value


def expand_templates(tree: dict) -> dict:
    """Resolve the ``templates`` section, then substitute through the tree."""
    templates = tree.get("templates", {}) or {}
    if not isinstance(templates, dict):
        raise ConfigError("templates: must be a mapping")
    # templates may reference each other; iterate to a fixpoint
    for _ in range(len(templates) + 1):
        expanded = {k: _substitute(v, templates, f"templates.{k}") for k, v in templates.items()}
        if expanded == templates:
            break
        templates = expanded
    else:
        raise ConfigError("templates: circular reference")
    for k, v in templates.items():
        if isinstance(v, str) and _REF.search(v):
            raise ConfigError(f"templates.{k}: circular reference")
    out = {k: (_substitute(v, templates, k) if k != "templates" else templates) for k, v in tree.items()}
    return out


# ---------------------------------------------------------------------------
# Typed construction
# ---------------------------------------------------------------------------


def _check_scalar(value, hint, path: str):
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _build_value(value, hint, path: str):
    if is_dataclass(hint):
        return _build_dataclass(hint, value, path)
    origin = typing.get_origin(hint)
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    return _check_scalar(value, hint, path)


def _build_dataclass(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key {where!r}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _build_value(value, hints[name], sub)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def loads_config(text: str, overrides=()) -> RunConfig:
    """Parse config text, apply overrides, expand templates, validate."""
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"configuration must be a mapping, got {type(tree).__name__}")
    tree = _merge(tree, parse_overrides(overrides))
    tree = expand_templates(tree)
    return _build_dataclass(RunConfig, tree, "")


def load_config(path, overrides=()) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return loads_config(f.read(), overrides)


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def dumps_resolved(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def save_resolved(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_resolved(cfg))
