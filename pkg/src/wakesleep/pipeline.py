"""Observation pipeline: pluggable preprocessors and annotators.

Preprocessors map raw observation planes to named feature vectors; each one
also sees the outputs of the preprocessors registered before it. Annotators
run after an environment step and attach named records to the transition's
observation. A failing plugin contributes an error note instead of a value
and never corrupts the entries of other plugins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gridworld as gw


@dataclass
class AugmentedObservation:
    planes: np.ndarray  # raw (3, 16, 16) observation
    task_id: str
    tick: int
    features: dict = field(default_factory=dict)  # name -> vector
    annotations: dict = field(default_factory=dict)  # name -> record
    errors: dict = field(default_factory=dict)  # plugin name -> message


class FlatPreprocessor:
    """Flatten the three planes into one vector with per-plane scaling."""

    name = "flat"

    def features(self, planes: np.ndarray, upstream: dict, training: bool) -> np.ndarray:
        ut, sel, den = planes
        return np.concatenate(
            [(ut / gw.MAX_CODE).ravel(), sel.ravel(), (den / 5.0).ravel()]
        )


class Pipeline:
    def __init__(self):
        self.preprocessors: list = []
        self.annotators: list = []

    def _check_name(self, name: str) -> None:
        taken = [p.name for p in self.preprocessors] + [a.name for a in self.annotators]
        if name in taken:
            raise ValueError(f"duplicate plugin name {name!r}")

    def register_preprocessor(self, plugin) -> None:
        self._check_name(plugin.name)
        self.preprocessors.append(plugin)

    def register_annotator(self, plugin) -> None:
        self._check_name(plugin.name)
        self.annotators.append(plugin)

    def augment(
        self, planes: np.ndarray, task_id: str, tick: int, training: bool
    ) -> AugmentedObservation:
        aug = AugmentedObservation(planes=planes, task_id=task_id, tick=tick)
        for p in self.preprocessors:
            try:
                aug.features[p.name] = p.features(planes, aug.features, training)
            except Exception as exc:  # isolate plugin failures
                aug.errors[p.name] = f"{type(exc).__name__}: {exc}"
        return aug

    def annotate(self, aug: AugmentedObservation, step: dict, training: bool) -> None:
        """Run annotators after an env step; step holds action/reward/done/logits."""
        for a in self.annotators:
            try:
                aug.annotations[a.name] = a.annotate(aug, step, training)
            except Exception as exc:
                aug.errors[a.name] = f"{type(exc).__name__}: {exc}"

    def episode_end(self, summary: dict, training: bool) -> None:
        for a in self.annotators:
            if hasattr(a, "episode_end"):
                try:
                    a.episode_end(summary, training)
                except Exception:
                    pass


def policy_input(aug: AugmentedObservation, names: list[str]) -> np.ndarray:
    """Concatenate the named feature vectors in order."""
    missing = [n for n in names if n not in aug.features]
    if missing:
        raise KeyError(f"missing policy features {missing}; have {sorted(aug.features)}")
    return np.concatenate([np.asarray(aug.features[n], dtype=np.float64) for n in names])
