"""Streaming-LDA danger detector: per-state probability of losing the episode.

A linear discriminant classifier over a frozen feature extractor is updated
online from end-of-episode outcomes (win = positive net reward). Class means
and a shared covariance are maintained with exact streaming (Welford-style)
updates, so the fitted model matches a batch LDA fit on the same data and is
insensitive to the order in which episodes arrive. The predicted loss
probability ("danger score") annotates transitions and can drive replay
priorities: the default mode prioritizes safe states.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .pipeline import AugmentedObservation, policy_input

WIN, LOSS = 0, 1
CLASS_NAMES = ("win", "loss")
PRIORITY_MODES = ("safe", "dangerous")


@dataclass
class SLDAState:
    """Running sufficient statistics for a two-class shared-covariance LDA."""

    dim: int
    shrinkage: float = 1e-4
    class_means: np.ndarray = None  # (2, dim)
    class_counts: np.ndarray = None  # (2,) samples seen per class
    cov: np.ndarray = None  # (dim, dim) shared within-class covariance
    total_count: int = 0
    abstain_count: int = 0  # predictions requested before both classes seen

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("feature dimension must be positive")
        if not 0.0 < self.shrinkage < 1.0:
            raise ValueError("shrinkage must lie in (0, 1)")
        if self.class_means is None:
            self.class_means = np.zeros((2, self.dim))
        if self.class_counts is None:
            self.class_counts = np.zeros(2, dtype=np.int64)
        if self.cov is None:
            self.cov = np.zeros((self.dim, self.dim))

    @property
    def ready(self) -> bool:
        return bool(np.all(self.class_counts > 0))


def _class_index(label) -> int:
    if label in (WIN, LOSS):
        return int(label)
    if label in CLASS_NAMES:
        return CLASS_NAMES.index(label)
    raise ValueError(f"label must be one of {CLASS_NAMES} or 0/1, got {label!r}")


def slda_update(state: SLDAState, feature, label) -> None:
    """Fold one labelled feature vector into the running statistics.

    The shared covariance uses the rank-1 update
    ``cov <- (t * cov + delta delta^T * n_k / (n_k + 1)) / (t + 1)`` with
    ``delta`` measured from the pre-update class mean, ``n_k`` the class
    count and ``t`` the total count. The class-count weight makes the sum of
    rank-1 terms equal the exact within-class scatter, so the result matches
    batch statistics for any arrival order.
    """
    k = _class_index(label)
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (state.dim,):
        raise ValueError(f"expected feature of shape ({state.dim},), got {x.shape}")
    n_k = state.class_counts[k]
    t = state.total_count
    delta = x - state.class_means[k]
    state.cov = (t * state.cov + np.outer(delta, delta) * (n_k / (n_k + 1))) / (t + 1)
    state.class_means[k] += delta / (n_k + 1)
    state.class_counts[k] += 1
    state.total_count += 1


def _discriminants(state: SLDAState) -> tuple[np.ndarray, np.ndarray]:
    """Per-class linear scoring functions (weights, biases) from the stats."""
    mixed = (1.0 - state.shrinkage) * state.cov + state.shrinkage * np.eye(state.dim)
    precision = np.linalg.inv(mixed)
    w = state.class_means @ precision.T  # (2, dim), rows w_k = precision @ mu_k
    b = -0.5 * np.einsum("kd,kd->k", state.class_means, w)
    return w, b


def slda_predict(state: SLDAState, feature) -> float:
    """Danger score in [0, 1]: softmax probability of the loss class.

    Abstains at 0.5 (and counts the abstention on the state) until both
    classes have been observed at least once.
    """
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (state.dim,):
        raise ValueError(f"expected feature of shape ({state.dim},), got {x.shape}")
    if not state.ready:
        state.abstain_count += 1
        return 0.5
    w, b = _discriminants(state)
    scores = w @ x + b
    scores -= scores.max()
    exp = np.exp(scores)
    return float(exp[LOSS] / exp.sum())


def priority_from_danger(score: float, mode: str = "safe") -> float:
    """Replay priority from a danger score; "safe" favors low-danger states."""
    if mode not in PRIORITY_MODES:
        raise ValueError(f"priority mode must be one of {PRIORITY_MODES}, got {mode!r}")
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"danger score must lie in [0, 1], got {score}")
    return float(score) if mode == "dangerous" else float(1.0 - score)


def is_defeat_task(task_id: str) -> bool:
    return task_id.startswith("defeat")


def extractor_feature_fn(extractor: nets.MLPParams, feature_names: list[str]):
    """Feature function over a frozen snapshot of a policy extractor."""
    frozen = nets.mlp_clone(extractor)

    def feature_fn(aug: AugmentedObservation) -> np.ndarray:
        x = policy_input(aug, feature_names)[None, :]
        return nets.mlp_forward(frozen, x).out[0]

    return feature_fn


class DangerAnnotator:
    """Annotator plugin scoring each state's probability of a lost episode.

    During an episode every observed state is scored with the current
    detector and (on combat tasks, during training) its features are
    buffered per worker. At episode end the net reward decides the win/loss
    label and every buffered state updates the detector. Non-combat tasks
    and evaluation episodes pass through: they are scored but never update
    the statistics.
    """

    name = "danger"

    def __init__(self, feature_fn, dim: int, shrinkage: float = 1e-4, priority_mode: str = "safe"):
        if priority_mode not in PRIORITY_MODES:
            raise ValueError(f"priority mode must be one of {PRIORITY_MODES}, got {priority_mode!r}")
        self.feature_fn = feature_fn
        self.state = SLDAState(dim=dim, shrinkage=shrinkage)
        self.priority_mode = priority_mode
        self._episode_features: dict = {}  # worker -> list of feature vectors
        self._episode_scores: dict = {}  # worker -> list of danger scores
        self.episode_reports: list[dict] = []  # drained by the run logger

    def priority(self, score: float) -> float:
        return priority_from_danger(score, self.priority_mode)

    def annotate(self, aug: AugmentedObservation, step: dict, training: bool) -> dict:
        feature = np.asarray(self.feature_fn(aug), dtype=np.float64)
        score = slda_predict(self.state, feature)
        if training and is_defeat_task(aug.task_id):
            worker = step.get("worker", 0)
            self._episode_features.setdefault(worker, []).append(feature)
            self._episode_scores.setdefault(worker, []).append(score)
        return {"danger": score}

    def episode_end(self, summary: dict, training: bool) -> None:
        worker = summary.get("worker", 0)
        features = self._episode_features.pop(worker, [])
        scores = self._episode_scores.pop(worker, [])
        if not training or not is_defeat_task(summary["task_id"]) or not features:
            return
        label = WIN if summary["total_reward"] > 0 else LOSS
        for feature in features:
            slda_update(self.state, feature, label)
        self.episode_reports.append(
            {
                "task_id": summary["task_id"],
                "label": CLASS_NAMES[label],
                "mean_danger": float(np.mean(scores)),
                "states": len(features),
            }
        )
