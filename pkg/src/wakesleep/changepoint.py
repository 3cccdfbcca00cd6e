"""Distribution change detection over feature streams for adaptive sleep.

A reference batch of feature vectors summarizes "what the world has looked
like"; incoming vectors fill a window summarizing "what it looks like now".
Each time the window fills, it is compared to the reference with a
per-dimension 1-D Wasserstein distance (averaged over dimensions), and a
change fires when that distance exceeds the running mean of the distance
history by `kappa` standard deviations. Windows tumble rather than slide:
testing once per window keeps the recorded distances nearly independent,
which is what makes a mean + kappa·std threshold usable (per-step tests on a
sliding window take the maximum of ~window-length correlated excursions and
false-alarm far more often than their nominal tail probability).

When the reference completes, the distance history is seeded by bootstrap
splits of the reference against itself, so the threshold is ready before the
first real window arrives. After a detection the reference is replaced by the
current window (then regrows to full size from subsequent quiet windows) and
the statistics reset, so the detector re-learns the new regime.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


def _mean_quantile_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Mean |Q_a - Q_b| over aligned quantile positions.

    Equal-length samples couple order statistics directly. Otherwise both
    empirical quantile functions are evaluated (with linear interpolation) at
    the shorter length's midpoint positions, which keeps the distance
    symmetric and exactly equivariant under scaling, including sign flips.
    """
    if a.shape[0] == b.shape[0]:
        return float(np.mean(np.abs(np.sort(a, axis=0) - np.sort(b, axis=0))))
    m = min(a.shape[0], b.shape[0])
    q = (np.arange(m) + 0.5) / m
    return float(np.mean(np.abs(np.quantile(a, q, axis=0) - np.quantile(b, q, axis=0))))


def wasserstein_1d(a, b) -> float:
    """W1 between two 1-D samples: mean gap between order statistics."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs two non-empty 1-D samples")
    return _mean_quantile_gap(a, b)


def multidim_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over feature dimensions of the per-dimension W1 distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"need (n, d) batches with matching d, got {a.shape} vs {b.shape}")
    return _mean_quantile_gap(a, b)


@dataclass
class ChangeEvent:
    step: int
    distance: float
    threshold: float


class ChangeDetector:
    """Streaming change detector with a self-adapting threshold.

    Protocol per `observe(x)`:

    * While the reference holds fewer than `reference_size` vectors, `x`
      grows the reference. The moment it completes, the distance history is
      seeded with `n_boot` bootstrap distances (random reference splits:
      a held-out pseudo-window of ``min(window_size, n // 2)`` rows against
      the rest), so a threshold exists before any real window is scored.
    * Afterwards `x` grows the current window. Nothing happens until the
      window holds `window_size` vectors; then one reference-vs-window
      distance is computed and the window is cleared (tumbling).
    * The distance fires a `ChangeEvent` when the history holds at least
      `min_history` entries, the cooldown from the previous event has
      elapsed, and the distance exceeds ``mean + kappa * std`` of the
      history. On firing, the window becomes the new reference seed, history
      and window reset (history re-seeded by bootstrap), and a cooldown of
      `cooldown` steps (default ``2 * window_size``) begins.
    * A quiet window's distance joins the history, and while the reference
      is still short of `reference_size` (regrowing after a detection) the
      window's rows are absorbed into the reference.
    """

    def __init__(
        self,
        dim: int,
        reference_size: int = 200,
        window_size: int = 50,
        kappa: float = 3.0,
        cooldown: int | None = None,
        min_history: int = 10,
        n_boot: int = 24,
        boot_seed: int = 0,
    ):
        if dim < 1 or reference_size < 1 or window_size < 1:
            raise ValueError("dim, reference_size and window_size must be positive")
        if min_history < 1 or n_boot < 0:
            raise ValueError("min_history must be positive and n_boot non-negative")
        self.dim = dim
        self.reference_size = reference_size
        self.window_size = window_size
        self.kappa = kappa
        self.cooldown = 2 * window_size if cooldown is None else cooldown
        self.min_history = min_history
        self.n_boot = n_boot
        self.reference: list = []
        self.window: list = []
        self.history: list = []
        self.step = 0
        self._cooldown_until = -1
        self._filling = True
        self._rng = np.random.default_rng(boot_seed)

    def _seed_history(self) -> None:
        """Prime the history with distances between random reference splits."""
        ref = np.asarray(self.reference)
        n = ref.shape[0]
        held = min(self.window_size, n // 2)
        if held < 1:
            return
        for _ in range(self.n_boot):
            idx = self._rng.permutation(n)
            self.history.append(multidim_distance(ref[idx[held:]], ref[idx[:held]]))

    def observe(self, feature_vector) -> ChangeEvent | None:
        x = np.asarray(feature_vector, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"expected feature of shape ({self.dim},), got {x.shape}")
        self.step += 1
        if self._filling:
            # Initial reference fill (before the first window ever starts).
            self.reference.append(x)
            if len(self.reference) == self.reference_size:
                self._seed_history()
                self._filling = False
            return None
        self.window.append(x)
        if len(self.window) < self.window_size:
            return None
        distance = multidim_distance(np.asarray(self.reference), np.asarray(self.window))
        if len(self.history) >= self.min_history and self.step > self._cooldown_until:
            hist = np.asarray(self.history)
            threshold = float(hist.mean() + self.kappa * hist.std())
            if distance > threshold:
                event = ChangeEvent(step=self.step, distance=distance, threshold=threshold)
                self.reference = list(self.window)
                self.window = []
                self.history = []
                self._cooldown_until = self.step + self.cooldown
                self._seed_history()
                return event
        self.history.append(distance)
        if len(self.reference) < self.reference_size:
            self.reference.extend(self.window)
        self.window = []
        return None
