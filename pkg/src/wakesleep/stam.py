"""Online patch clustering with a dual short/long-term centroid memory.

Images are carved into overlapping patches; background patches (where a 3x3
erosion and dilation agree within a threshold) are discarded. Foreground
patches stream into a short-term memory of centroids: each patch either
updates its nearest centroid by a convex step or, when its distance clears a
novelty threshold (an empirical percentile of recent nearest-centroid
distances), founds a new centroid. Centroids selected often enough are copied
— frozen — into a long-term memory whose ids are stable and serve as object
type ids.

Because near-duplicate centroids can lock onto the same visual prototype,
patches also cast votes for every centroid almost as close as their match;
centroid pairs that share most of their vote mass are treated as one object
type when ids are read out. Read-side embedding maps each connected group of
foreground patches to the long-term id of its most central patch, exposed as
an id grid plus a bag-of-ids count vector.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import gridworld as gw


@dataclass
class STAMConfig:
    patch: int = 16  # receptive field side length
    stride: int = 4
    alpha: float = 0.05  # centroid learning rate
    beta: float = 0.95  # novelty percentile
    theta: int = 20  # selections before promotion to long-term memory
    delta: int = 400  # short-term memory capacity
    ltm_capacity: int = 2000
    eps: float = 2.0  # background threshold on the erosion/dilation gap
    vote_k: int = 5
    history_size: int = 1000  # nearest-distance reservoir length
    min_history: int = 50  # novelty needs at least this many distances
    vote_band: float = 3.0  # vote for centroids within band * match distance
    merge_min_votes: int = 20  # vote-mass merges need this much evidence

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if min(self.patch, self.stride, self.theta, self.delta, self.ltm_capacity) < 1:
            raise ValueError("patch, stride, theta and capacities must be positive")
        if self.eps < 0 or self.vote_k < 1:
            raise ValueError("eps must be non-negative and vote_k positive")


def _window_extrema(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 min (erosion) and max (dilation) with edge-replicated borders."""
    padded = np.pad(plane, 1, mode="edge")
    windows = sliding_window_view(padded, (3, 3))
    return windows.min(axis=(2, 3)), windows.max(axis=(2, 3))


def patch_positions(side: int, patch: int, stride: int) -> list[int]:
    if patch > side:
        raise ValueError(f"patch {patch} larger than image side {side}")
    return list(range(0, side - patch + 1, stride))


def background_mask(plane: np.ndarray, eps: float, patch: int, stride: int) -> np.ndarray:
    """Boolean patch grid, True where a patch is background.

    A patch is background iff the largest erosion/dilation gap over its
    pixels is at most `eps` — constant regions have zero gap, object borders
    a large one.
    """
    plane = np.asarray(plane, dtype=np.float64)
    eroded, dilated = _window_extrema(plane)
    gap = dilated - eroded
    rows = patch_positions(plane.shape[0], patch, stride)
    cols = patch_positions(plane.shape[1], patch, stride)
    windows = sliding_window_view(gap, (patch, patch))
    return windows[np.ix_(rows, cols)].max(axis=(2, 3)) <= eps


def image_patches(plane: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """All patches as flat vectors, shape (rows, cols, patch * patch)."""
    plane = np.asarray(plane, dtype=np.float64)
    rows = patch_positions(plane.shape[0], patch, stride)
    cols = patch_positions(plane.shape[1], patch, stride)
    windows = sliding_window_view(plane, (patch, patch))
    return windows[np.ix_(rows, cols)].reshape(len(rows), len(cols), patch * patch)


@dataclass
class Centroid:
    uid: int
    vector: np.ndarray
    hits: int = 0
    promoted: bool = False


class CentroidMemory:
    """Dual STM/LTM centroid store with novelty detection and vote merging."""

    def __init__(self, config: STAMConfig | None = None):
        self.config = config if config is not None else STAMConfig()
        self.stm: list[Centroid] = []
        self.ltm: list[Centroid] = []  # frozen copies; index = raw object id
        self.distance_history: deque = deque(maxlen=self.config.history_size)
        self.votes: dict[int, int] = {}  # uid -> times voted for
        self.covotes: dict[frozenset, int] = {}  # {uid, uid} -> joint votes
        self._next_uid = 0

    def _all_centroids(self) -> list[Centroid]:
        return self.stm + self.ltm

    def _create(self, patch: np.ndarray) -> Centroid:
        centroid = Centroid(uid=self._next_uid, vector=patch.copy())
        self._next_uid += 1
        self.stm.append(centroid)
        if len(self.stm) > self.config.delta:
            unpromoted = next((c for c in self.stm if not c.promoted), self.stm[0])
            self.stm.remove(unpromoted)
        return centroid

    def novelty_threshold(self) -> float | None:
        if len(self.distance_history) < self.config.min_history:
            return None
        return float(np.quantile(np.asarray(self.distance_history), self.config.beta))

    def _record_votes(self, candidates: list[Centroid], distances: np.ndarray, match_distance: float) -> None:
        band = self.config.vote_band * match_distance
        eligible = np.flatnonzero(distances <= band)
        voted = eligible[np.argsort(distances[eligible], kind="stable")][: self.config.vote_k]
        # a promoted centroid appears as both its live STM entry and its
        # frozen LTM copy; it still gets only one vote per patch
        uids = list(dict.fromkeys(candidates[i].uid for i in voted))
        for uid in uids:
            self.votes[uid] = self.votes.get(uid, 0) + 1
        for a in range(len(uids)):
            for b in range(a + 1, len(uids)):
                pair = frozenset((uids[a], uids[b]))
                self.covotes[pair] = self.covotes.get(pair, 0) + 1

    def cluster_patch(self, patch) -> tuple[int, bool]:
        """Assign one foreground patch; returns (centroid uid, was_novel)."""
        patch = np.asarray(patch, dtype=np.float64).ravel()
        candidates = self._all_centroids()
        if not candidates:
            return self._create(patch).uid, True
        distances = np.array([np.linalg.norm(patch - c.vector) for c in candidates])
        nearest = int(np.argmin(distances))
        match_distance = float(distances[nearest])
        threshold = self.novelty_threshold()
        self.distance_history.append(match_distance)
        if threshold is not None and match_distance > threshold:
            return self._create(patch).uid, True
        self._record_votes(candidates, distances, match_distance)
        matched = candidates[nearest]
        if nearest < len(self.stm):  # long-term copies are frozen
            alpha = self.config.alpha
            matched.vector = alpha * patch + (1.0 - alpha) * matched.vector
            matched.hits += 1
            if (
                matched.hits > self.config.theta
                and not matched.promoted
                and len(self.ltm) < self.config.ltm_capacity
            ):
                matched.promoted = True
                self.ltm.append(Centroid(uid=matched.uid, vector=matched.vector.copy(), promoted=True))
        return matched.uid, False

    def _merged_groups(self) -> dict[int, int]:
        """Union-find over LTM uids: pairs sharing >1/2 vote mass merge."""
        uids = [c.uid for c in self.ltm]
        parent = {uid: uid for uid in uids}

        def find(u):
            while parent[u] != u:
                parent[u] = parent[parent[u]]
                u = parent[u]
            return u

        in_ltm = set(uids)
        for pair, joint in self.covotes.items():
            a, b = tuple(pair)
            if a not in in_ltm or b not in in_ltm:
                continue
            weaker = min(self.votes.get(a, 0), self.votes.get(b, 0))
            if weaker >= self.config.merge_min_votes and joint > 0.5 * weaker:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        return {uid: find(uid) for uid in uids}

    def object_ids(self) -> dict[int, int]:
        """Map LTM uid -> object type id (lowest raw id of its merged group)."""
        groups = self._merged_groups()
        raw_id = {c.uid: i for i, c in enumerate(self.ltm)}
        root_id: dict[int, int] = {}
        for uid in raw_id:
            root = groups[uid]
            root_id[root] = min(root_id.get(root, raw_id[uid]), raw_id[uid])
        return {uid: root_id[groups[uid]] for uid in raw_id}

    def learn_image(self, plane: np.ndarray) -> int:
        """Cluster every foreground patch of one image; returns patch count."""
        cfg = self.config
        background = background_mask(plane, cfg.eps, cfg.patch, cfg.stride)
        patches = image_patches(plane, cfg.patch, cfg.stride)
        count = 0
        for r, c in np.argwhere(~background):
            self.cluster_patch(patches[r, c])
            count += 1
        return count

    def embed(self, plane: np.ndarray) -> tuple[dict, np.ndarray]:
        """Read-only object-id readout: ({(row, col): id}, bag-of-ids vector).

        Foreground patches are grouped into 4-connected components; each
        component is represented by the single patch whose grid position is
        closest to the component's centroid, labelled with the object id of
        its nearest long-term centroid.
        """
        cfg = self.config
        bag = np.zeros(cfg.ltm_capacity)
        grid: dict = {}
        if not self.ltm:
            return grid, bag
        background = background_mask(plane, cfg.eps, cfg.patch, cfg.stride)
        if background.all():
            return grid, bag
        patches = image_patches(plane, cfg.patch, cfg.stride)
        ids = self.object_ids()
        ltm_matrix = np.stack([c.vector for c in self.ltm])
        for component in _connected_components(~background):
            center = component.mean(axis=0)
            central = component[np.argmin(((component - center) ** 2).sum(axis=1))]
            vector = patches[central[0], central[1]]
            nearest = int(np.argmin(np.linalg.norm(ltm_matrix - vector, axis=1)))
            object_id = ids[self.ltm[nearest].uid]
            grid[(int(central[0]), int(central[1]))] = object_id
            bag[object_id] += 1
        return grid, bag


def _connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean grid, each as an (n, 2) index array."""
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for r, c in np.argwhere(mask):
        if seen[r, c]:
            continue
        stack, member = [(r, c)], []
        seen[r, c] = True
        while stack:
            cr, cc = stack.pop()
            member.append((cr, cc))
            for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                if 0 <= nr < mask.shape[0] and 0 <= nc < mask.shape[1]:
                    if mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
        components.append(np.array(sorted(member)))
    return components


def grid_config() -> STAMConfig:
    """Receptive field sized for 16x16 unit-type frames scaled to [0, 1]."""
    return STAMConfig(patch=4, stride=2, eps=0.05)


class STAMPreprocessor:
    """Preprocessor plugin exposing the bag-of-object-ids vector as a feature.

    The unit-type plane (scaled to [0, 1]) is the input image. Training
    observations also update the shared centroid memory; evaluation
    observations only read.
    """

    name = "stam"

    def __init__(self, memory: CentroidMemory | None = None):
        self.memory = memory if memory is not None else CentroidMemory(grid_config())
        self.last_grid: dict = {}

    def features(self, planes: np.ndarray, upstream: dict, training: bool) -> np.ndarray:
        plane = np.asarray(planes[0], dtype=np.float64) / gw.MAX_CODE
        if training:
            self.memory.learn_image(plane)
        self.last_grid, bag = self.memory.embed(plane)
        return bag


def dump_ltm(memory: CentroidMemory, path) -> dict:
    """Write long-term centroids and their id table to an .npz file."""
    ids = memory.object_ids()
    vectors = (
        np.stack([c.vector for c in memory.ltm])
        if memory.ltm
        else np.zeros((0, memory.config.patch**2))
    )
    table = np.array([[i, c.uid, ids[c.uid]] for i, c in enumerate(memory.ltm)], dtype=np.int64)
    np.savez(path, centroids=vectors, id_table=table.reshape(-1, 3))
    return {"centroids": len(memory.ltm), "object_types": len(set(ids.values()))}
