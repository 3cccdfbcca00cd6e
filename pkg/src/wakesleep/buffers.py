"""Experience storage: FIFO wake buffer, exemplar replay, PQ compression, sampling.

The wake buffer holds a bounded FIFO of transitions grouped into trajectories;
eviction drops the oldest transition first, so a partially evicted trajectory
keeps a contiguous suffix that remains valid for off-policy learning (the
bootstrap observation at its tail is untouched). The random-replay buffer keeps
a small persistent set of exemplars in the original observation space.
Observations can be stored raw or compressed with per-group product
quantization (one byte per group); a priority sampler draws batches under a
power-law priority mixture.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

PLANES_SHAPE = (3, 16, 16)
RAW_PIXEL_BYTES = int(np.prod(PLANES_SHAPE)) * 4  # 32-bit storage accounting
SNAPSHOT_MAGIC = b"L2RLB1"
TASK_FIELD_BYTES = 24


# ---------------------------------------------------------------------------
# Stored observations and codecs
# ---------------------------------------------------------------------------


@dataclass
class StoredObs:
    """An observation as it sits in a buffer: raw planes or compression codes."""

    kind: str  # "raw" | "pq"
    data: np.ndarray  # float32 planes, or uint8 codes of shape (groups,)
    shape: tuple = PLANES_SHAPE


def planes_to_pixel_vector(planes: np.ndarray) -> np.ndarray:
    """Lay out (C, H, W) planes pixel-major: all channels of a pixel adjacent."""
    return np.moveaxis(np.asarray(planes, dtype=np.float64), 0, -1).ravel()


def pixel_vector_to_planes(vec: np.ndarray, shape: tuple = PLANES_SHAPE) -> np.ndarray:
    c, h, w = shape
    return np.moveaxis(np.asarray(vec, dtype=np.float64).reshape(h, w, c), -1, 0)


class IdentityCodec:
    """Stores observations as float32 planes without compression."""

    kind = "raw"

    def encode(self, planes: np.ndarray) -> StoredObs:
        arr = np.asarray(planes, dtype=np.float32)
        return StoredObs(kind="raw", data=arr.copy(), shape=arr.shape)

    def decode(self, stored: StoredObs) -> np.ndarray:
        if stored.kind != "raw":
            raise ValueError(f"raw codec cannot decode kind {stored.kind!r}")
        return stored.data.astype(np.float64)

    def payload_nbytes(self, stored: StoredObs) -> int:
        return stored.data.nbytes


class PQCodec:
    """Product-quantization codec over pixel-major observation vectors.

    Each pixel (one group of `channels` values) is quantized to a single byte:
    the index of its nearest codebook centroid for that group.
    """

    kind = "pq"

    def __init__(self):
        self.codebook: PQCodebook | None = None
        self.training_errors: np.ndarray | None = None

    @property
    def trained(self) -> bool:
        return self.codebook is not None

    def train(self, frames: np.ndarray, k: int = 256, iters: int = 20, seed: int = 0) -> None:
        """Fit per-pixel codebooks on (N, C, H, W) frames."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) frames, got shape {frames.shape}")
        n, c, h, w = frames.shape
        vectors = np.stack([planes_to_pixel_vector(f) for f in frames])
        self.codebook, self.training_errors = pq_train(vectors, groups=h * w, k=k, seed=seed, iters=iters)
        self._shape = (c, h, w)

    def encode(self, planes: np.ndarray) -> StoredObs:
        if not self.trained:
            raise RuntimeError("PQ codec used before training a codebook")
        codes = pq_encode(self.codebook, planes_to_pixel_vector(planes))
        return StoredObs(kind="pq", data=codes, shape=tuple(np.asarray(planes).shape))

    def decode(self, stored: StoredObs) -> np.ndarray:
        if stored.kind != "pq":
            raise ValueError(f"pq codec cannot decode kind {stored.kind!r}")
        vec = pq_decode(self.codebook, stored.data)
        return pixel_vector_to_planes(vec, stored.shape)

    def payload_nbytes(self, stored: StoredObs) -> int:
        return stored.data.nbytes


# ---------------------------------------------------------------------------
# Product quantization (hand-rolled k-means per group)
# ---------------------------------------------------------------------------


@dataclass
class PQCodebook:
    centroids: np.ndarray  # (groups, k, dims_per_group)

    @property
    def groups(self) -> int:
        return self.centroids.shape[0]

    @property
    def k(self) -> int:
        return self.centroids.shape[1]

    @property
    def dims_per_group(self) -> int:
        return self.centroids.shape[2]


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance weighting."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining mass on existing centroids
            centers[i] = points[rng.integers(n)]
            continue
        centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids (k, d), errors (iters,)): errors[i] is the mean squared
    distance under the assignment computed at iteration i, a non-increasing
    sequence. Empty clusters are reseeded to the point farthest from its
    assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    centers = _kmeans_pp_init(points, k, rng)
    errors = np.empty(iters)
    x2 = np.einsum("nd,nd->n", points, points)
    for it in range(iters):
        # |x - c|^2 expanded through a matmul; clamp the tiny negatives
        # floating-point cancellation can produce for coincident points
        c2 = np.einsum("kd,kd->k", centers, centers)
        d2 = np.maximum(x2[:, None] + c2[None, :] - 2.0 * (points @ centers.T), 0.0)
        assign = np.argmin(d2, axis=1)
        point_err = d2[np.arange(n), assign]
        errors[it] = point_err.mean()
        counts = np.bincount(assign, minlength=k)
        sums = np.empty((k, d))
        for j in range(d):
            sums[:, j] = np.bincount(assign, weights=points[:, j], minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        centers[~nonempty] = points[np.argmax(point_err)]
    return centers, errors


def pq_train(vectors: np.ndarray, groups: int, k: int = 256, seed: int = 0, iters: int = 20):
    """Train per-group codebooks on (N, D) vectors; D must divide into `groups`.

    Returns (PQCodebook, errors (iters,)) where errors sums the per-group
    k-means error curves (non-increasing).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"expected (N, D) vectors, got shape {vectors.shape}")
    n, d = vectors.shape
    if d % groups != 0:
        raise ValueError(f"dimension {d} not divisible into {groups} groups")
    if k > 256:
        raise ValueError(f"k={k} does not fit one-byte codes")
    if n < k:
        raise ValueError(f"need at least k={k} training vectors, got {n}")
    dpg = d // groups
    rng = np.random.default_rng(seed)
    centroids = np.empty((groups, k, dpg))
    errors = np.zeros(iters)
    for g in range(groups):
        sl = vectors[:, g * dpg : (g + 1) * dpg]
        centroids[g], errs = kmeans(sl, k, iters, rng)
        errors += errs
    return PQCodebook(centroids=centroids), errors


def pq_encode(codebook: PQCodebook, vectors: np.ndarray) -> np.ndarray:
    """Map each group slice to its nearest centroid index (uint8 codes)."""
    vecs = np.asarray(vectors, dtype=np.float64)
    single = vecs.ndim == 1
    if single:
        vecs = vecs[None, :]
    g, k, dpg = codebook.centroids.shape
    if vecs.shape[1] != g * dpg:
        raise ValueError(f"expected dimension {g * dpg}, got {vecs.shape[1]}")
    grouped = vecs.reshape(vecs.shape[0], g, dpg)
    # (N, G, k) squared distances to each centroid
    d2 = np.sum((grouped[:, :, None, :] - codebook.centroids[None, :, :, :]) ** 2, axis=3)
    codes = np.argmin(d2, axis=2).astype(np.uint8)
    return codes[0] if single else codes


def pq_decode(codebook: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Concatenate the centroids named by each group's code."""
    codes = np.asarray(codes)
    single = codes.ndim == 1
    if single:
        codes = codes[None, :]
    g = codebook.groups
    if codes.shape[1] != g:
        raise ValueError(f"expected {g} codes per vector, got {codes.shape[1]}")
    out = codebook.centroids[np.arange(g)[None, :], codes.astype(np.int64)]
    out = out.reshape(codes.shape[0], -1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Wake buffer
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    tid: int
    traj_id: int
    task_id: str
    obs: StoredObs
    action: np.ndarray  # (3,) int
    behavior_logits: tuple  # ((3,), (16,), (16,)) logits of the acting policy
    reward: float
    done: bool
    behavior_value: float = 0.0  # acting policy's value estimate at collection time
    extras: dict = field(default_factory=dict)  # named feature vectors beyond the planes
    priority: float = 1.0


@dataclass
class TrajRecord:
    task_id: str
    tids: list
    bootstrap: StoredObs | None = None  # observation after the final stored step
    terminal: bool = False
    open: bool = True


@dataclass
class Segment:
    """A contiguous slice of one trajectory plus its tail bootstrap."""

    traj_id: int
    task_id: str
    transitions: list
    bootstrap: StoredObs | None  # None only when terminal
    terminal: bool


class WakeBuffer:
    """Bounded FIFO of transitions grouped into trajectories."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: OrderedDict[int, Transition] = OrderedDict()
        self._trajs: dict[int, TrajRecord] = {}
        self._next_tid = 0
        self._next_traj = 0

    def __len__(self) -> int:
        return len(self._items)

    def begin_trajectory(self, task_id: str) -> int:
        traj_id = self._next_traj
        self._next_traj += 1
        self._trajs[traj_id] = TrajRecord(task_id=task_id, tids=[])
        return traj_id

    def push(
        self,
        traj_id: int,
        obs: StoredObs,
        action,
        behavior_logits,
        reward: float,
        done: bool,
        behavior_value: float = 0.0,
        extras: dict | None = None,
        priority: float = 1.0,
    ) -> int:
        rec = self._trajs.get(traj_id)
        if rec is None:
            raise KeyError(f"unknown trajectory {traj_id}")
        if not rec.open:
            raise ValueError(f"trajectory {traj_id} already ended")
        tid = self._next_tid
        self._next_tid += 1
        self._items[tid] = Transition(
            tid=tid,
            traj_id=traj_id,
            task_id=rec.task_id,
            obs=obs,
            action=np.asarray(action, dtype=np.int64),
            behavior_logits=tuple(np.asarray(l, dtype=np.float64) for l in behavior_logits),
            reward=float(reward),
            done=bool(done),
            behavior_value=float(behavior_value),
            extras=dict(extras or {}),
            priority=float(priority),
        )
        rec.tids.append(tid)
        while len(self._items) > self.capacity:
            self._evict_oldest()
        return tid

    def end_trajectory(self, traj_id: int, bootstrap: StoredObs | None, terminal: bool) -> None:
        rec = self._trajs.get(traj_id)
        if rec is None:
            raise KeyError(f"unknown trajectory {traj_id}")
        if not rec.open:
            raise ValueError(f"trajectory {traj_id} already ended")
        if terminal and bootstrap is not None:
            raise ValueError("terminal trajectories take no bootstrap observation")
        if not terminal and bootstrap is None:
            raise ValueError("truncated trajectories need a bootstrap observation")
        rec.bootstrap = bootstrap
        rec.terminal = terminal
        rec.open = False
        if not rec.tids:  # fully evicted while running: nothing left to keep
            del self._trajs[traj_id]

    def _evict_oldest(self) -> None:
        tid, item = self._items.popitem(last=False)
        rec = self._trajs[item.traj_id]
        rec.tids.remove(tid)  # always the head: eviction is oldest-first
        if not rec.tids and not rec.open:
            del self._trajs[item.traj_id]

    # -- access ------------------------------------------------------------

    def transitions(self) -> list:
        return list(self._items.values())

    def get(self, tid: int) -> Transition:
        return self._items[tid]

    def update_priority(self, tid: int, priority: float) -> None:
        self._items[tid].priority = float(priority)

    def trajectory_ids(self) -> list:
        return [t for t, rec in self._trajs.items() if rec.tids]

    def sample_uniform(self, n: int, rng: np.random.Generator) -> list:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} from buffer of size {len(self._items)}")
        tids = list(self._items.keys())
        idx = rng.choice(len(tids), size=n, replace=False)
        return [self._items[tids[i]] for i in idx]

    def sample_prioritized(self, n: int, sampler: "PrioritySampler", rng: np.random.Generator) -> list:
        items = list(self._items.values())
        priorities = np.array([t.priority for t in items])
        idx = sampler.sample(priorities, n, rng)
        return [items[i] for i in idx]

    def sample_segments(
        self,
        n: int,
        unroll: int,
        rng: np.random.Generator,
        open_bootstrap: dict | None = None,
    ) -> list:
        """Draw n random contiguous segments of at most `unroll` steps.

        Trajectories are sampled uniformly (with replacement only when fewer
        than n exist). A segment ending before its trajectory's tail bootstraps
        on the next stored observation; a segment at the tail of an open
        trajectory needs the caller to supply that trajectory's current
        observation via `open_bootstrap`.
        """
        if unroll < 1:
            raise ValueError("unroll must be positive")
        ids = self.trajectory_ids()
        if not ids:
            raise ValueError("no trajectories to sample")
        open_bootstrap = open_bootstrap or {}
        chosen = rng.choice(len(ids), size=n, replace=len(ids) < n)
        segments = []
        for ci in chosen:
            traj_id = ids[ci]
            rec = self._trajs[traj_id]
            t_len = len(rec.tids)
            start = int(rng.integers(max(1, t_len - unroll + 1)))
            stop = min(start + unroll, t_len)
            trans = [self._items[t] for t in rec.tids[start:stop]]
            if stop < t_len:
                bootstrap, terminal = self._items[rec.tids[stop]].obs, False
            elif rec.open:
                if traj_id not in open_bootstrap:
                    raise ValueError(
                        f"open trajectory {traj_id} sampled at its tail without a current observation"
                    )
                bootstrap, terminal = open_bootstrap[traj_id], False
            else:
                bootstrap, terminal = rec.bootstrap, rec.terminal
            segments.append(
                Segment(
                    traj_id=traj_id,
                    task_id=rec.task_id,
                    transitions=trans,
                    bootstrap=bootstrap,
                    terminal=terminal,
                )
            )
        return segments


# ---------------------------------------------------------------------------
# Random-replay exemplars
# ---------------------------------------------------------------------------


@dataclass
class ReplayEntry:
    source_tid: int
    task_id: str
    planes: np.ndarray  # original observation space
    action: np.ndarray
    behavior_logits: tuple  # distillation targets recorded at collection time
    behavior_value: float = 0.0
    extras: dict = field(default_factory=dict)


class RandomReplayBuffer:
    """Persistent exemplar store; never evicts, errors past its capacity."""

    INTAKE = 96

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._entries: list[ReplayEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list:
        return list(self._entries)

    def add_from_wake(
        self,
        wake: WakeBuffer,
        decode_fn,
        rng: np.random.Generator,
        n: int = INTAKE,
    ) -> int:
        """Copy n uniformly chosen wake transitions in as exemplars."""
        take = min(n, len(wake))
        if len(self._entries) + take > self.capacity:
            raise ValueError(
                f"replay buffer at {len(self._entries)}/{self.capacity} cannot take {take} more"
            )
        for t in wake.sample_uniform(take, rng):
            self._entries.append(
                ReplayEntry(
                    source_tid=t.tid,
                    task_id=t.task_id,
                    planes=decode_fn(t.obs),
                    action=t.action.copy(),
                    behavior_logits=tuple(l.copy() for l in t.behavior_logits),
                    behavior_value=t.behavior_value,
                    extras={k: np.array(v) for k, v in t.extras.items()},
                )
            )
        return take

    def sample(self, n: int, rng: np.random.Generator) -> list:
        take = min(n, len(self._entries))
        idx = rng.choice(len(self._entries), size=take, replace=False)
        return [self._entries[i] for i in idx]


# ---------------------------------------------------------------------------
# Priority-aware sampling
# ---------------------------------------------------------------------------


@dataclass
class PrioritySampler:
    alpha: float = 0.6
    uniform_mix: float = 0.1

    def probabilities(self, priorities: np.ndarray) -> np.ndarray:
        p = np.asarray(priorities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("priorities must be a non-empty vector")
        if (p < 0).any():
            raise ValueError("priorities must be nonnegative")
        powered = p**self.alpha
        total = powered.sum()
        shaped = powered / total if total > 0 else np.full(p.size, 1.0 / p.size)
        return (1.0 - self.uniform_mix) * shaped + self.uniform_mix / p.size

    def sample(self, priorities: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n distinct indices sequentially, renormalizing after each draw."""
        probs = self.probabilities(priorities)
        if n > probs.size:
            raise ValueError(f"cannot draw {n} from {probs.size} entries")
        out = np.empty(n, dtype=np.int64)
        remaining = probs.copy()
        for i in range(n):
            total = remaining.sum()
            if total <= 0:
                pool = np.flatnonzero(~np.isin(np.arange(probs.size), out[:i]))
                out[i] = rng.choice(pool)
                continue
            out[i] = rng.choice(probs.size, p=remaining / total)
            remaining[out[i]] = 0.0
        return out


# ---------------------------------------------------------------------------
# Snapshot serialization (post-hoc inspection)
# ---------------------------------------------------------------------------

_KIND_CODES = {"raw": 0, "pq": 1}
_ENTRY_HEADER = struct.Struct(f"<QQ{TASK_FIELD_BYTES}sfB3BI")
ENTRY_METADATA_NBYTES = _ENTRY_HEADER.size


def serialize_entry(t: Transition) -> bytes:
    """Fixed-size metadata followed by the observation payload bytes."""
    task = t.task_id.encode("utf-8")
    if len(task) > TASK_FIELD_BYTES:
        raise ValueError(f"task id {t.task_id!r} exceeds {TASK_FIELD_BYTES} bytes")
    payload = np.ascontiguousarray(t.obs.data).tobytes()
    header = _ENTRY_HEADER.pack(
        t.tid,
        t.traj_id,
        task.ljust(TASK_FIELD_BYTES, b"\x00"),
        t.reward,
        int(t.done),
        *(int(a) for a in t.action),
        len(payload),
    )
    return header + payload


def save_snapshot(path, buffer: WakeBuffer, kind: str) -> None:
    if kind not in _KIND_CODES:
        raise ValueError(f"unknown storage kind {kind!r}")
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<IB", len(buffer), _KIND_CODES[kind]))
        for t in buffer.transitions():
            f.write(serialize_entry(t))


def load_snapshot(path) -> dict:
    """Read a snapshot back as {kind, entries: [...]} for inspection."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ValueError("bad snapshot magic")
    off = len(SNAPSHOT_MAGIC)
    count, kind_code = struct.unpack_from("<IB", blob, off)
    off += struct.calcsize("<IB")
    kind = {v: k for k, v in _KIND_CODES.items()}[kind_code]
    entries = []
    for _ in range(count):
        tid, traj_id, task, reward, done, a0, a1, a2, plen = _ENTRY_HEADER.unpack_from(blob, off)
        off += ENTRY_METADATA_NBYTES
        payload = blob[off : off + plen]
        off += plen
        entries.append(
            {
                "tid": tid,
                "traj_id": traj_id,
                "task_id": task.rstrip(b"\x00").decode("utf-8"),
                "reward": reward,
                "done": bool(done),
                "action": (a0, a1, a2),
                "payload_nbytes": plen,
                "payload": payload,
            }
        )
    if off != len(blob):
        raise ValueError("trailing bytes in snapshot")
    return {"kind": kind, "entries": entries}


def compression_summary(buffer: WakeBuffer, codec) -> dict:
    """Sizes and the measured compression ratio vs 32-bit raw storage."""
    items = buffer.transitions()
    payload = sum(codec.payload_nbytes(t.obs) for t in items)
    raw = RAW_PIXEL_BYTES * len(items)
    return {
        "entries": len(items),
        "payload_bytes": payload,
        "metadata_bytes": ENTRY_METADATA_NBYTES * len(items),
        "raw_bytes_32bit": raw,
        "ratio_vs_raw32": (raw / payload) if payload else float("nan"),
    }
