"""Lifelong-learning metrics over evaluation-block histories.

All metrics operate on a normalized performance matrix P[e][t]: the mean
evaluation-block reward of task t at block e, as a percentage of the terminal
reward of a single-task expert trained to convergence on t (so "comparable to
the expert" reads as ~100).

* Performance maintenance (PM): mean change on a task after its training
  finished — negative values mean forgetting.
* Forward transfer ratio (FTR): performance just before a task's first
  training block relative to the very first evaluation, for tasks that were
  not trained first — above 1 means other tasks primed this one.
* Backward transfer ratio (BTR): performance after later training of *other*
  tasks relative to the reference right after the task's own training —
  above 1 means later learning helped earlier tasks.
* Relative performance (RP): area under the lifelong learner's training
  curve relative to the expert's over the same number of environment steps.
* Relative reward (RR): raw P/100 averaged over the final block (omega),
  over already-trained task/block pairs (sigma), and over not-yet-trained
  pairs (upsilon).

Ratios floor both numerator and denominator at epsilon = 1 (one percent of
expert performance) so near-zero denominators cannot explode; this matters
for weak baselines and is part of the declared metric definition. Metrics
whose pair set is empty are reported as None (absent), never as 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

RATIO_FLOOR = 1.0  # percent-scale floor for FTR/BTR ratios


@dataclass(frozen=True)
class Block:
    kind: str  # "EB" (evaluation) or "LB" (learning)
    task_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("EB", "LB"):
            raise ValueError(f"block kind must be 'EB' or 'LB', got {self.kind!r}")
        if self.kind == "LB" and not self.task_id:
            raise ValueError("learning blocks need a task_id")


@dataclass
class RunLog:
    """One lifetime: the block schedule with its measured rewards."""

    tasks: list  # column order of eb_matrix
    schedule: list  # interleaved Block sequence
    eb_matrix: np.ndarray  # (num EBs, num tasks) raw mean episode rewards
    lb_curves: list = field(default_factory=list)  # per LB: (task_id, [(step, reward)])
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.eb_matrix = np.asarray(self.eb_matrix, dtype=np.float64)
        n_eb = sum(1 for b in self.schedule if b.kind == "EB")
        lb_tasks = [b.task_id for b in self.schedule if b.kind == "LB"]
        if self.eb_matrix.shape != (n_eb, len(self.tasks)):
            raise ValueError(
                f"eb_matrix shape {self.eb_matrix.shape} does not match "
                f"{n_eb} evaluation blocks x {len(self.tasks)} tasks"
            )
        if not np.isfinite(self.eb_matrix).all():
            raise ValueError("eb_matrix must be finite")
        if self.lb_curves and [t for t, _ in self.lb_curves] != lb_tasks:
            raise ValueError("lb_curves tasks must match the schedule's LB order")


@dataclass
class STEBaselines:
    """Single-task expert reference: terminal rewards and learning curves."""

    terminal: dict  # task_id -> terminal reward (mean of final 10% of curve)
    curves: dict = field(default_factory=dict)  # task_id -> [(step, reward)]


def terminal_from_curve(curve) -> float:
    """Mean reward of the final 10% (by episode count) of a learning curve."""
    rewards = [r for _, r in curve]
    if not rewards:
        raise ValueError("empty learning curve")
    tail = max(1, int(np.ceil(0.1 * len(rewards))))
    return float(np.mean(rewards[-tail:]))


def normalize(run: RunLog, ste: STEBaselines) -> np.ndarray:
    """P[e][t] = 100 * reward / expert terminal reward."""
    scale = np.empty(len(run.tasks))
    for j, task in enumerate(run.tasks):
        terminal = ste.terminal.get(task)
        if terminal is None or terminal <= 0:
            raise ValueError(f"task {task!r} needs a positive expert terminal reward, got {terminal}")
        scale[j] = terminal
    return 100.0 * run.eb_matrix / scale


def _eb_rows(schedule) -> list:
    """Block positions of evaluation blocks, in row order of eb_matrix."""
    return [i for i, b in enumerate(schedule) if b.kind == "EB"]


def _lb_positions(schedule, task_id) -> list:
    return [i for i, b in enumerate(schedule) if b.kind == "LB" and b.task_id == task_id]


def _reference_row(schedule, task_id) -> Optional[int]:
    """Row of the evaluation block immediately after the task's last LB."""
    lbs = _lb_positions(schedule, task_id)
    if not lbs:
        return None
    rows = _eb_rows(schedule)
    for row, pos in enumerate(rows):
        if pos > lbs[-1]:
            return row
    return None


def compute_pm(P, schedule, tasks) -> Optional[float]:
    """Mean post-training performance change; < 0 indicates forgetting."""
    diffs = []
    for j, task in enumerate(tasks):
        ref = _reference_row(schedule, task)
        if ref is None:
            continue
        diffs.extend(P[e][j] - P[ref][j] for e in range(ref + 1, P.shape[0]))
    return float(np.mean(diffs)) if diffs else None


def compute_ftr(P, schedule, tasks, eps: float = RATIO_FLOOR) -> Optional[float]:
    """Mean pre-training/first-evaluation ratio over tasks not trained first."""
    ratios = _ftr_per_task(P, schedule, tasks, eps)
    return float(np.mean(list(ratios.values()))) if ratios else None


def _ftr_per_task(P, schedule, tasks, eps: float = RATIO_FLOOR) -> dict:
    first_lb = min(
        (i for i, b in enumerate(schedule) if b.kind == "LB"), default=None
    )
    rows = _eb_rows(schedule)
    ratios = {}
    for j, task in enumerate(tasks):
        lbs = _lb_positions(schedule, task)
        if not lbs or lbs[0] == first_lb:
            continue  # never trained, or trained first: no forward transfer
        pre = max((row for row, pos in enumerate(rows) if pos < lbs[0]), default=None)
        if pre is None:
            continue
        ratios[task] = max(P[pre][j], eps) / max(P[0][j], eps)
    return ratios


def compute_btr(P, schedule, tasks, eps: float = RATIO_FLOOR) -> Optional[float]:
    """Mean performance ratio after interleaved training of other tasks."""
    per_task = _btr_per_task(P, schedule, tasks, eps)
    ratios = [r for rs in per_task.values() for r in rs]
    return float(np.mean(ratios)) if ratios else None


def _btr_per_task(P, schedule, tasks, eps: float = RATIO_FLOOR) -> dict:
    rows = _eb_rows(schedule)
    per_task: dict = {}
    for j, task in enumerate(tasks):
        ref = _reference_row(schedule, task)
        if ref is None:
            continue
        for e in range(ref + 1, P.shape[0]):
            between = schedule[rows[ref] + 1 : rows[e]]
            if any(b.kind == "LB" and b.task_id != task for b in between):
                per_task.setdefault(task, []).append(
                    max(P[e][j], eps) / max(P[ref][j], eps)
                )
    return per_task


def compute_rr(P, schedule, tasks) -> tuple:
    """(omega, sigma, upsilon) relative rewards on the 0-1 ratio scale.

    omega averages the final evaluation block over all tasks; sigma averages
    task/block pairs where the task was already trained; upsilon averages
    pairs where the task is in the syllabus but not yet trained. Tasks never
    trained in this lifetime contribute to neither sigma nor upsilon.
    """
    rows = _eb_rows(schedule)
    omega = float(np.mean(P[-1])) / 100.0 if P.shape[0] else None
    seen, unseen = [], []
    for j, task in enumerate(tasks):
        lbs = _lb_positions(schedule, task)
        if not lbs:
            continue
        for e, pos in enumerate(rows):
            if any(lb < pos for lb in lbs):
                seen.append(P[e][j])
            else:
                unseen.append(P[e][j])
    sigma = float(np.mean(seen)) / 100.0 if seen else None
    upsilon = float(np.mean(unseen)) / 100.0 if unseen else None
    return omega, sigma, upsilon


def floored_auc(curve, t_end: float) -> float:
    """Trapezoidal area of a reward curve on [0, t_end], rewards floored at 0.

    The curve holds its first value back to step 0 when it starts later, and
    is linearly interpolated at t_end when it extends past it.
    """
    pts = sorted((float(s), max(0.0, float(r))) for s, r in curve)
    if not pts:
        raise ValueError("empty learning curve")
    if pts[0][0] > 0.0:
        pts.insert(0, (0.0, pts[0][1]))
    steps = np.array([s for s, _ in pts])
    rewards = np.array([r for _, r in pts])
    if t_end <= 0 or t_end > steps[-1]:
        raise ValueError(f"t_end must lie in (0, {steps[-1]}], got {t_end}")
    clipped = steps <= t_end
    xs, ys = steps[clipped], rewards[clipped]
    if xs[-1] < t_end:
        boundary = np.interp(t_end, steps, rewards)
        xs, ys = np.append(xs, t_end), np.append(ys, boundary)
    return float(np.trapezoid(ys, xs))


def concatenate_lb_curves(lb_curves, task_id) -> list:
    """Join a task's per-LB curves into one curve on a shared step axis."""
    joined, offset = [], 0.0
    for task, curve in lb_curves:
        if task != task_id or not curve:
            continue
        joined.extend((offset + float(s), float(r)) for s, r in curve)
        offset = joined[-1][0]
    return joined


def compute_rp(run: RunLog, ste: STEBaselines) -> tuple:
    """(mean relative AUC, per-task dict) of agent vs expert learning curves."""
    per_task = {}
    for task in run.tasks:
        agent = concatenate_lb_curves(run.lb_curves, task)
        expert = ste.curves.get(task, [])
        if not agent or not expert:
            continue
        t_end = min(agent[-1][0], max(s for s, _ in expert))
        if t_end <= 0:
            continue
        denom = floored_auc(expert, t_end)
        if denom <= 0:
            raise ValueError(f"expert curve for {task!r} has nonpositive area")
        per_task[task] = floored_auc(agent, t_end) / denom
    mean = float(np.mean(list(per_task.values()))) if per_task else None
    return mean, per_task


@dataclass
class MetricsReport:
    pm: Optional[float]
    ftr: Optional[float]
    btr: Optional[float]
    rp: Optional[float]
    rr_omega: Optional[float]
    rr_sigma: Optional[float]
    rr_upsilon: Optional[float]
    per_task: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(**payload)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def compute_report(run: RunLog, ste: STEBaselines) -> MetricsReport:
    """All metrics for one lifetime."""
    P = normalize(run, ste)
    rp_mean, rp_tasks = compute_rp(run, ste)
    omega, sigma, upsilon = compute_rr(P, run.schedule, run.tasks)
    per_task: dict = {}
    ftr_tasks = _ftr_per_task(P, run.schedule, run.tasks)
    btr_tasks = _btr_per_task(P, run.schedule, run.tasks)
    for j, task in enumerate(run.tasks):
        entry: dict = {}
        ref = _reference_row(run.schedule, task)
        if ref is not None and ref + 1 < P.shape[0]:
            entry["pm"] = float(np.mean(P[ref + 1 :, j] - P[ref, j]))
        if task in ftr_tasks:
            entry["ftr"] = float(ftr_tasks[task])
        if task in btr_tasks:
            entry["btr"] = float(np.mean(btr_tasks[task]))
        if task in rp_tasks:
            entry["rp"] = float(rp_tasks[task])
        per_task[task] = entry
    return MetricsReport(
        pm=compute_pm(P, run.schedule, run.tasks),
        ftr=compute_ftr(P, run.schedule, run.tasks),
        btr=compute_btr(P, run.schedule, run.tasks),
        rp=rp_mean,
        rr_omega=omega,
        rr_sigma=sigma,
        rr_upsilon=upsilon,
        per_task=per_task,
    )


def confidence_interval(values, level: float = 0.95) -> tuple:
    """(mean, halfwidth) of the t-distribution confidence interval."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("confidence interval needs at least one value")
    mean = float(values.mean())
    if values.size == 1:
        return mean, float("nan")
    sem = values.std(ddof=1) / np.sqrt(values.size)
    return mean, float(stats.t.ppf(0.5 + level / 2, values.size - 1) * sem)


def aggregate_reports(reports) -> dict:
    """Cross-lifetime mean and t-interval halfwidth per metric."""
    out = {}
    for name in ("pm", "ftr", "btr", "rp", "rr_omega", "rr_sigma", "rr_upsilon"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            mean, half = confidence_interval(values)
            out[name] = {"mean": mean, "ci95": half, "lifetimes": len(values)}
    return out
