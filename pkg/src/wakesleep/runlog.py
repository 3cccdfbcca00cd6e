"""Deterministic JSON-lines run log.

One record per event, each with a ``kind`` field. Records carry no wall-clock
timestamps so that two runs of the same resolved config and seed produce
byte-identical logs; wall-clock phase timings live in a separate file next to
the log. The first record is always ``meta`` and fixes the task list and the
block schedule, which lets the log alone reconstruct a
:class:`wakesleep.metrics.RunLog`.
"""
from __future__ import annotations

import json

import numpy as np

from . import metrics

KINDS = (
    "meta",
    "note",
    "eb",
    "lb_start",
    "lb_end",
    "episode",
    "wake_update",
    "sleep",
    "skill_select",
    "changepoint",
    "danger_episode",
)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def encode_record(kind: str, payload: dict) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown record kind {kind!r}")
    if "kind" in payload:
        raise ValueError("payload may not carry its own 'kind' field")
    record = {"kind": kind, **_jsonable(payload)}
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class RunLogWriter:
    """Single serialization point for run events; append-only JSON lines."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "w", encoding="utf-8")

    def write(self, kind: str, **payload) -> None:
        self._f.write(encode_record(kind, payload) + "\n")

    def close(self) -> None:
        if not self._f.closed:
            self._f.close()

    def __enter__(self) -> "RunLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_log(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad record: {exc}") from exc
            if "kind" not in record:
                raise ValueError(f"{path}:{line_no}: record lacks a 'kind' field")
            records.append(record)
    return records


def to_metrics_runlog(records: list) -> metrics.RunLog:
    """Rebuild the lifetime's evaluation matrix and curves from its log."""
    if not records or records[0].get("kind") != "meta":
        raise ValueError("run log must start with a meta record")
    meta = records[0]
    tasks = list(meta["tasks"])
    schedule = [
        metrics.Block(kind=b["type"], task_id=b.get("task")) for b in meta["blocks"]
    ]
    eb_rows = [r for r in records if r["kind"] == "eb"]
    matrix = np.array(
        [[row["rewards"][t] for t in tasks] for row in eb_rows], dtype=np.float64
    ).reshape(len(eb_rows), len(tasks))
    lb_indices = [i for i, b in enumerate(schedule) if b.kind == "LB"]
    curves: list = [(schedule[i].task_id, []) for i in lb_indices]
    for r in records:
        if r["kind"] == "episode":
            curves[r["lb"]][1].append((float(r["step"]), float(r["reward"])))
    events = [r for r in records if r["kind"] in ("sleep", "changepoint")]
    return metrics.RunLog(
        tasks=tasks,
        schedule=schedule,
        eb_matrix=matrix,
        lb_curves=curves,
        events=events,
    )
