"""Post-hoc reports for a finished run directory.

``report`` reads the run log, the resolved config, and the wall-clock timing
sidecar, then emits metrics CSV + JSON (when expert baselines are available),
one learning-curve CSV per task, an evaluation-matrix CSV, and a static SVG
of the lifetime with evaluation-block markers and one vertical tick per sleep
event. Every output is a pure function of the inputs, so reporting twice
produces identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import metrics, runlog
from .config import load_config
from .lifetime import load_ste_baselines

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    "#e377c2", "#17becf",
)

METRIC_COLUMNS = ("pm", "ftr", "btr", "rp", "rr_omega", "rr_sigma", "rr_upsilon")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _csv(rows: list) -> str:
    return "\n".join(",".join(_fmt(v) for v in row) for row in rows) + "\n"


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H = 880, 440
_ML, _MR, _MT, _MB = 60, 20, 20, 40


def _scale(lo: float, hi: float):
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - 0.05 * span, hi + 0.05 * span


def curves_svg(records: list, tasks: list) -> str:
    """Per-task episode-reward traces with EB markers and sleep ticks."""
    episodes = [r for r in records if r["kind"] == "episode"]
    ebs = [r for r in records if r["kind"] == "eb"]
    sleeps = [r for r in records if r["kind"] == "sleep"]

    xs = [r["step_global"] for r in episodes] + [r["step_global"] for r in ebs]
    xs += [r["step_global"] for r in sleeps]
    ys = [r["reward"] for r in episodes]
    for r in ebs:
        ys.extend(r["rewards"].values())
    x_lo, x_hi = _scale(0.0, float(max(xs) if xs else 1.0))
    y_lo, y_hi = _scale(float(min(ys)) if ys else 0.0, float(max(ys)) if ys else 1.0)

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def py(y: float) -> float:
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{_ML}" y="{_H - 10}" font-size="12">step {x_lo:.0f}</text>',
        f'<text x="{_W - _MR - 80}" y="{_H - 10}" font-size="12">step {x_hi:.0f}</text>',
        f'<text x="4" y="{_H - _MB}" font-size="12">{y_lo:.1f}</text>',
        f'<text x="4" y="{_MT + 10}" font-size="12">{y_hi:.1f}</text>',
    ]
    for r in ebs:
        x = px(float(r["step_global"]))
        parts.append(
            f'<line class="eb" x1="{x:.2f}" y1="{_MT}" x2="{x:.2f}" y2="{_H - _MB}" '
            f'stroke="#bbbbbb" stroke-dasharray="4 3"/>'
        )
    for r in sleeps:
        x = px(float(r["step_global"]))
        parts.append(
            f'<line class="sleep" x1="{x:.2f}" y1="{_MT}" x2="{x:.2f}" y2="{_H - _MB}" '
            f'stroke="#ff9900"/>'
        )
    for j, task in enumerate(tasks):
        color = _PALETTE[j % len(_PALETTE)]
        pts = [(float(r["step_global"]), float(r["reward"])) for r in episodes if r["task"] == task]
        if pts:
            path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{path}"/>')
        eb_pts = [(float(r["step_global"]), float(r["rewards"][task])) for r in ebs]
        for x, y in eb_pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        parts.append(
            f'<text x="{_ML + 8}" y="{_MT + 14 + 14 * j}" font-size="12" fill="{color}">{task}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def report(run_dir) -> dict:
    """Emit all report files for one run directory; returns written paths."""
    run_dir = Path(run_dir)
    records = runlog.read_log(run_dir / "run_log.jsonl")
    cfg = load_config(run_dir / "resolved_config.yaml")
    run = runlog.to_metrics_runlog(records)
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    written = {}

    timings_path = run_dir / "timings.json"
    amortized = None
    if timings_path.exists():
        with open(timings_path, "r", encoding="utf-8") as f:
            amortized = json.load(f).get("amortized_lb_seconds")

    # learning-curve CSV per task (steps cumulative across that task's LBs)
    for task in run.tasks:
        curve = metrics.concatenate_lb_curves(run.lb_curves, task)
        path = out / f"curve_{task}.csv"
        _write_text(path, _csv([("step", "reward"), *curve]))
        written[f"curve_{task}"] = path

    eb_rows = [r for r in records if r["kind"] == "eb"]
    matrix_rows = [("row", "step_global", *run.tasks)]
    for r in eb_rows:
        matrix_rows.append((r["row"], r["step_global"], *[r["rewards"][t] for t in run.tasks]))
    written["eb_matrix"] = out / "eb_matrix.csv"
    _write_text(written["eb_matrix"], _csv(matrix_rows))

    written["svg"] = out / "curves.svg"
    _write_text(written["svg"], curves_svg(records, run.tasks))

    ste, missing = load_ste_baselines(cfg.ste_dir, run.tasks)
    if missing:
        notice = (
            "metrics skipped: no expert baseline for "
            + ", ".join(missing)
            + f" under {cfg.ste_dir!r}; run `wakesleep ste <task>` first. "
            "Curve and evaluation-matrix files were still emitted.\n"
        )
        written["notice"] = out / "NOTICE.txt"
        _write_text(written["notice"], notice)
        (out / "metrics.json").unlink(missing_ok=True)
        (out / "metrics.csv").unlink(missing_ok=True)
        return written
    (out / "NOTICE.txt").unlink(missing_ok=True)

    rep = metrics.compute_report(run, ste)
    payload = dict(rep.to_dict(), amortized_lb_seconds=amortized)
    written["metrics_json"] = out / "metrics.json"
    _write_text(written["metrics_json"], json.dumps(payload, indent=2, sort_keys=True) + "\n")

    header = (*METRIC_COLUMNS, "amortized_lb_seconds")
    values = [getattr(rep, c) for c in METRIC_COLUMNS] + [amortized]
    written["metrics_csv"] = out / "metrics.csv"
    _write_text(written["metrics_csv"], _csv([header, values]))
    return written
