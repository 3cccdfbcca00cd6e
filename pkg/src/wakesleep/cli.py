"""Command-line entry points: run, ste, report, inspect."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import buffers, reporting
from .config import ConfigError, load_config
from .lifetime import run_lifetime, run_ste


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run = run_lifetime(cfg)
    n_sleeps = sum(1 for e in run.events if e["kind"] == "sleep")
    print(f"run complete: {cfg.out_dir} ({len(run.schedule)} blocks, {n_sleeps} sleep events)")
    return 0


def _cmd_ste(args) -> int:
    entry = run_ste(
        args.task,
        steps=args.steps,
        seed=args.seed,
        workers=args.workers,
        out_dir=args.out,
        dump_frames=args.dump_frames,
    )
    path = Path(args.out) / f"ste_{args.task}.json"
    print(f"expert baseline written: {path} (terminal reward {entry['terminal']:.3f})")
    return 0


def _cmd_report(args) -> int:
    written = reporting.report(args.run_dir)
    for name, path in sorted(written.items()):
        print(f"{name}: {path}")
    if "notice" in written:
        print(Path(written["notice"]).read_text(encoding="utf-8").strip(), file=sys.stderr)
    return 0


def _inspect_buffers(run_dir: Path) -> None:
    path = run_dir / "wake_buffer.bin"
    if not path.exists():
        print("no wake_buffer.bin in run directory")
        return
    snap = buffers.load_snapshot(path)
    entries = snap["entries"]
    payload = sum(e["payload_nbytes"] for e in entries)
    meta = buffers.ENTRY_METADATA_NBYTES * len(entries)
    raw = buffers.RAW_PIXEL_BYTES * len(entries)
    print(f"wake buffer: {len(entries)} entries, storage kind {snap['kind']!r}")
    print(f"  payload bytes:  {payload}")
    print(f"  metadata bytes: {meta} ({buffers.ENTRY_METADATA_NBYTES}/entry)")
    if payload:
        print(f"  vs 32-bit raw:  {raw} ({raw / payload:.1f}x payload compression)")
    if entries:
        tasks = sorted({e["task_id"] for e in entries})
        print(f"  tasks: {', '.join(tasks)}")


def _inspect_stam(run_dir: Path) -> None:
    path = run_dir / "stam_ltm.npz"
    if not path.exists():
        print("no stam_ltm.npz in run directory (patch clustering was off)")
        return
    with np.load(path) as z:
        centroids, objects = z["centroids"], z["objects"]
    print(f"patch long-term memory: {centroids.shape[0]} centroids, dim {centroids.shape[1]}")
    uniq = np.unique(objects[objects >= 0])
    print(f"  object ids: {len(uniq)} distinct ({uniq.tolist()})")


def _cmd_inspect(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no such run directory: {run_dir}")
    which = [args.buffers, args.stam]
    if args.buffers or not any(which):
        _inspect_buffers(run_dir)
    if args.stam or not any(which):
        _inspect_stam(run_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wakesleep", description="wake-sleep lifelong RL runner")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a lifetime from a config file")
    run_p.add_argument("config", help="path to the run config")
    run_p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    run_p.set_defaults(fn=_cmd_run)

    ste_p = sub.add_parser("ste", help="train a single-task expert baseline")
    ste_p.add_argument("task")
    ste_p.add_argument("--steps", type=int, default=200_000)
    ste_p.add_argument("--seed", type=int, default=0)
    ste_p.add_argument("--workers", type=int, default=8)
    ste_p.add_argument("--out", default="ste")
    ste_p.add_argument("--dump-frames", type=int, default=0, help="also save N raw frames")
    ste_p.set_defaults(fn=_cmd_ste)

    rep_p = sub.add_parser("report", help="write metrics, curves, and the SVG for a run")
    rep_p.add_argument("run_dir")
    rep_p.set_defaults(fn=_cmd_report)

    ins_p = sub.add_parser("inspect", help="summarize stored artifacts of a run")
    ins_p.add_argument("run_dir")
    ins_p.add_argument("--buffers", action="store_true", help="only the replay snapshot")
    ins_p.add_argument("--stam", action="store_true", help="only the patch memory")
    ins_p.set_defaults(fn=_cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
