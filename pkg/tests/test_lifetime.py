"""Lifetime runner: schedule execution, sleep triggers, logging, artifacts."""
import json
from pathlib import Path

import numpy as np
import pytest

from wakesleep import buffers, metrics, runlog
from wakesleep.config import loads_config
from wakesleep.lifetime import load_ste_baselines, run_lifetime, run_ste

TINY = """
seed: 3
workers: 4
out_dir: {out}
syllabus: {{scenario: pairwise, tasks: [collect_nofog, defeat_zb_one], lb_steps: 400, eb_episodes: 2}}
wake: {{update_every: 50}}
sleep: {{iterations: 15, batch: 16, skill_eval_episodes: 1}}
replay: {{exemplars_per_sleep: 24}}
"""


def _run(text: str, out: Path, **extra):
    cfg = loads_config(text.format(out=json.dumps(str(out))), **extra)
    run = run_lifetime(cfg)
    return cfg, run, runlog.read_log(out / "run_log.jsonl")


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "run"
    return _run(TINY, out) + (out,)


def test_log_opens_with_meta_and_covers_schedule(tiny):
    _, run, records, _ = tiny
    assert records[0]["kind"] == "meta"
    assert records[0]["tasks"] == ["collect_nofog", "defeat_zb_one"]
    kinds = {r["kind"] for r in records}
    assert {"eb", "lb_start", "lb_end", "episode", "wake_update", "sleep"} <= kinds
    assert [b.kind for b in run.schedule] == ["EB", "LB", "EB", "LB", "EB"]


def test_forced_sleeps_land_at_even_intervals(tiny):
    _, _, records, _ = tiny
    sleeps = [r for r in records if r["kind"] == "sleep"]
    assert len(sleeps) == 4  # 2 per learning block x 2 blocks
    assert all(s["trigger"] == "forced" for s in sleeps)
    assert [(s["lb"], s["step"]) for s in sleeps] == [(0, 200), (0, 400), (1, 200), (1, 400)]


def test_sleep_records_carry_protocol_and_global_replay_index(tiny):
    cfg, _, records, _ = tiny
    sleeps = [r for r in records if r["kind"] == "sleep"]
    for s in sleeps:
        assert not s["skipped"]
        assert s["iterations"] == cfg.sleep.iterations
        assert s["batch"] == cfg.sleep.batch
        assert s["exemplars_added"] == cfg.replay.exemplars_per_sleep
    # generative replay joins at the second sleep of the lifetime, counted
    # globally rather than per learning block
    assert [s["gen_replay_active"] for s in sleeps] == [False, True, True, True]
    assert [s["index"] for s in sleeps] == [1, 2, 3, 4]
    sizes = [s["replay_size"] for s in sleeps]
    assert sizes == sorted(sizes) and sizes[0] == cfg.replay.exemplars_per_sleep


def test_learning_records_stay_inside_learning_blocks(tiny):
    _, _, records, _ = tiny
    open_lb = None
    for r in records:
        if r["kind"] == "lb_start":
            open_lb = r["lb"]
        elif r["kind"] == "lb_end":
            open_lb = None
        elif r["kind"] in ("episode", "wake_update", "sleep", "skill_select", "changepoint"):
            assert open_lb is not None and r["lb"] == open_lb
        elif r["kind"] == "eb":
            assert open_lb is None


def test_eb_rows_cover_all_tasks_at_block_boundaries(tiny):
    _, run, records, _ = tiny
    ebs = [r for r in records if r["kind"] == "eb"]
    assert [e["step_global"] for e in ebs] == [0, 400, 800]
    assert run.eb_matrix.shape == (3, 2)
    for e in ebs:
        assert set(e["rewards"]) == {"collect_nofog", "defeat_zb_one"}


def test_advice_starts_only_after_first_sleep_of_lifetime(tiny):
    _, _, records, _ = tiny
    updates = [r for r in records if r["kind"] == "wake_update"]
    first_sleep_step = next(r["step"] for r in records if r["kind"] == "sleep")
    before = [u for u in updates if u["lb"] == 0 and u["step"] <= first_sleep_step]
    assert before and all(u["p_advice"] == 0.0 for u in before)
    after = [u for u in updates if u["lb"] > 0 or u["step"] > first_sleep_step]
    assert any(u["p_advice"] > 0.0 for u in after)


def test_buffer_snapshot_written_and_loadable(tiny):
    cfg, _, _, out = tiny
    snap = buffers.load_snapshot(out / "wake_buffer.bin")
    assert snap["kind"] == "raw"
    assert len(snap["entries"]) == 800  # 2 learning blocks x 400 steps
    assert {e["task_id"] for e in snap["entries"]} == {"collect_nofog", "defeat_zb_one"}


def test_wallclock_lives_in_sidecar_not_in_log(tiny):
    _, _, _, out = tiny
    with open(out / "timings.json", "r", encoding="utf-8") as f:
        timings = json.load(f)
    assert len(timings["lb_seconds"]) == 2
    assert timings["amortized_lb_seconds"] > 0
    log_text = (out / "run_log.jsonl").read_text(encoding="utf-8")
    assert "seconds" not in log_text


def test_resolved_snapshot_reproduces_config(tiny):
    cfg, _, _, out = tiny
    from wakesleep.config import load_config

    assert load_config(out / "resolved_config.yaml") == cfg


def test_same_seed_reproduces_log_bytes_and_seed_changes_them(tmp_path):
    _run(TINY, tmp_path / "a")
    _run(TINY, tmp_path / "b")
    _run(TINY, tmp_path / "c", overrides=["seed=4"])
    read = lambda p: (p / "run_log.jsonl").read_bytes()
    assert read(tmp_path / "a") == read(tmp_path / "b")
    assert read(tmp_path / "a") != read(tmp_path / "c")


def test_zero_length_learning_blocks_yield_evaluations_only(tmp_path):
    _, run, records = _run(TINY, tmp_path / "run", overrides=["syllabus.lb_steps=0"])
    kinds = {r["kind"] for r in records}
    assert kinds == {"meta", "eb", "lb_start", "lb_end"}
    assert run.eb_matrix.shape == (3, 2)
    assert run.events == []


CONDENSED = """
seed: 1
workers: 2
out_dir: {out}
syllabus: {{lb_steps: 60, eb_episodes: 1}}
wake: {{update_every: 30}}
sleep: {{iterations: 2, batch: 8, skill_eval_episodes: 1}}
replay: {{exemplars_per_sleep: 8}}
"""


def test_condensed_defaults_schedule_and_sleep_count(tmp_path):
    cfg, run, records = _run(CONDENSED, tmp_path / "run")
    assert cfg.syllabus.scenario == "condensed"
    assert len(cfg.syllabus.tasks) == 6
    lbs = [b for b in run.schedule if b.kind == "LB"]
    assert len(lbs) == 6 and len(run.schedule) == 13
    sleeps = [r for r in records if r["kind"] == "sleep"]
    assert len(sleeps) == 12 and all(s["trigger"] == "forced" for s in sleeps)


ADAPTIVE = """
seed: 5
workers: 2
out_dir: {out}
syllabus: {{scenario: pairwise, tasks: [collect_nofog, defeat_zb_one], lb_steps: 320, eb_episodes: 1}}
wake: {{update_every: 80}}
sleep: {{iterations: 8, batch: 8, skill_eval_episodes: 1}}
replay: {{exemplars_per_sleep: 8}}
components: {{adaptive_sleep: true}}
watch: {{reference_size: 60, window_size: 20, min_history: 5, kappa: 0.05, n_boot: 12,
  min_sleep_gap: 100, keep_forced: false}}
"""


def test_adaptive_sleeps_respect_min_gap_and_replace_forced(tmp_path):
    cfg, _, records = _run(ADAPTIVE, tmp_path / "run")
    changepoints = [r for r in records if r["kind"] == "changepoint"]
    sleeps = [r for r in records if r["kind"] == "sleep"]
    assert changepoints and sleeps
    assert all(s["trigger"] == "adaptive" for s in sleeps)
    assert len(changepoints) >= len(sleeps)  # min-gap suppression
    gaps = np.diff([s["step_global"] for s in sleeps])
    assert np.all(gaps >= cfg.watch.min_sleep_gap)
    for c in changepoints:
        assert c["distance"] > c["threshold"]


def test_hybrid_mode_keeps_forced_sleeps(tmp_path):
    _, _, records = _run(
        ADAPTIVE, tmp_path / "run",
        overrides=["watch.keep_forced=true", "watch.kappa=100.0"],
    )
    sleeps = [r for r in records if r["kind"] == "sleep"]
    assert [s["trigger"] for s in sleeps] == ["forced"] * 4


def test_component_failure_aborts_before_any_environment_step(tmp_path):
    with pytest.raises(RuntimeError, match="bogus"):
        _run(TINY, tmp_path / "run", overrides=["model.policy_features=[flat, bogus]"])
    records = runlog.read_log(tmp_path / "run" / "run_log.jsonl")
    assert {r["kind"] for r in records} <= {"meta", "note"}


def test_multiple_sleep_models_share_one_exemplar_intake(tmp_path):
    cfg, _, records = _run(
        TINY, tmp_path / "run",
        overrides=["sleep.eigentask_count=2", "syllabus.lb_steps=200", "sleep.iterations=8"],
    )
    selects = [r for r in records if r["kind"] == "skill_select"]
    assert selects and all(s["candidates"] == 2 for s in selects)
    assert all(s["chosen"] in (0, 1) for s in selects)
    sleeps = [r for r in records if r["kind"] == "sleep"]
    # intake happens once per sleep even with several candidate models
    assert all(s["exemplars_added"] == cfg.replay.exemplars_per_sleep for s in sleeps)
    assert sleeps[0]["replay_size"] == cfg.replay.exemplars_per_sleep


def test_disabling_replay_intake_keeps_store_empty(tmp_path):
    _, _, records = _run(
        TINY, tmp_path / "run",
        overrides=["components.random_replay=false", "syllabus.lb_steps=200", "sleep.iterations=8"],
    )
    sleeps = [r for r in records if r["kind"] == "sleep"]
    assert sleeps
    assert all(s["exemplars_added"] == 0 and s["replay_size"] == 0 for s in sleeps)


def test_reset_on_wake_still_learns_and_sleeps(tmp_path):
    _, _, records = _run(
        TINY, tmp_path / "run",
        overrides=["wake.reset_on_wake=true", "syllabus.lb_steps=200", "sleep.iterations=8"],
    )
    kinds = [r["kind"] for r in records]
    assert "wake_update" in kinds and "sleep" in kinds


DEFEAT_FIRST = """
seed: 11
workers: 2
out_dir: {out}
syllabus: {{scenario: pairwise, tasks: [defeat_zb_one, collect_nofog], lb_steps: 240, eb_episodes: 1}}
wake: {{update_every: 60}}
sleep: {{iterations: 6, batch: 8, skill_eval_episodes: 1}}
replay: {{exemplars_per_sleep: 8}}
components: {{danger: true, stam: true}}
"""


@pytest.fixture(scope="module")
def plugin_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("plugins") / "run"
    return _run(DEFEAT_FIRST, out) + (out,)


def test_danger_annotator_reports_each_training_defeat_episode(plugin_run):
    _, _, records, _ = plugin_run
    episodes = [r for r in records if r["kind"] == "episode" and r["task"] == "defeat_zb_one"]
    reports = [r for r in records if r["kind"] == "danger_episode"]
    assert len(reports) == len(episodes) > 0
    for rep in reports:
        assert rep["task_id"] == "defeat_zb_one"
        assert rep["label"] in ("win", "loss")
        assert 0.0 <= rep["mean_danger"] <= 1.0
        assert rep["states"] > 0


def test_patch_memory_artifact_written(plugin_run):
    _, _, _, out = plugin_run
    with np.load(out / "stam_ltm.npz") as z:
        centroids = z["centroids"]
    assert centroids.ndim == 2 and centroids.shape[0] > 0


def test_compressed_memory_stores_one_byte_codes(tmp_path, monkeypatch):
    import wakesleep.lifetime as lt

    monkeypatch.setattr(lt, "PQ_FRAMES_PER_HELD_OUT_TASK", 300)
    _, _, records = _run(
        TINY, tmp_path / "run",
        overrides=["components.remind=true", "syllabus.lb_steps=200", "sleep.iterations=6"],
    )
    notes = [r["text"] for r in records if r["kind"] == "note"]
    assert any("held-out" in n for n in notes)
    snap = buffers.load_snapshot(tmp_path / "run" / "wake_buffer.bin")
    assert snap["kind"] == "pq"
    assert snap["entries"]
    assert all(e["payload_nbytes"] == 256 for e in snap["entries"])


def test_codec_pretraining_falls_back_when_heldout_overlaps_syllabus(tmp_path, monkeypatch):
    import wakesleep.lifetime as lt

    monkeypatch.setattr(lt, "PQ_FRAMES_PER_HELD_OUT_TASK", 300)
    monkeypatch.setattr(lt, "PQ_FALLBACK_FRAMES", 400)
    with pytest.warns(UserWarning, match="overlap the syllabus"):
        _, _, records = _run(
            TINY, tmp_path / "run",
            overrides=[
                "components.remind=true",
                "syllabus.tasks=[collect_fog, defeat_zb_one]",
                "syllabus.lb_steps=200",
                "sleep.iterations=6",
            ],
        )
    notes = [r["text"] for r in records if r["kind"] == "note"]
    assert any("falling back" in n and "collect_fog" in n for n in notes)


def test_ste_requires_positive_budget(tmp_path):
    with pytest.raises(ValueError, match="step"):
        run_ste("collect_nofog", steps=0, out_dir=tmp_path)


def test_ste_writes_curve_terminal_and_log(tmp_path):
    entry = run_ste("defeat_zb_one", steps=1600, seed=2, workers=4, out_dir=tmp_path,
                    update_every=400)
    path = tmp_path / "ste_defeat_zb_one.json"
    with open(path, "r", encoding="utf-8") as f:
        stored = json.load(f)
    assert stored == entry
    assert stored["curve"] and all(isinstance(s, int) for s, _ in stored["curve"])
    assert stored["terminal"] == metrics.terminal_from_curve(stored["curve"])
    log = runlog.read_log(tmp_path / "ste_defeat_zb_one_log.jsonl")
    assert log[0]["kind"] == "meta" and log[0]["scenario"] == "ste"
    assert not any(r["kind"] == "sleep" for r in log)

    ste, missing = load_ste_baselines(tmp_path, ["defeat_zb_one", "collect_fog"])
    assert missing == ["collect_fog"]
    assert ste.terminal["defeat_zb_one"] == stored["terminal"]
    assert ste.curves["defeat_zb_one"] == [tuple(p) for p in stored["curve"]]
