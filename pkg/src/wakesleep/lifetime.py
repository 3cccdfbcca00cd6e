"""Lifetime orchestration: wake/sleep cycles over a block syllabus.

``run_lifetime`` executes the configured schedule: evaluation blocks run the
current stable policy greedily and never mutate learner state; learning
blocks roll out the plastic wake policy across a bank of sequential workers,
push transitions through the preprocessing pipeline into the wake buffer,
update the policy off-policy at a fixed cadence, and consolidate into the
sleep eigentasks at forced interval boundaries and (optionally) whenever the
feature change detector requests it. ``run_ste`` trains a single-task expert
with the same wake machinery and nothing else.
"""
from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import buffers, changepoint, consolidation, danger, metrics, nets
from . import gridworld as gw
from . import pipeline as pipe
from . import policy, runlog, stam
from .config import RunConfig, save_resolved

# deterministic stream labels for seed derivation
_S_INIT, _S_ACT, _S_UPDATE, _S_SLEEP, _S_EPISODE, _S_EVAL, _S_SKILL, _S_RESET, _S_PRETRAIN = range(9)

PQ_HELD_OUT_TASKS = ("defeat_r_one", "collect_fog")
PQ_FRAMES_PER_HELD_OUT_TASK = 5000
PQ_FALLBACK_FRAMES = 10_000


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


class ReplayHandle:
    """Random-replay access for consolidation.

    Routes sampling to the shared exemplar store, applies the configured
    per-sleep intake size, and (for secondary eigentasks or with random
    replay disabled) swallows the intake so exemplars enter once per sleep.
    """

    def __init__(self, inner: buffers.RandomReplayBuffer, intake: int, allow_intake: bool = True):
        self.inner = inner
        self.intake = intake
        self.allow_intake = allow_intake

    def __len__(self) -> int:
        return len(self.inner)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        return self.inner.sample(n, rng)

    def add_from_wake(self, wake, decode_fn, rng, n=None) -> int:
        if not self.allow_intake:
            return 0
        return self.inner.add_from_wake(wake, decode_fn, rng, self.intake if n is None else n)


@dataclass
class _Worker:
    index: int
    state: object
    obs: np.ndarray
    traj_id: int
    ep_reward: float = 0.0
    ep_len: int = 0
    ep_index: int = 0


@dataclass
class Context:
    """Everything a lifetime carries between blocks."""

    cfg: RunConfig
    pipeline: pipe.Pipeline
    codec: object
    input_dim: int
    extra_features: list
    wake: policy.PolicyNet
    wake_adam: nets.AdamState
    eigentasks: list
    vtrace: policy.VTraceConfig
    sleep_cfg: consolidation.SleepConfig
    wake_buffer: buffers.WakeBuffer
    replay: buffers.RandomReplayBuffer
    sampler: buffers.PrioritySampler | None
    detector: changepoint.ChangeDetector | None
    danger_annotator: danger.DangerAnnotator | None
    stam_pre: stam.STAMPreprocessor | None
    rng_act: np.random.Generator
    rng_update: np.random.Generator
    rng_sleep: np.random.Generator
    selected: int = 0
    teacher: policy.PolicyNet | None = None
    sleep_total: int = 0
    last_sleep_global: int = -(10**18)
    global_step: int = 0
    frame_sink: list | None = None
    frame_sink_cap: int = 0

    def input_fn(self, planes: np.ndarray, extras: dict) -> np.ndarray:
        """Policy input from stored planes plus recorded plugin features."""
        parts = []
        for name in self.cfg.model.policy_features:
            if name == "flat":
                parts.append(pipe.FlatPreprocessor().features(planes, {}, False))
            elif name in extras:
                parts.append(np.asarray(extras[name], dtype=np.float64))
            else:
                raise KeyError(f"stored transition lacks feature {name!r}")
        return np.concatenate(parts)

    def boot_input_fn(self, planes: np.ndarray) -> np.ndarray:
        """Bootstrap observations carry no plugin features; zero-fill them."""
        x = self.input_fn(planes, {k: np.zeros(d) for k, d in self._extra_dims.items()})
        return x

    _extra_dims: dict = field(default_factory=dict)

    def eval_net(self) -> policy.PolicyNet:
        if self.cfg.components.sleep:
            return self.eigentasks[self.selected].policy
        return self.wake


def _greedy_policy_fn(ctx: Context, net: policy.PolicyNet):
    """Frozen greedy policy over the pipeline's features (evaluation only)."""

    def fn(planes):
        aug = ctx.pipeline.augment(planes, task_id="", tick=0, training=False)
        x = pipe.policy_input(aug, ctx.cfg.model.policy_features)[None, :]
        _, logits, _ = policy.policy_forward(net, x)
        a = policy.greedy_action(logits)[0]
        return (int(a[0]), int(a[1]), int(a[2]))

    return fn


# ---------------------------------------------------------------------------
# Component construction
# ---------------------------------------------------------------------------


def _pretrain_codec(cfg: RunConfig, writer) -> buffers.PQCodec:
    """Fit per-pixel codebooks on random-policy frames from held-out tasks."""
    codec = buffers.PQCodec()
    held = [t for t in PQ_HELD_OUT_TASKS if t not in cfg.syllabus.tasks]
    if len(held) == len(PQ_HELD_OUT_TASKS):
        frames = np.concatenate(
            [
                gw.collect_random_frames(t, PQ_FRAMES_PER_HELD_OUT_TASK, derive_seed(cfg.seed, _S_PRETRAIN, i))
                for i, t in enumerate(held)
            ]
        )
        writer.write("note", text=f"codebook pretrained on held-out tasks {list(held)}")
    else:
        task = cfg.syllabus.tasks[0]
        message = (
            f"held-out pretraining tasks {list(PQ_HELD_OUT_TASKS)} overlap the syllabus; "
            f"falling back to {PQ_FALLBACK_FRAMES} random-policy frames of {task!r}"
        )
        warnings.warn(message)
        writer.write("note", text=message)
        frames = gw.collect_random_frames(task, PQ_FALLBACK_FRAMES, derive_seed(cfg.seed, _S_PRETRAIN, 0))
    codec.train(frames, k=256, iters=20, seed=cfg.seed)
    return codec


def _fresh_detector(cfg: RunConfig, index: int) -> changepoint.ChangeDetector:
    return changepoint.ChangeDetector(
        dim=cfg.model.feature_dim,
        reference_size=cfg.watch.reference_size,
        window_size=cfg.watch.window_size,
        kappa=cfg.watch.kappa,
        min_history=cfg.watch.min_history,
        n_boot=cfg.watch.n_boot,
        boot_seed=derive_seed(cfg.seed, _S_SLEEP, index),
    )


def build_context(cfg: RunConfig, writer) -> Context:
    """Instantiate every component; raises before any syllabus step on failure."""
    pl = pipe.Pipeline()
    pl.register_preprocessor(pipe.FlatPreprocessor())
    stam_pre = None
    if cfg.components.stam:
        stam_pre = stam.STAMPreprocessor()
        pl.register_preprocessor(stam_pre)

    probe = pl.augment(np.zeros(buffers.PLANES_SHAPE), task_id=cfg.syllabus.tasks[0], tick=0, training=False)
    if probe.errors:
        raise RuntimeError(f"preprocessor failed during initialization: {probe.errors}")
    missing = [n for n in cfg.model.policy_features if n not in probe.features]
    if missing:
        raise RuntimeError(
            f"model.policy_features names unknown features {missing}; available: {sorted(probe.features)}"
        )
    input_dim = len(pipe.policy_input(probe, cfg.model.policy_features))
    extra_features = [n for n in cfg.model.policy_features if n != "flat"]

    rng_init = _rng(cfg.seed, _S_INIT)
    wake = policy.policy_init(
        input_dim, rng_init, hidden=list(cfg.model.hidden), feature_dim=cfg.model.feature_dim
    )
    wake_adam = nets.adam_init(policy.policy_params(wake), lr=cfg.wake.lr)
    eigentasks = [
        consolidation.eigentask_init(
            input_dim,
            rng_init,
            hidden=list(cfg.model.hidden),
            feature_dim=cfg.model.feature_dim,
            latent_dim=cfg.model.latent_dim,
            vae_hidden=cfg.model.vae_hidden,
        )
        for _ in range(cfg.sleep.eigentask_count)
    ]

    danger_annotator = None
    if cfg.components.danger:
        feature_fn = danger.extractor_feature_fn(eigentasks[0].policy.extractor, cfg.model.policy_features)
        danger_annotator = danger.DangerAnnotator(
            feature_fn, dim=cfg.model.feature_dim, priority_mode=cfg.replay.danger_priority_mode
        )
        pl.register_annotator(danger_annotator)

    vtrace = policy.VTraceConfig(
        gamma=cfg.wake.gamma,
        rho_bar=cfg.wake.rho_bar,
        c_bar=cfg.wake.c_bar,
        unroll=cfg.wake.unroll,
        value_coef=cfg.wake.value_coef,
        entropy_coef=cfg.wake.entropy_coef,
        traj_per_update=cfg.wake.traj_per_update,
    )
    sleep_cfg = consolidation.SleepConfig(
        w_imitation=cfg.sleep.w_imitation,
        w_recon=cfg.sleep.w_recon,
        w_kl=cfg.sleep.w_kl,
        w_value=cfg.sleep.w_value,
        iterations=cfg.sleep.iterations,
        batch=cfg.sleep.batch,
        gen_replay_from_sleep=cfg.sleep.gen_replay_from_sleep,
        sleeps_per_lb=max(1, cfg.sleep.forced_per_lb),
        eigentask_count=cfg.sleep.eigentask_count,
    )

    sampler = (
        buffers.PrioritySampler(alpha=cfg.replay.alpha, uniform_mix=cfg.replay.uniform_mix)
        if cfg.replay.prioritized
        else None
    )
    detector = _fresh_detector(cfg, 0) if cfg.components.adaptive_sleep else None
    # codec pretraining interacts with the environment, so it runs last:
    # any configuration problem above aborts before a single frame is drawn
    codec = _pretrain_codec(cfg, writer) if cfg.components.remind else buffers.IdentityCodec()

    ctx = Context(
        cfg=cfg,
        pipeline=pl,
        codec=codec,
        input_dim=input_dim,
        extra_features=extra_features,
        wake=wake,
        wake_adam=wake_adam,
        eigentasks=eigentasks,
        vtrace=vtrace,
        sleep_cfg=sleep_cfg,
        wake_buffer=buffers.WakeBuffer(cfg.wake.buffer_capacity),
        replay=buffers.RandomReplayBuffer(cfg.replay.capacity),
        sampler=sampler,
        detector=detector,
        danger_annotator=danger_annotator,
        stam_pre=stam_pre,
        rng_act=_rng(cfg.seed, _S_ACT),
        rng_update=_rng(cfg.seed, _S_UPDATE),
        rng_sleep=_rng(cfg.seed, _S_SLEEP),
    )
    ctx._extra_dims = {n: len(np.asarray(probe.features[n]).ravel()) for n in extra_features}
    return ctx


# ---------------------------------------------------------------------------
# Sleep
# ---------------------------------------------------------------------------


def _reset_wake(ctx: Context) -> None:
    fresh = policy.policy_init(
        ctx.input_dim,
        _rng(ctx.cfg.seed, _S_RESET, ctx.global_step),
        hidden=list(ctx.cfg.model.hidden),
        feature_dim=ctx.cfg.model.feature_dim,
    )
    nets.assign_arrays(policy.policy_params(ctx.wake), policy.policy_params(fresh))
    for m, v in zip(ctx.wake_adam.m, ctx.wake_adam.v):
        m.fill(0.0)
        v.fill(0.0)
    ctx.wake_adam.t = 0


def _curve_tail(values: list, n: int = 100) -> float:
    return float(np.mean(values[-n:])) if values else float("nan")


def _do_sleep(ctx: Context, writer, lb_index: int, task: str, step_in_lb: int, trigger: str) -> bool:
    """One consolidation phase; returns True when a sleep actually ran."""
    cfg = ctx.cfg
    if len(ctx.wake_buffer) == 0:
        writer.write(
            "sleep", lb=lb_index, step=step_in_lb, step_global=ctx.global_step,
            trigger=trigger, skipped=True, reason="empty wake buffer",
        )
        return False
    ctx.sleep_total += 1
    allow_replay = cfg.components.random_replay
    reports = []
    for i, model in enumerate(ctx.eigentasks):
        # exemplars enter the shared store once per sleep, via the first model
        handle = ReplayHandle(ctx.replay, cfg.replay.exemplars_per_sleep, allow_intake=allow_replay and i == 0)
        reports.append(
            consolidation.consolidate(
                model,
                ctx.wake_buffer,
                handle,
                ctx.sleep_cfg,
                ctx.sleep_total,
                ctx.codec.decode,
                ctx.input_fn,
                ctx.rng_sleep,
                sampler=ctx.sampler,
            )
        )

    if len(ctx.eigentasks) > 1:
        eval_counter = iter(range(len(ctx.eigentasks)))

        def evaluate(model):
            seed = derive_seed(cfg.seed, _S_SKILL, ctx.sleep_total, next(eval_counter))
            fn = _greedy_policy_fn(ctx, model.policy)
            return gw.run_eval_block(fn, [task], cfg.sleep.skill_eval_episodes, seed=seed)[task]

        ctx.selected = consolidation.skill_select(ctx.eigentasks, evaluate)
    else:
        ctx.selected = 0
    writer.write(
        "skill_select", lb=lb_index, step_global=ctx.global_step,
        chosen=ctx.selected, candidates=len(ctx.eigentasks),
    )

    if cfg.wake.reset_on_wake:
        _reset_wake(ctx)
    else:
        consolidation.copy_weights(ctx.eigentasks[ctx.selected], ctx.wake, ctx.wake_adam)
    ctx.teacher = policy.policy_clone(ctx.eigentasks[ctx.selected].policy)
    ctx.last_sleep_global = ctx.global_step
    if ctx.detector is not None:
        # the feature extractor just changed; restart detection from scratch
        ctx.detector = _fresh_detector(cfg, ctx.sleep_total)

    head = reports[0]
    writer.write(
        "sleep",
        lb=lb_index,
        step=step_in_lb,
        step_global=ctx.global_step,
        trigger=trigger,
        skipped=False,
        index=ctx.sleep_total,
        iterations=head["iterations"],
        executed=len(head["curves"]["total"]),
        batch=head["batch"],
        gen_replay_active=head["gen_replay_active"],
        samples=head["samples"],
        exemplars_added=sum(r["exemplars_added"] for r in reports),
        replay_size=len(ctx.replay),
        losses={k: _curve_tail(v) for k, v in head["curves"].items()},
    )
    return True


# ---------------------------------------------------------------------------
# Wake rollout
# ---------------------------------------------------------------------------


def _forced_points(cfg: RunConfig, steps: int) -> list:
    if not cfg.components.sleep or steps <= 0 or cfg.sleep.forced_per_lb < 1:
        return []
    if cfg.components.adaptive_sleep and not cfg.watch.keep_forced:
        return []
    k = cfg.sleep.forced_per_lb
    return sorted({steps * i // k for i in range(1, k + 1)} - {0})


def _advice_horizon(cfg: RunConfig, steps: int) -> int:
    # planned wake-period length: the forced-sleep interval of this block
    period = steps // cfg.sleep.forced_per_lb if cfg.sleep.forced_per_lb > 0 else steps
    return max(1, period // 2)


def _segment_to_traj(ctx: Context, seg: buffers.Segment) -> policy.Trajectory:
    inputs = np.stack([ctx.input_fn(ctx.codec.decode(t.obs), t.extras) for t in seg.transitions])
    actions = np.stack([t.action for t in seg.transitions])
    behavior = tuple(
        np.stack([t.behavior_logits[f] for t in seg.transitions]) for f in range(3)
    )
    rewards = np.array([t.reward for t in seg.transitions])
    if seg.bootstrap is not None:
        boot = ctx.boot_input_fn(ctx.codec.decode(seg.bootstrap))
    else:
        boot = np.zeros(ctx.input_dim)
    return policy.Trajectory(
        inputs=inputs,
        actions=actions,
        behavior_logits=behavior,
        rewards=rewards,
        bootstrap_input=boot,
        terminal=seg.terminal,
    )


def _wake_update_once(ctx: Context, workers: list) -> dict:
    open_boot = {w.traj_id: ctx.codec.encode(w.obs) for w in workers}
    segs = ctx.wake_buffer.sample_segments(
        ctx.cfg.wake.traj_per_update, ctx.cfg.wake.unroll, ctx.rng_update, open_bootstrap=open_boot
    )
    trajs = [_segment_to_traj(ctx, s) for s in segs]
    return policy.wake_update(ctx.wake, trajs, ctx.vtrace, ctx.wake_adam)


def _drain_danger_reports(ctx: Context, writer, lb_index: int) -> None:
    annot = ctx.danger_annotator
    if annot is None or not annot.episode_reports:
        return
    for rep in annot.episode_reports:
        writer.write("danger_episode", lb=lb_index, step_global=ctx.global_step, **rep)
    annot.episode_reports.clear()


def _run_learning_block(ctx: Context, writer, lb_index: int, task: str, steps: int) -> dict:
    cfg = ctx.cfg
    stats = {"episodes": 0, "updates": 0, "sleeps": 0, "changepoints": 0}
    curve: list = []
    if steps <= 0:
        return {**stats, "curve": curve}

    if cfg.wake.reset_on_wake:
        _reset_wake(ctx)

    n_workers = min(cfg.workers, steps)
    workers = []
    for w in range(n_workers):
        state = gw.env_reset(task, derive_seed(cfg.seed, _S_EPISODE, lb_index, w, 0))
        workers.append(
            _Worker(index=w, state=state, obs=gw.observe(state), traj_id=ctx.wake_buffer.begin_trajectory(task))
        )

    schedule = policy.AdviceSchedule(p0=cfg.wake.advice_p0, decay_horizon=_advice_horizon(cfg, steps))
    forced = _forced_points(cfg, steps)
    next_forced = 0
    phase_start = 0
    step_in_lb = 0
    update_credit = 0

    while step_in_lb < steps:
        n = min(n_workers, steps - step_in_lb)
        active = workers[:n]
        augs = [ctx.pipeline.augment(w.obs, task, w.ep_len, training=True) for w in active]
        inputs = np.stack([pipe.policy_input(a, cfg.model.policy_features) for a in augs])

        use_advice = ctx.teacher is not None and cfg.components.sleep
        p_advice = (
            policy.advice_prob(schedule, step_in_lb - phase_start) if use_advice else 0.0
        )
        actions, behavior, mask = policy.act_batch(
            ctx.wake, ctx.teacher if use_advice else None, inputs, p_advice, ctx.rng_act
        )
        _, _, wake_values = policy.policy_forward(ctx.wake, inputs)
        if mask.any():
            _, _, teacher_values = policy.policy_forward(ctx.teacher, inputs)
            values = np.where(mask, teacher_values, wake_values)
        else:
            values = wake_values
        feats = (
            nets.mlp_forward(ctx.eigentasks[ctx.selected].policy.extractor, inputs).out
            if ctx.detector is not None
            else None
        )

        adaptive_request = False
        for i, w in enumerate(active):
            if ctx.frame_sink is not None and len(ctx.frame_sink) < ctx.frame_sink_cap:
                ctx.frame_sink.append(np.array(w.obs))
            action = (int(actions[i, 0]), int(actions[i, 1]), int(actions[i, 2]))
            obs_next, reward, done, _ = gw.env_step(w.state, action)
            ctx.pipeline.annotate(
                augs[i],
                {"action": action, "reward": reward, "done": done, "worker": w.index},
                training=True,
            )
            priority = 1.0
            if ctx.danger_annotator is not None:
                score = augs[i].annotations.get("danger", {}).get("danger")
                if score is not None:
                    priority = ctx.danger_annotator.priority(score)
            extras = {k: np.asarray(augs[i].features[k]) for k in ctx.extra_features}
            ctx.wake_buffer.push(
                w.traj_id,
                ctx.codec.encode(w.obs),
                actions[i],
                tuple(b[i] for b in behavior),
                reward,
                done,
                behavior_value=float(values[i]),
                extras=extras,
                priority=priority,
            )
            w.ep_reward += reward
            w.ep_len += 1
            step_in_lb += 1
            ctx.global_step += 1
            update_credit += 1

            if ctx.detector is not None:
                event = ctx.detector.observe(feats[i])
                if event is not None:
                    stats["changepoints"] += 1
                    writer.write(
                        "changepoint", lb=lb_index, step=step_in_lb, step_global=ctx.global_step,
                        distance=event.distance, threshold=event.threshold,
                    )
                    adaptive_request = True

            if done:
                ctx.wake_buffer.end_trajectory(w.traj_id, None, terminal=True)
                ctx.pipeline.episode_end(
                    {"task_id": task, "total_reward": w.ep_reward, "worker": w.index}, training=True
                )
                curve.append((step_in_lb, w.ep_reward))
                stats["episodes"] += 1
                writer.write(
                    "episode", lb=lb_index, task=task, step=step_in_lb, step_global=ctx.global_step,
                    reward=w.ep_reward, length=w.ep_len, worker=w.index,
                )
                w.ep_index += 1
                w.state = gw.env_reset(task, derive_seed(cfg.seed, _S_EPISODE, lb_index, w.index, w.ep_index))
                w.obs = gw.observe(w.state)
                w.traj_id = ctx.wake_buffer.begin_trajectory(task)
                w.ep_reward = 0.0
                w.ep_len = 0
            else:
                w.obs = obs_next

        _drain_danger_reports(ctx, writer, lb_index)

        while update_credit >= cfg.wake.update_every and len(ctx.wake_buffer) > 0:
            update_credit -= cfg.wake.update_every
            update_stats = _wake_update_once(ctx, workers)
            stats["updates"] += 1
            writer.write(
                "wake_update", lb=lb_index, step=step_in_lb, step_global=ctx.global_step,
                p_advice=p_advice, **update_stats,
            )

        slept = False
        while next_forced < len(forced) and step_in_lb >= forced[next_forced]:
            if _do_sleep(ctx, writer, lb_index, task, step_in_lb, trigger="forced"):
                stats["sleeps"] += 1
                slept = True
            next_forced += 1
        if (
            adaptive_request
            and not slept
            and cfg.components.sleep
            and ctx.global_step - ctx.last_sleep_global >= cfg.watch.min_sleep_gap
        ):
            if _do_sleep(ctx, writer, lb_index, task, step_in_lb, trigger="adaptive"):
                stats["sleeps"] += 1
                slept = True
        if slept:
            phase_start = step_in_lb

    for w in workers:
        ctx.wake_buffer.end_trajectory(w.traj_id, ctx.codec.encode(w.obs), terminal=False)
        # discard partially collected episode statistics held by annotators
        ctx.pipeline.episode_end({"task_id": task, "total_reward": 0.0, "worker": w.index}, training=False)
    return {**stats, "curve": curve}


# ---------------------------------------------------------------------------
# Lifetimes
# ---------------------------------------------------------------------------


def build_schedule(cfg: RunConfig) -> list:
    """Block list for the configured syllabus; zero-length LBs run as no-ops."""
    syl = cfg.syllabus
    blocks = gw.build_syllabus(syl.scenario, syl.tasks, max(1, syl.lb_steps), syl.eb_episodes, seed=cfg.seed)
    if syl.lb_steps == 0:
        for b in blocks:
            if b["type"] == "LB":
                b["steps"] = 0
    return blocks


def run_lifetime(cfg: RunConfig) -> metrics.RunLog:
    """Execute one configured lifetime; returns the reconstructed run log."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, value in cfg.env.items():
        os.environ[str(key)] = str(value)
    save_resolved(cfg, out / "resolved_config.yaml")
    blocks = build_schedule(cfg)

    log_path = out / "run_log.jsonl"
    lb_seconds: list = []
    t_start = time.perf_counter()
    with runlog.RunLogWriter(log_path) as writer:
        writer.write(
            "meta",
            tasks=cfg.syllabus.tasks,
            scenario=cfg.syllabus.scenario,
            seed=cfg.seed,
            workers=cfg.workers,
            blocks=blocks,
        )
        ctx = build_context(cfg, writer)
        eb_row = 0
        lb_index = 0
        for bi, block in enumerate(blocks):
            if block["type"] == "EB":
                fn = _greedy_policy_fn(ctx, ctx.eval_net())
                rewards = gw.run_eval_block(
                    fn, cfg.syllabus.tasks, block["episodes"], seed=derive_seed(cfg.seed, _S_EVAL, eb_row)
                )
                writer.write("eb", block=bi, row=eb_row, step_global=ctx.global_step, rewards=rewards)
                eb_row += 1
            else:
                t0 = time.perf_counter()
                writer.write("lb_start", block=bi, lb=lb_index, task=block["task"], steps=block["steps"])
                result = _run_learning_block(ctx, writer, lb_index, block["task"], block["steps"])
                writer.write(
                    "lb_end", block=bi, lb=lb_index, task=block["task"],
                    episodes=result["episodes"], updates=result["updates"],
                    sleeps=result["sleeps"], changepoints=result["changepoints"],
                )
                lb_seconds.append(time.perf_counter() - t0)
                lb_index += 1

    # wall-clock timings live outside the log to keep it byte-reproducible
    with open(out / "timings.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "lb_seconds": lb_seconds,
                "amortized_lb_seconds": float(np.mean(lb_seconds)) if lb_seconds else None,
                "total_seconds": time.perf_counter() - t_start,
            },
            f,
            indent=2,
            sort_keys=True,
        )
    buffers.save_snapshot(out / "wake_buffer.bin", ctx.wake_buffer, ctx.codec.kind)
    if ctx.stam_pre is not None:
        stam.dump_ltm(ctx.stam_pre.memory, out / "stam_ltm.npz")
    return runlog.to_metrics_runlog(runlog.read_log(log_path))


def run_ste(
    task: str,
    steps: int = 200_000,
    seed: int = 0,
    workers: int = 8,
    out_dir="ste",
    update_every: int | None = None,
    dump_frames: int = 0,
) -> dict:
    """Train a single-task expert: the wake learner alone, no sleep, no advice."""
    if steps < 1:
        raise ValueError("a single-task expert needs at least one training step")
    gw.task_spec(task)
    cfg = RunConfig(seed=seed, workers=workers)
    cfg.syllabus.tasks = [task]
    cfg.components.sleep = False
    cfg.components.adaptive_sleep = False
    cfg.components.remind = False
    cfg.components.danger = False
    cfg.components.stam = False
    cfg.components.random_replay = False
    if update_every is not None:
        cfg.wake.update_every = update_every

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"ste_{task}_log.jsonl"
    with runlog.RunLogWriter(log_path) as writer:
        writer.write(
            "meta", tasks=[task], scenario="ste", seed=seed, workers=workers,
            blocks=[{"type": "LB", "task": task, "steps": steps}],
        )
        ctx = build_context(cfg, writer)
        if dump_frames > 0:
            ctx.frame_sink = []
            ctx.frame_sink_cap = dump_frames
        writer.write("lb_start", block=0, lb=0, task=task, steps=steps)
        result = _run_learning_block(ctx, writer, 0, task, steps)
        writer.write(
            "lb_end", block=0, lb=0, task=task, episodes=result["episodes"],
            updates=result["updates"], sleeps=result["sleeps"], changepoints=result["changepoints"],
        )
    if not result["curve"]:
        raise ValueError(f"no episode finished within {steps} steps; expert curve is empty")
    curve = [[int(s), float(r)] for s, r in result["curve"]]
    entry = {
        "task": task,
        "steps": steps,
        "seed": seed,
        "curve": curve,
        "terminal": metrics.terminal_from_curve(curve),
    }
    with open(out / f"ste_{task}.json", "w", encoding="utf-8") as f:
        json.dump(entry, f, sort_keys=True)
    if dump_frames > 0 and ctx.frame_sink:
        np.savez(out / f"ste_{task}_frames.npz", frames=np.stack(ctx.frame_sink))
    return entry


def load_ste_baselines(ste_dir, tasks: list) -> tuple:
    """(STEBaselines, missing task ids) read from ``ste_<task>.json`` files."""
    terminal = {}
    curves = {}
    missing = []
    for task in tasks:
        path = Path(ste_dir) / f"ste_{task}.json"
        if not path.exists():
            missing.append(task)
            continue
        with open(path, "r", encoding="utf-8") as f:
            entry = json.load(f)
        terminal[task] = float(entry["terminal"])
        curves[task] = [(float(s), float(r)) for s, r in entry["curve"]]
    return metrics.STEBaselines(terminal=terminal, curves=curves), missing
