"""16x16 grid-world analogs of six real-time-strategy minigames.

Two collection tasks (with and without fog of war) and four combat tasks
against scripted enemy waves. One controlled unit; factored actions
(function, x, y) where function is move / attack / stop and (x, y) is a
waypoint. Rewards are +1 per shard collected or enemy killed and -1 per
friendly unit lost. Episodes run a fixed 240 ticks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID = 16
EPISODE_TICKS = 240
N_SHARDS = 20
SHARD_MIN_DIST = 2
FOG_RADIUS = 4
UNIT_BASE_HP = 10
REINFORCE_HP = 2

FN_MOVE, FN_ATTACK, FN_STOP = 0, 1, 2
N_FUNCTIONS = 3

# unit_type plane codes
CODE_EMPTY = 0
CODE_UNIT = 1
CODE_SHARD = 2
CODE_TYPE_A = 3
CODE_TYPE_B = 4
CODE_ROACH = 5
MAX_CODE = 5

ENEMY_STATS = {
    # kind: (hp, contact damage)
    "a": (1, 1),  # swarm melee: 1 hp, 1 dmg
    "b": (1, 2),  # suicide unit: 1 hp, explodes on contact for 2 dmg
    "roach": (3, 1),
}
# melee attackers strike and step every other tick; the controlled unit acts
# every tick, so kiting (retreat between attacks) is rewarded
ENEMY_ATTACK_COOLDOWN = 1
ENEMY_MOVE_COOLDOWN = 1


@dataclass
class TaskSpec:
    task_id: str
    collect: bool
    fog: bool = False
    # list of (kind, count, side) per wave; side in {left, right, both-l, both-r}
    waves: tuple = ()
    reinforcements: int = 0
    unit_spawn: str = "random"  # random | left | center


TASKS: dict[str, TaskSpec] = {
    "collect_nofog": TaskSpec("collect_nofog", collect=True),
    "collect_fog": TaskSpec("collect_fog", collect=True, fog=True),
    "defeat_zb_one": TaskSpec(
        "defeat_zb_one",
        collect=False,
        waves=(("a", 6, "right"), ("b", 4, "right")),
        reinforcements=4,
        unit_spawn="left",
    ),
    "defeat_zb_two": TaskSpec(
        "defeat_zb_two",
        collect=False,
        waves=(("a", 9, "left"), ("b", 6, "right")),
        reinforcements=6,
        unit_spawn="center",
    ),
    "defeat_r_one": TaskSpec(
        "defeat_r_one",
        collect=False,
        waves=(("roach", 4, "right"),),
        reinforcements=5,
        unit_spawn="left",
    ),
    "defeat_r_two": TaskSpec(
        "defeat_r_two",
        collect=False,
        waves=(("roach", 3, "left"), ("roach", 3, "right")),
        reinforcements=7,
        unit_spawn="center",
    ),
}


def task_spec(task_id: str) -> TaskSpec:
    if task_id not in TASKS:
        raise ValueError(f"unknown task {task_id!r}; known tasks: {sorted(TASKS)}")
    return TASKS[task_id]


@dataclass
class Enemy:
    kind: str
    x: int
    y: int
    hp: int
    eid: int
    cooldown: int = 0


@dataclass
class EnvState:
    task: TaskSpec
    rng: np.random.Generator
    tick: int = 0
    done: bool = False
    ux: int = 0
    uy: int = 0
    hp: int = UNIT_BASE_HP
    max_hp: int = UNIT_BASE_HP
    waypoint: tuple[int, int] | None = None
    attack_mode: bool = False
    shards: set = field(default_factory=set)
    enemies: list = field(default_factory=list)
    next_eid: int = 0
    episode_reward: float = 0.0
    events: list = field(default_factory=list)


def chebyshev(ax: int, ay: int, bx: int, by: int) -> int:
    return max(abs(ax - bx), abs(ay - by))


def _spawn_shards(state: EnvState, n: int) -> None:
    cells = [
        (x, y)
        for x in range(GRID)
        for y in range(GRID)
        if chebyshev(x, y, state.ux, state.uy) >= SHARD_MIN_DIST and (x, y) not in state.shards
    ]
    idx = state.rng.choice(len(cells), size=n, replace=False)
    for i in idx:
        state.shards.add(cells[int(i)])


def _side_cells(side: str) -> list:
    if side == "left":
        cols = range(0, 3)
    elif side == "right":
        cols = range(GRID - 3, GRID)
    else:
        raise ValueError(f"unknown spawn side {side!r}")
    return [(x, y) for x in cols for y in range(GRID)]


def _spawn_wave(state: EnvState) -> None:
    used: set = set()
    for kind, count, side in state.task.waves:
        cells = [c for c in _side_cells(side) if c not in used]
        idx = state.rng.choice(len(cells), size=count, replace=False)
        for i in idx:
            x, y = cells[int(i)]
            used.add((x, y))
            hp, _ = ENEMY_STATS[kind]
            state.enemies.append(Enemy(kind=kind, x=x, y=y, hp=hp, eid=state.next_eid))
            state.next_eid += 1


def env_reset(task_id: str, seed: int) -> EnvState:
    spec = task_spec(task_id)
    rng = np.random.default_rng(seed)
    state = EnvState(task=spec, rng=rng)
    if spec.unit_spawn == "random":
        state.ux = int(rng.integers(0, GRID))
        state.uy = int(rng.integers(0, GRID))
    elif spec.unit_spawn == "left":
        state.ux = 2
        state.uy = int(rng.integers(4, GRID - 4))
    else:  # center
        state.ux = int(rng.integers(7, 9))
        state.uy = int(rng.integers(6, 10))
    if spec.collect:
        _spawn_shards(state, N_SHARDS)
    else:
        _spawn_wave(state)
    return state


def observe(state: EnvState) -> np.ndarray:
    """Three 16x16 planes: unit_type codes, selection mask, entity density."""
    planes = np.zeros((3, GRID, GRID))
    ut, sel, den = planes
    for x, y in state.shards:
        ut[y, x] = max(ut[y, x], CODE_SHARD)
        den[y, x] += 1
    for e in state.enemies:
        code = {"a": CODE_TYPE_A, "b": CODE_TYPE_B, "roach": CODE_ROACH}[e.kind]
        ut[e.y, e.x] = max(ut[e.y, e.x], code)
        den[e.y, e.x] += 1
    if not state.done:
        ut[state.uy, state.ux] = max(ut[state.uy, state.ux], CODE_UNIT)
        sel[state.uy, state.ux] = 1.0
        den[state.uy, state.ux] += 1
    if state.task.fog:
        ys, xs = np.mgrid[0:GRID, 0:GRID]
        visible = np.maximum(np.abs(xs - state.ux), np.abs(ys - state.uy)) <= FOG_RADIUS
        planes *= visible[None, :, :]
    return planes


def _emit(state: EnvState, event: str, cell, reward: float, **extra) -> float:
    rec = {"tick": state.tick, "event": event, "cell": list(cell), "reward": reward}
    rec.update(extra)
    state.events.append(rec)
    return reward


def _step_toward(x: int, y: int, tx: int, ty: int) -> tuple[int, int]:
    return x + int(np.sign(tx - x)), y + int(np.sign(ty - y))


def env_step(state: EnvState, action: tuple[int, int, int]):
    """Advance one tick. Returns (obs, reward, done, info).

    Tick order: the controlled unit acts first (attack an adjacent enemy, or
    move one cell toward its waypoint), then enemies act in spawn order
    (suicide units explode on contact, others attack in contact or step
    toward the unit), then wave / shard respawns are applied.
    """
    if state.done:
        raise RuntimeError("env_step called on a finished episode")
    fn, ax, ay = int(action[0]), int(action[1]), int(action[2])
    if not (0 <= fn < N_FUNCTIONS and 0 <= ax < GRID and 0 <= ay < GRID):
        raise ValueError(f"invalid action {(fn, ax, ay)}")
    reward = 0.0
    if fn == FN_STOP:
        state.waypoint = None
        state.attack_mode = False
    else:
        state.waypoint = (ax, ay)
        state.attack_mode = fn == FN_ATTACK

    # --- unit phase
    in_range = [e for e in state.enemies if chebyshev(e.x, e.y, state.ux, state.uy) <= 1]
    if state.attack_mode and in_range:
        # engage: suicide units first, then nearest, then spawn order
        target = min(
            in_range,
            key=lambda e: (
                e.kind != "b",
                chebyshev(e.x, e.y, state.ux, state.uy),
                e.eid,
            ),
        )
        target.hp -= 1
        if target.hp <= 0:
            state.enemies.remove(target)
            reward += _emit(state, "kill", (target.x, target.y), 1.0, kind=target.kind)
    elif state.waypoint is not None and (state.ux, state.uy) != state.waypoint:
        state.ux, state.uy = _step_toward(state.ux, state.uy, *state.waypoint)
        if (state.ux, state.uy) in state.shards:
            state.shards.remove((state.ux, state.uy))
            reward += _emit(state, "collect", (state.ux, state.uy), 1.0)

    # --- enemy phase
    for e in list(state.enemies):
        dist = chebyshev(e.x, e.y, state.ux, state.uy)
        if e.kind == "b":
            if dist <= 1:
                state.hp -= ENEMY_STATS["b"][1]
                state.enemies.remove(e)
                _emit(state, "explode", (e.x, e.y), 0.0)
            elif e.cooldown == 0:
                e.x, e.y = _step_toward(e.x, e.y, state.ux, state.uy)
                e.cooldown = ENEMY_MOVE_COOLDOWN
            else:
                e.cooldown -= 1
        else:
            if e.cooldown > 0:
                e.cooldown -= 1
            elif dist <= 1:
                state.hp -= ENEMY_STATS[e.kind][1]
                e.cooldown = ENEMY_ATTACK_COOLDOWN
            else:
                e.x, e.y = _step_toward(e.x, e.y, state.ux, state.uy)
                e.cooldown = ENEMY_MOVE_COOLDOWN

    if state.hp <= 0:
        reward += _emit(state, "loss", (state.ux, state.uy), -1.0)
        state.done = True

    # --- respawns
    if not state.done:
        if state.task.collect and not state.shards:
            _spawn_shards(state, N_SHARDS)
            _emit(state, "shards", (state.ux, state.uy), 0.0)
        elif not state.task.collect and not state.enemies:
            state.max_hp += REINFORCE_HP
            state.hp = min(state.hp + REINFORCE_HP, state.max_hp)
            _emit(
                state,
                "reinforce",
                (state.ux, state.uy),
                0.0,
                count=state.task.reinforcements,
            )
            _spawn_wave(state)
            _emit(state, "wave", (state.ux, state.uy), 0.0)

    state.tick += 1
    if state.tick >= EPISODE_TICKS:
        state.done = True
    state.episode_reward += reward
    info = {"tick": state.tick, "hp": state.hp, "max_hp": state.max_hp}
    return observe(state), reward, state.done, info


def audit_reward(state: EnvState) -> float:
    """Recompute the episode reward from the event log."""
    total = 0.0
    for rec in state.events:
        if rec["event"] in ("collect", "kill"):
            total += 1.0
        elif rec["event"] == "loss":
            total -= 1.0
    return total


# ---------------------------------------------------------------------------
# syllabi


def build_syllabus(
    scenario: str,
    tasks: list[str],
    lb_steps: int,
    eb_episodes: int,
    seed: int = 0,
) -> list[dict]:
    """Block schedule: alternating evaluation blocks (EB) and learning blocks (LB)."""
    for t in tasks:
        task_spec(t)
    if lb_steps <= 0:
        raise ValueError("lb_steps must be positive")
    if eb_episodes <= 0:
        raise ValueError("eb_episodes must be positive")
    if scenario in ("pairwise", "alternating") and len(tasks) != 2:
        raise ValueError(f"{scenario} scenario needs exactly 2 tasks, got {len(tasks)}")
    if scenario == "pairwise":
        order = list(tasks)
    elif scenario == "alternating":
        order = list(tasks) * 3
    elif scenario == "condensed":
        if len(tasks) < 2:
            raise ValueError("condensed scenario needs at least 2 tasks")
        order = list(tasks)
        np.random.default_rng(seed).shuffle(order)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    blocks: list[dict] = [{"type": "EB", "episodes": eb_episodes}]
    for t in order:
        blocks.append({"type": "LB", "task": t, "steps": lb_steps})
        blocks.append({"type": "EB", "episodes": eb_episodes})
    return blocks


# ---------------------------------------------------------------------------
# evaluation


def run_episode(policy_fn, task_id: str, seed: int) -> float:
    """Roll one episode with policy_fn(planes) -> (fn, x, y); returns total reward."""
    state = env_reset(task_id, seed)
    obs = observe(state)
    while not state.done:
        obs, _, _, _ = env_step(state, policy_fn(obs))
    return state.episode_reward


def run_eval_block(policy_fn, tasks: list[str], episodes: int, seed: int) -> dict:
    """Mean episode reward per task; never mutates learner state by design."""
    if episodes <= 0:
        raise ValueError("eval block needs at least one episode")
    results = {}
    ss = np.random.SeedSequence([seed, 0xEB])
    for ti, t in enumerate(tasks):
        task_spec(t)
        rewards = []
        for ep in range(episodes):
            ep_seed = int(
                np.random.SeedSequence([seed, 0xEB, ti, ep]).generate_state(1)[0]
            )
            rewards.append(run_episode(policy_fn, t, ep_seed))
        results[t] = float(np.mean(rewards))
    del ss
    return results


def random_policy(rng: np.random.Generator):
    def act(obs):
        return (
            int(rng.integers(0, N_FUNCTIONS)),
            int(rng.integers(0, GRID)),
            int(rng.integers(0, GRID)),
        )

    return act


def collect_random_frames(task_id: str, n_frames: int, seed: int) -> np.ndarray:
    """Observations gathered under a uniform-random policy (for codebook pretraining)."""
    rng = np.random.default_rng(seed)
    pol = random_policy(rng)
    frames = np.zeros((n_frames, 3, GRID, GRID))
    i = 0
    ep = 0
    while i < n_frames:
        state = env_reset(task_id, int(np.random.SeedSequence([seed, ep]).generate_state(1)[0]))
        obs = observe(state)
        while not state.done and i < n_frames:
            frames[i] = obs
            i += 1
            obs, _, _, _ = env_step(state, pol(obs))
        ep += 1
    return frames
