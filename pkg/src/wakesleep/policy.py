"""Wake learner: factored softmax policy with V-trace off-policy correction.

The policy maps a flattened observation through a LayerNormed feature
extractor to three categorical heads (function, x, y) and a scalar value
head. Rollouts may be partly driven by a teacher policy (advice); the
recorded behavior logits always come from whichever policy acted, and
V-trace importance weights correct the mismatch during updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .gridworld import GRID, N_FUNCTIONS


@dataclass
class PolicyNet:
    extractor: nets.MLPParams  # input -> feature, LayerNorm on the output
    func_head: nets.DenseLayer
    x_head: nets.DenseLayer
    y_head: nets.DenseLayer
    value_head: nets.DenseLayer


def policy_init(
    input_dim: int,
    rng: np.random.Generator,
    hidden: list[int] | None = None,
    feature_dim: int = 64,
) -> PolicyNet:
    hidden = [96] if hidden is None else hidden
    extractor = nets.mlp_init(
        [input_dim, *hidden, feature_dim],
        rng,
        hidden_activation="relu",
        out_activation="identity",
        final_layernorm=True,
    )

    def head(n):
        return nets.DenseLayer(
            w=nets.glorot_uniform(rng, n, feature_dim), b=np.zeros(n)
        )

    return PolicyNet(
        extractor=extractor,
        func_head=head(N_FUNCTIONS),
        x_head=head(GRID),
        y_head=head(GRID),
        value_head=head(1),
    )


def policy_params(net: PolicyNet) -> list[np.ndarray]:
    out = nets.mlp_params_list(net.extractor)
    for h in (net.func_head, net.x_head, net.y_head, net.value_head):
        out.append(h.w)
        out.append(h.b)
    return out


def policy_clone(net: PolicyNet) -> PolicyNet:
    def ch(h):
        return nets.DenseLayer(w=h.w.copy(), b=h.b.copy(), activation=h.activation)

    return PolicyNet(
        extractor=nets.mlp_clone(net.extractor),
        func_head=ch(net.func_head),
        x_head=ch(net.x_head),
        y_head=ch(net.y_head),
        value_head=ch(net.value_head),
    )


def heads_logits(net: PolicyNet, feats: np.ndarray):
    """Policy head logits from features: (func, x, y)."""
    return tuple(
        feats @ h.w.T + h.b for h in (net.func_head, net.x_head, net.y_head)
    )


def policy_forward(net: PolicyNet, inputs: np.ndarray):
    """Returns (cache, logits tuple, values)."""
    cache = nets.mlp_forward(net.extractor, inputs)
    feats = cache.out
    logits = heads_logits(net, feats)
    values = (feats @ net.value_head.w.T + net.value_head.b)[:, 0]
    return cache, logits, values


def factored_log_prob(logits, actions: np.ndarray) -> np.ndarray:
    """Sum of per-factor log probabilities for (batch, 3) action indices."""
    total = np.zeros(actions.shape[0])
    for f, lg in enumerate(logits):
        logp = nets.log_softmax(lg)
        total += logp[np.arange(actions.shape[0]), actions[:, f]]
    return total


def greedy_action(logits) -> np.ndarray:
    """Per-factor argmax, (batch, 3)."""
    return np.stack([lg.argmax(axis=1) for lg in logits], axis=1)


# ---------------------------------------------------------------------------
# advice


@dataclass
class AdviceSchedule:
    p0: float = 0.8
    decay_horizon: int = 1

    def __post_init__(self):
        if self.decay_horizon <= 0:
            raise ValueError("decay_horizon must be positive")


def advice_prob(schedule: AdviceSchedule, t: int) -> float:
    """Linear decay from p0 at t=0 to 0 at t=decay_horizon, then 0."""
    return schedule.p0 * max(0.0, 1.0 - t / schedule.decay_horizon)


def act_batch(
    policy: PolicyNet,
    teacher: PolicyNet | None,
    inputs: np.ndarray,
    p_advice: float,
    rng: np.random.Generator,
):
    """Sample actions for a batch of observations, mixing in teacher advice.

    Returns (actions (B,3), behavior_logits tuple, teacher_mask (B,) bool).
    Behavior logits are those of whichever policy acted on each row.
    """
    if p_advice > 0.0 and teacher is None:
        raise ValueError("advice requested but no teacher policy exists")
    _, wake_logits, _ = policy_forward(policy, inputs)
    n = inputs.shape[0]
    if teacher is not None and p_advice > 0.0:
        mask = rng.random(n) < p_advice
        _, teacher_logits, _ = policy_forward(teacher, inputs)
        behavior = tuple(
            np.where(mask[:, None], tl, wl)
            for wl, tl in zip(wake_logits, teacher_logits)
        )
    else:
        mask = np.zeros(n, dtype=bool)
        behavior = wake_logits
    actions = np.stack(
        [nets.sample_categorical(rng, lg) for lg in behavior], axis=1
    )
    return actions, behavior, mask


def act(
    policy: PolicyNet,
    teacher: PolicyNet | None,
    input_vec: np.ndarray,
    p_advice: float,
    rng: np.random.Generator,
):
    """Single-observation act; returns (action, behavior_logits, source)."""
    actions, behavior, mask = act_batch(
        policy, teacher, input_vec[None, :], p_advice, rng
    )
    logits = tuple(lg[0] for lg in behavior)
    return tuple(int(a) for a in actions[0]), logits, ("teacher" if mask[0] else "wake")


# ---------------------------------------------------------------------------
# V-trace


@dataclass
class VTraceConfig:
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    unroll: int = 20
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    traj_per_update: int = 32


def vtrace_targets(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: float,
    log_rhos: np.ndarray,
    cfg: VTraceConfig,
):
    """V-trace corrected value targets and policy advantages for one sequence.

    vs_t = V_t + delta_t + gamma * c_t * (vs_{t+1} - V_{t+1})
    delta_t = rho_t * (r_t + gamma * V_{t+1} - V_t)
    adv_t = rho_t * (r_t + gamma * vs_{t+1} - V_t)
    with clipped rho_t = min(rho_bar, exp(log_rho_t)), c_t likewise, and
    V_T = vs_T = bootstrap_value.
    """
    T = len(rewards)
    if not (len(values) == len(log_rhos) == T):
        raise nets.ShapeError(
            f"vtrace: rewards {len(rewards)}, values {len(values)}, log_rhos {len(log_rhos)}"
        )
    rhos = np.minimum(cfg.rho_bar, np.exp(log_rhos))
    cs = np.minimum(cfg.c_bar, np.exp(log_rhos))
    vs = np.zeros(T)
    next_vs = bootstrap_value
    next_v = bootstrap_value
    for t in range(T - 1, -1, -1):
        delta = rhos[t] * (rewards[t] + cfg.gamma * next_v - values[t])
        vs[t] = values[t] + delta + cfg.gamma * cs[t] * (next_vs - next_v)
        next_vs = vs[t]
        next_v = values[t]
    vs_next = np.append(vs[1:], bootstrap_value)
    advantages = rhos * (rewards + cfg.gamma * vs_next - values)
    return vs, advantages


# ---------------------------------------------------------------------------
# updates


@dataclass
class Trajectory:
    inputs: np.ndarray  # (T, D)
    actions: np.ndarray  # (T, 3) int
    behavior_logits: tuple  # ((T,3), (T,GRID), (T,GRID))
    rewards: np.ndarray  # (T,)
    bootstrap_input: np.ndarray  # (D,)
    terminal: bool  # True -> bootstrap value 0


@dataclass
class WakeBatch:
    """Flattened trajectory batch with fixed regression targets."""

    inputs: np.ndarray
    actions: np.ndarray
    behavior_logits: tuple
    vs: np.ndarray
    advantages: np.ndarray


def assemble_batch(policy: PolicyNet, trajs: list[Trajectory], cfg: VTraceConfig) -> WakeBatch:
    """Run V-trace against current values and freeze the update targets."""
    inputs = np.concatenate([t.inputs for t in trajs], axis=0)
    boot_inputs = np.stack([t.bootstrap_input for t in trajs], axis=0)
    _, logits, values = policy_forward(policy, inputs)
    _, _, boot_values = policy_forward(policy, boot_inputs)
    actions = np.concatenate([t.actions for t in trajs], axis=0)
    target_logp = factored_log_prob(logits, actions)
    behavior = tuple(
        np.concatenate([t.behavior_logits[f] for t in trajs], axis=0) for f in range(3)
    )
    behavior_logp = factored_log_prob(behavior, actions)
    log_rhos = target_logp - behavior_logp
    vs_parts, adv_parts = [], []
    row = 0
    for i, tr in enumerate(trajs):
        T = len(tr.rewards)
        boot = 0.0 if tr.terminal else float(boot_values[i])
        vs, adv = vtrace_targets(
            tr.rewards, values[row : row + T], boot, log_rhos[row : row + T], cfg
        )
        vs_parts.append(vs)
        adv_parts.append(adv)
        row += T
    return WakeBatch(
        inputs=inputs,
        actions=actions,
        behavior_logits=behavior,
        vs=np.concatenate(vs_parts),
        advantages=np.concatenate(adv_parts),
    )


def wake_surrogate_loss(policy: PolicyNet, batch: WakeBatch, cfg: VTraceConfig) -> float:
    """Mean over timesteps of policy-gradient + value + entropy terms.

    The vs / advantage targets in the batch are constants (no gradient).
    """
    _, logits, values = policy_forward(policy, batch.inputs)
    n = batch.inputs.shape[0]
    logp = factored_log_prob(logits, batch.actions)
    entropy = sum(nets.entropy_from_logits(lg) for lg in logits)
    pg = -(batch.advantages * logp).mean()
    vl = cfg.value_coef * ((values - batch.vs) ** 2).mean()
    en = -cfg.entropy_coef * entropy.mean()
    del n
    return float(pg + vl + en)


def wake_loss_grads(policy: PolicyNet, batch: WakeBatch, cfg: VTraceConfig):
    """Analytic gradients of wake_surrogate_loss. Returns (grads list, stats)."""
    cache, logits, values = policy_forward(policy, batch.inputs)
    feats = cache.out
    n = batch.inputs.shape[0]
    rows = np.arange(n)
    dfeats = np.zeros_like(feats)
    head_grads = []
    for f, (head, lg) in enumerate(
        zip((policy.func_head, policy.x_head, policy.y_head), logits)
    ):
        logp = nets.log_softmax(lg)
        p = np.exp(logp)
        ent = -(p * logp).sum(axis=1)
        dlg = batch.advantages[:, None] * p
        dlg[rows, batch.actions[:, f]] -= batch.advantages
        dlg += cfg.entropy_coef * p * (logp + ent[:, None])
        dlg /= n
        head_grads.append((dlg.T @ feats, dlg.sum(axis=0)))
        dfeats += dlg @ head.w
    dv = cfg.value_coef * 2.0 * (values - batch.vs) / n
    head_grads.append((dv[None, :] @ feats, np.array([dv.sum()])))
    dfeats += dv[:, None] @ policy.value_head.w
    mlp_grads, _ = nets.mlp_backward(policy.extractor, cache, dfeats)
    grads = nets.mlp_grads_list(policy.extractor, mlp_grads)
    for dw, db in head_grads:
        grads.append(dw)
        grads.append(db)
    entropy = sum(nets.entropy_from_logits(lg) for lg in logits)
    logp_a = factored_log_prob(logits, batch.actions)
    stats = {
        "policy_loss": float(-(batch.advantages * logp_a).mean()),
        "value_loss": float(((values - batch.vs) ** 2).mean()),
        "entropy": float(entropy.mean()),
    }
    return grads, stats


def wake_update(
    policy: PolicyNet,
    trajs: list[Trajectory],
    cfg: VTraceConfig,
    adam: nets.AdamState,
) -> dict:
    """One off-policy actor-critic update on a batch of trajectories."""
    if not trajs:
        raise ValueError("wake_update needs at least one trajectory")
    batch = assemble_batch(policy, trajs, cfg)
    grads, stats = wake_loss_grads(policy, batch, cfg)
    nets.adam_step(policy_params(policy), grads, adam)
    return stats
