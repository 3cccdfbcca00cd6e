"""Sleep-phase machinery: feature-space VAE, generative replay, consolidation.

An eigentask couples a policy network with a VAE that models the policy's own
feature space, so old experience can be replayed as generated features rather
than raw observations. Consolidation distills the wake policy into the
eigentask from three streams per step — wake-buffer samples, generated
features pseudo-labelled by the frozen pre-sleep model, and random-replay
exemplars in the original observation space — then hands the consolidated
weights back to the wake learner.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .policy import PolicyNet, heads_logits, policy_clone, policy_init, policy_params

# ---------------------------------------------------------------------------
# Feature-space VAE
# ---------------------------------------------------------------------------


@dataclass
class VAEParams:
    encoder: nets.MLPParams  # feature -> (mu, raw logvar)
    decoder: nets.MLPParams  # latent -> feature
    latent_dim: int
    logvar_bound: float = 5.0


def vae_init(
    feature_dim: int,
    rng: np.random.Generator,
    latent_dim: int = 16,
    hidden: int = 64,
    logvar_bound: float = 5.0,
) -> VAEParams:
    encoder = nets.mlp_init(
        [feature_dim, hidden, 2 * latent_dim], rng, hidden_activation="relu"
    )
    decoder = nets.mlp_init(
        [latent_dim, hidden, feature_dim], rng, hidden_activation="relu"
    )
    return VAEParams(encoder=encoder, decoder=decoder, latent_dim=latent_dim, logvar_bound=logvar_bound)


def vae_clone(vae: VAEParams) -> VAEParams:
    return VAEParams(
        encoder=nets.mlp_clone(vae.encoder),
        decoder=nets.mlp_clone(vae.decoder),
        latent_dim=vae.latent_dim,
        logvar_bound=vae.logvar_bound,
    )


def vae_params_list(vae: VAEParams) -> list:
    return nets.mlp_params_list(vae.encoder) + nets.mlp_params_list(vae.decoder)


@dataclass
class VAEForward:
    mu: np.ndarray
    raw_logvar: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    recon: np.ndarray
    eps: np.ndarray
    enc_cache: nets.MLPCache
    dec_cache: nets.MLPCache


def vae_encode(vae: VAEParams, feats: np.ndarray):
    """Posterior parameters (mu, logvar); logvar bounded by a scaled tanh."""
    cache = nets.mlp_forward(vae.encoder, feats)
    z = vae.latent_dim
    mu, raw = cache.out[:, :z], cache.out[:, z:]
    b = vae.logvar_bound
    return mu, b * np.tanh(raw / b), cache


def vae_forward(vae: VAEParams, feats: np.ndarray, eps: np.ndarray) -> VAEForward:
    mu, logvar, enc_cache = vae_encode(vae, feats)
    z = mu + eps * np.exp(0.5 * logvar)
    dec_cache = nets.mlp_forward(vae.decoder, z)
    raw = enc_cache.out[:, vae.latent_dim :]
    return VAEForward(
        mu=mu,
        raw_logvar=raw,
        logvar=logvar,
        z=z,
        recon=dec_cache.out,
        eps=eps,
        enc_cache=enc_cache,
        dec_cache=dec_cache,
    )


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> float:
    """Mean over the batch of KL(N(mu, diag exp(logvar)) || N(0, I))."""
    per_row = 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=1)
    return float(per_row.mean())


def vae_losses(fwd: VAEForward, feats: np.ndarray) -> tuple:
    recon = float(np.mean((fwd.recon - feats) ** 2))
    return recon, kl_divergence(fwd.mu, fwd.logvar)


def vae_loss(vae: VAEParams, feats: np.ndarray, rng: np.random.Generator) -> tuple:
    """(reconstruction MSE, KL) with freshly drawn reparameterization noise."""
    eps = rng.standard_normal((feats.shape[0], vae.latent_dim))
    return vae_losses(vae_forward(vae, feats, eps), feats)


def vae_backward(
    vae: VAEParams,
    feats: np.ndarray,
    fwd: VAEForward,
    w_recon: float,
    w_kl: float,
) -> list:
    """Gradients of w_recon·recon + w_kl·kl in vae_params_list order."""
    n = feats.shape[0]
    drecon = w_recon * 2.0 * (fwd.recon - feats) / fwd.recon.size
    dec_grads, dz = nets.mlp_backward(vae.decoder, fwd.dec_cache, drecon)
    dmu = dz + w_kl * fwd.mu / n
    dlogvar = dz * fwd.eps * 0.5 * np.exp(0.5 * fwd.logvar)
    dlogvar += w_kl * 0.5 * (np.exp(fwd.logvar) - 1.0) / n
    draw = dlogvar * (1.0 - np.tanh(fwd.raw_logvar / vae.logvar_bound) ** 2)
    denc = np.concatenate([dmu, draw], axis=1)
    enc_grads, _ = nets.mlp_backward(vae.encoder, fwd.enc_cache, denc)
    return nets.mlp_grads_list(vae.encoder, enc_grads) + nets.mlp_grads_list(
        vae.decoder, dec_grads
    )


def generate_features(vae: VAEParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Decode latent draws from the prior into a batch of features."""
    z = rng.standard_normal((n, vae.latent_dim))
    return nets.mlp_forward(vae.decoder, z).out


# ---------------------------------------------------------------------------
# Eigentask model
# ---------------------------------------------------------------------------


@dataclass
class EigentaskModel:
    policy: PolicyNet
    vae: VAEParams


def eigentask_init(
    input_dim: int,
    rng: np.random.Generator,
    hidden: list | None = None,
    feature_dim: int = 64,
    latent_dim: int = 16,
    vae_hidden: int = 64,
) -> EigentaskModel:
    policy = policy_init(input_dim, rng, hidden=hidden, feature_dim=feature_dim)
    vae = vae_init(feature_dim, rng, latent_dim=latent_dim, hidden=vae_hidden)
    return EigentaskModel(policy=policy, vae=vae)


def eigentask_clone(model: EigentaskModel) -> EigentaskModel:
    return EigentaskModel(policy=policy_clone(model.policy), vae=vae_clone(model.vae))


def eigentask_params(model: EigentaskModel) -> list:
    return policy_params(model.policy) + vae_params_list(model.vae)


def pseudo_label(model: EigentaskModel, features: np.ndarray):
    """Per-factor action logits for a feature batch (deterministic)."""
    return heads_logits(model.policy, features)


# ---------------------------------------------------------------------------
# Consolidation
# ---------------------------------------------------------------------------


@dataclass
class SleepConfig:
    w_imitation: float = 50.0
    w_recon: float = 200.0
    w_kl: float = 5.0
    w_value: float = 1.0
    iterations: int = 4500
    batch: int = 64
    gen_replay_from_sleep: int = 2
    sleeps_per_lb: int = 2
    eigentask_count: int = 1

    def __post_init__(self):
        for name in ("w_imitation", "w_recon", "w_kl"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.w_value < 0:
            raise ValueError("w_value must be nonnegative")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be positive")
        if self.sleeps_per_lb < 1 or self.eigentask_count < 1:
            raise ValueError("sleeps_per_lb and eigentask_count must be positive")


def softmax_cross_entropy(student_logits: np.ndarray, teacher_probs: np.ndarray):
    """Mean cross-entropy to a fixed target distribution and its logit gradient."""
    logp = nets.log_softmax(student_logits)
    n = student_logits.shape[0]
    ce = float(-(teacher_probs * logp).sum(axis=1).mean())
    dlogits = (np.exp(logp) - teacher_probs) / n
    return ce, dlogits


def _stack_inputs(entries, decode_fn, input_fn):
    return np.stack([input_fn(decode_fn(t.obs), t.extras) for t in entries])


def consolidate(
    model: EigentaskModel,
    wake_buffer,
    random_buffer,
    cfg: SleepConfig,
    sleep_index: int,
    decode_fn,
    input_fn,
    rng: np.random.Generator,
    sampler=None,
) -> dict:
    """Distill the wake data into the eigentask over cfg.iterations steps.

    Per step: up to cfg.batch wake samples (prioritized when a sampler is
    given), cfg.batch generated features once sleep_index reaches
    cfg.gen_replay_from_sleep, and up to cfg.batch random-replay exemplars.
    The pre-sleep model is frozen first and serves as pseudo-labeller and
    generator; afterwards 96 fresh wake observations join the replay buffer.
    Returns a report with stream counters and loss curves.
    """
    if len(wake_buffer) == 0:
        return {"skipped": True, "reason": "empty wake buffer", "sleep_index": sleep_index}

    teacher = eigentask_clone(model)
    params = eigentask_params(model)
    adam = nets.adam_init(params)
    gen_active = sleep_index >= cfg.gen_replay_from_sleep
    counts = {"wake": 0, "generated": 0, "replay": 0}
    curves = {"imitation": [], "recon": [], "kl": [], "value": [], "total": []}

    for _ in range(cfg.iterations):
        n_wake = min(cfg.batch, len(wake_buffer))
        if sampler is not None:
            wake_trans = wake_buffer.sample_prioritized(n_wake, sampler, rng)
        else:
            wake_trans = wake_buffer.sample_uniform(n_wake, rng)
        wake_inputs = _stack_inputs(wake_trans, decode_fn, input_fn)

        replay_entries = random_buffer.sample(min(cfg.batch, len(random_buffer)), rng)
        n_replay = len(replay_entries)
        if n_replay:
            replay_inputs = np.stack(
                [input_fn(e.planes, e.extras) for e in replay_entries]
            )
            real_inputs = np.vstack([wake_inputs, replay_inputs])
        else:
            real_inputs = wake_inputs
        n_real = n_wake + n_replay

        cache = nets.mlp_forward(model.policy.extractor, real_inputs)
        feats_real = cache.out
        if gen_active:
            gen_feats = generate_features(teacher.vae, cfg.batch, rng)
            gen_logits = pseudo_label(teacher, gen_feats)
            all_feats = np.vstack([feats_real, gen_feats])
        else:
            gen_feats = None
            all_feats = feats_real
        n_all = all_feats.shape[0]

        # distillation targets: recorded behavior logits for real rows,
        # frozen-teacher pseudo-labels for generated rows
        imitation = 0.0
        dfeats_all = np.zeros_like(all_feats)
        head_grads = []
        heads = (model.policy.func_head, model.policy.x_head, model.policy.y_head)
        for f, head in enumerate(heads):
            targets = [t.behavior_logits[f] for t in wake_trans]
            targets += [e.behavior_logits[f] for e in replay_entries]
            teacher_logits = np.stack(targets)
            if gen_active:
                teacher_logits = np.vstack([teacher_logits, gen_logits[f]])
            teacher_probs = np.exp(nets.log_softmax(teacher_logits))
            student_logits = all_feats @ head.w.T + head.b
            ce, dlogits = softmax_cross_entropy(student_logits, teacher_probs)
            imitation += ce
            dlogits *= cfg.w_imitation
            head_grads.append((dlogits.T @ all_feats, dlogits.sum(axis=0)))
            dfeats_all += dlogits @ head.w

        # value regression toward the acting policy's recorded estimates
        v_targets = np.array(
            [t.behavior_value for t in wake_trans]
            + [e.behavior_value for e in replay_entries]
        )
        vh = model.policy.value_head
        values = (feats_real @ vh.w.T + vh.b)[:, 0]
        value_loss = float(np.mean((values - v_targets) ** 2))
        dv = cfg.w_value * 2.0 * (values - v_targets) / n_real
        head_grads.append((dv[None, :] @ feats_real, np.array([dv.sum()])))

        dfeats_real = dfeats_all[:n_real] + dv[:, None] @ vh.w
        mlp_grads, _ = nets.mlp_backward(model.policy.extractor, cache, dfeats_real)
        grads = nets.mlp_grads_list(model.policy.extractor, mlp_grads)
        for dw, db in head_grads:
            grads.append(dw)
            grads.append(db)

        # the VAE models the current feature space; features enter as constants
        eps = rng.standard_normal((n_all, model.vae.latent_dim))
        fwd = vae_forward(model.vae, all_feats, eps)
        recon, kl = vae_losses(fwd, all_feats)
        grads += vae_backward(model.vae, all_feats, fwd, cfg.w_recon, cfg.w_kl)

        nets.adam_step(params, grads, adam)

        counts["wake"] += n_wake
        counts["replay"] += n_replay
        counts["generated"] += cfg.batch if gen_active else 0
        curves["imitation"].append(imitation)
        curves["recon"].append(recon)
        curves["kl"].append(kl)
        curves["value"].append(value_loss)
        curves["total"].append(
            cfg.w_imitation * imitation
            + cfg.w_recon * recon
            + cfg.w_kl * kl
            + cfg.w_value * value_loss
        )

    exemplars = random_buffer.add_from_wake(wake_buffer, decode_fn, rng)
    return {
        "skipped": False,
        "sleep_index": sleep_index,
        "iterations": cfg.iterations,
        "batch": cfg.batch,
        "gen_replay_active": gen_active,
        "samples": counts,
        "exemplars_added": exemplars,
        "curves": curves,
    }


# ---------------------------------------------------------------------------
# Skill selection and weight hand-off
# ---------------------------------------------------------------------------


def skill_select(models: list, evaluate_fn) -> int:
    """Pick the best eigentask by mean evaluation reward; ties take the lowest index."""
    if not models:
        raise ValueError("need at least one eigentask")
    if len(models) == 1:
        return 0
    scores = [float(evaluate_fn(m)) for m in models]
    return int(np.argmax(scores))


def copy_weights(src: EigentaskModel, dst: PolicyNet, dst_adam: nets.AdamState | None = None) -> None:
    """Copy extractor and all heads bitwise into the wake policy; reset its optimizer."""
    for s, d in zip(policy_params(src.policy), policy_params(dst)):
        np.copyto(d, s)
    if dst_adam is not None:
        for m, v in zip(dst_adam.m, dst_adam.v):
            m.fill(0.0)
            v.fill(0.0)
        dst_adam.t = 0
