"""VAE loss oracles, distillation dynamics, and sleep consolidation protocol."""
import numpy as np
import pytest

from wakesleep import nets
from wakesleep.buffers import IdentityCodec, RandomReplayBuffer, WakeBuffer
from wakesleep.consolidation import (
    EigentaskModel,
    SleepConfig,
    consolidate,
    copy_weights,
    eigentask_clone,
    eigentask_init,
    generate_features,
    kl_divergence,
    pseudo_label,
    skill_select,
    softmax_cross_entropy,
    vae_backward,
    vae_encode,
    vae_forward,
    vae_init,
    vae_loss,
    vae_losses,
    vae_params_list,
)
from wakesleep.gridworld import run_eval_block
from wakesleep.policy import greedy_action, heads_logits, policy_init, policy_params

from helpers import finite_diff_grads, rel_grad_err

CODEC = IdentityCodec()


def _tiny_model(seed=0, input_dim=6):
    rng = np.random.default_rng(seed)
    return eigentask_init(
        input_dim, rng, hidden=[12], feature_dim=8, latent_dim=4, vae_hidden=10
    )


def _policy_input(planes, extras):
    return np.asarray(planes, dtype=np.float64).ravel()


def _fill_buffer(model, inputs, rng):
    """Wake buffer whose behavior logits/values come from the given model."""
    buf = WakeBuffer(capacity=1000)
    traj = buf.begin_trajectory("collect_nofog")
    feats = nets.mlp_forward(model.policy.extractor, inputs).out
    logits = heads_logits(model.policy, feats)
    values = (feats @ model.policy.value_head.w.T + model.policy.value_head.b)[:, 0]
    shape = (inputs.shape[1], 1, 1)
    for i in range(inputs.shape[0]):
        buf.push(
            traj,
            CODEC.encode(inputs[i].reshape(shape)),
            (0, 0, 0),
            tuple(l[i] for l in logits),
            0.0,
            False,
            behavior_value=float(values[i]),
        )
    buf.end_trajectory(traj, None, terminal=True)
    return buf


# ---------------------------------------------------------------------------
# VAE losses
# ---------------------------------------------------------------------------


def test_kl_closed_form():
    assert kl_divergence(np.zeros((4, 5)), np.zeros((4, 5))) == 0.0
    # each of d dims contributes 1/2 when mu=1, logvar=0
    for d in (1, 3, 16):
        assert kl_divergence(np.ones((2, d)), np.zeros((2, d))) == pytest.approx(d / 2)


def test_kl_nonnegative_and_logvar_bounded_under_extreme_inputs():
    rng = np.random.default_rng(0)
    vae = vae_init(6, rng, latent_dim=3, hidden=8)
    for scale in (1.0, 1e3, 1e6):
        feats = scale * rng.standard_normal((20, 6))
        mu, logvar, _ = vae_encode(vae, feats)
        assert np.all(np.abs(logvar) <= 5.0)
        assert kl_divergence(mu, logvar) >= 0.0
        recon, kl = vae_loss(vae, feats, rng)
        assert np.isfinite(recon) and kl >= 0.0


def test_vae_gradients_match_finite_differences():
    w_recon, w_kl = 200.0, 5.0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        vae = vae_init(5, rng, latent_dim=3, hidden=8)
        feats = rng.standard_normal((4, 5))
        eps = rng.standard_normal((4, 3))
        params = vae_params_list(vae)

        def loss():
            fwd = vae_forward(vae, feats, eps)
            recon, kl = vae_losses(fwd, feats)
            return w_recon * recon + w_kl * kl

        analytic = vae_backward(vae, feats, vae_forward(vae, feats, eps), w_recon, w_kl)
        numeric = finite_diff_grads(loss, params)
        assert rel_grad_err(analytic, numeric) < 1e-4


def test_generate_features_zero_decoder_gives_bias():
    rng = np.random.default_rng(1)
    vae = vae_init(6, rng, latent_dim=3, hidden=8)
    for layer in vae.decoder.layers:
        layer.w.fill(0.0)
        layer.b.fill(0.0)
    vae.decoder.layers[-1].b[:] = np.arange(6.0)
    out = generate_features(vae, 10, rng)
    assert np.allclose(out, np.arange(6.0))


def test_generated_features_feed_pseudo_label():
    model = _tiny_model()
    rng = np.random.default_rng(2)
    feats = generate_features(model.vae, 7, rng)
    logits = pseudo_label(model, feats)
    assert [l.shape for l in logits] == [(7, 3), (7, 16), (7, 16)]
    assert all(np.isfinite(l).all() for l in logits)
    again = pseudo_label(model, feats)
    assert all(np.array_equal(a, b) for a, b in zip(logits, again))


def test_vae_trained_on_point_mass_generates_near_that_point():
    rng = np.random.default_rng(3)
    target = 0.25 * rng.standard_normal(6)
    vae = vae_init(6, rng, latent_dim=2, hidden=24)
    params = vae_params_list(vae)
    adam = nets.adam_init(params)
    batch = np.tile(target, (32, 1))
    for _ in range(500):
        eps = rng.standard_normal((32, 2))
        fwd = vae_forward(vae, batch, eps)
        nets.adam_step(params, vae_backward(vae, batch, fwd, 200.0, 5.0), adam)
    gen = generate_features(vae, 256, rng)
    assert np.linalg.norm(gen - target, axis=1).mean() < 0.1


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def test_cross_entropy_of_matching_distributions_is_entropy_with_zero_grad():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 5))
    probs = np.exp(nets.log_softmax(logits))
    ce, dlogits = softmax_cross_entropy(logits, probs)
    assert ce == pytest.approx(float(nets.entropy_from_logits(logits).mean()))
    assert np.allclose(dlogits, 0.0, atol=1e-12)


def test_distillation_loss_decreases_monotonically():
    monotone = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        teacher = _tiny_model(seed=100 + seed)
        student = _tiny_model(seed=seed)
        inputs = rng.standard_normal((16, 6))
        buf = _fill_buffer(teacher, inputs, rng)
        cfg = SleepConfig(
            w_imitation=50.0, w_recon=1e-9, w_kl=1e-9, w_value=0.0,
            iterations=100, batch=16, sleeps_per_lb=2,
        )
        report = consolidate(
            student, buf, RandomReplayBuffer(), cfg, sleep_index=1,
            decode_fn=CODEC.decode, input_fn=_policy_input,
            rng=np.random.default_rng(seed),
        )
        # fixed batch (whole buffer): imitation CE = KL to teacher + const entropy
        ce = np.array(report["curves"]["imitation"])
        if np.all(np.diff(ce) <= 1e-9):
            monotone += 1
    assert monotone >= 19


# ---------------------------------------------------------------------------
# Consolidation protocol
# ---------------------------------------------------------------------------


def test_consolidate_stream_counters_and_exemplar_intake():
    rng = np.random.default_rng(5)
    teacher = _tiny_model(seed=7)
    inputs = rng.standard_normal((20, 6))
    cfg = SleepConfig(iterations=3, batch=8)

    buf = _fill_buffer(teacher, inputs, rng)
    replay = RandomReplayBuffer()
    report = consolidate(
        _tiny_model(seed=8), buf, replay, cfg, sleep_index=1,
        decode_fn=CODEC.decode, input_fn=_policy_input, rng=rng,
    )
    assert not report["skipped"] and not report["gen_replay_active"]
    assert report["samples"] == {"wake": 24, "generated": 0, "replay": 0}
    assert report["exemplars_added"] == 20 and len(replay) == 20
    assert len(report["curves"]["total"]) == 3

    report2 = consolidate(
        _tiny_model(seed=9), buf, replay, cfg, sleep_index=2,
        decode_fn=CODEC.decode, input_fn=_policy_input, rng=rng,
    )
    assert report2["gen_replay_active"]
    assert report2["samples"]["generated"] == 24
    assert report2["samples"]["replay"] > 0  # replay stream now has exemplars


def test_consolidate_skips_on_empty_wake_buffer():
    model = _tiny_model()
    before = [p.copy() for p in policy_params(model.policy)]
    replay = RandomReplayBuffer()
    report = consolidate(
        model, WakeBuffer(capacity=10), replay, SleepConfig(iterations=2, batch=4),
        sleep_index=1, decode_fn=CODEC.decode, input_fn=_policy_input,
        rng=np.random.default_rng(0),
    )
    assert report["skipped"] and report["reason"] == "empty wake buffer"
    assert all(np.array_equal(a, b) for a, b in zip(before, policy_params(model.policy)))
    assert len(replay) == 0


def test_teacher_labels_frozen_during_consolidation():
    rng = np.random.default_rng(6)
    model = _tiny_model(seed=11)
    teacher = eigentask_clone(model)
    feats = rng.standard_normal((5, 8))
    before = pseudo_label(teacher, feats)
    buf = _fill_buffer(model, rng.standard_normal((12, 6)), rng)
    consolidate(
        model, buf, RandomReplayBuffer(), SleepConfig(iterations=20, batch=8),
        sleep_index=2, decode_fn=CODEC.decode, input_fn=_policy_input, rng=rng,
    )
    after = pseudo_label(teacher, feats)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_sleep_config_validation():
    with pytest.raises(ValueError):
        SleepConfig(w_imitation=0.0)
    with pytest.raises(ValueError):
        SleepConfig(w_recon=-1.0)
    with pytest.raises(ValueError):
        SleepConfig(iterations=0)
    with pytest.raises(ValueError):
        SleepConfig(eigentask_count=0)
    assert SleepConfig().sleeps_per_lb == 2


# ---------------------------------------------------------------------------
# Skill selection and weight copying
# ---------------------------------------------------------------------------


def _greedy_policy_fn(model):
    def act(planes):
        vec = _policy_input(planes, {})[None, :]
        feats = nets.mlp_forward(model.policy.extractor, vec).out
        a = greedy_action(heads_logits(model.policy, feats))[0]
        return (int(a[0]), int(a[1]), int(a[2]))

    return act


def test_skill_select_single_model_skips_evaluation():
    def explode(model):
        raise AssertionError("should not evaluate a lone eigentask")

    assert skill_select([_tiny_model()], explode) == 0


def test_skill_select_tie_takes_lowest_index():
    models = [_tiny_model(seed=1), _tiny_model(seed=2)]
    assert skill_select(models, lambda m: 3.25) == 0
    with pytest.raises(ValueError):
        skill_select([], lambda m: 0.0)


def test_skill_select_planted_winner():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        attacker = eigentask_init(768, rng, hidden=[16], feature_dim=8, latent_dim=4)
        idler = eigentask_clone(attacker)
        attacker.policy.func_head.b[1] += 10.0  # always attack
        idler.policy.func_head.b[2] += 10.0  # always hold still

        def evaluate(model, seed=seed):
            res = run_eval_block(_greedy_policy_fn(model), ["defeat_zb_one"], 5, seed)
            return res["defeat_zb_one"]

        if skill_select([idler, attacker], evaluate) == 1:
            wins += 1
    assert wins >= 9


def test_copy_weights_transfers_heads_and_resets_optimizer(tmp_path):
    rng = np.random.default_rng(13)
    src = _tiny_model(seed=21)
    dst = policy_init(6, rng, hidden=[12], feature_dim=8)
    adam = nets.adam_init(policy_params(dst))
    # dirty the optimizer state
    nets.adam_step(policy_params(dst), [np.ones_like(p) for p in policy_params(dst)], adam)
    assert adam.t == 1

    vae_before = [p.copy() for p in vae_params_list(src.vae)]
    copy_weights(src, dst, adam)
    for s, d in zip(policy_params(src.policy), policy_params(dst)):
        assert np.array_equal(s, d)
    assert adam.t == 0
    assert all(np.all(m == 0) and np.all(v == 0) for m, v in zip(adam.m, adam.v))
    assert all(np.array_equal(a, b) for a, b in zip(vae_before, vae_params_list(src.vae)))

    x = rng.standard_normal((3, 6))
    src_feats = nets.mlp_forward(src.policy.extractor, x).out
    dst_feats = nets.mlp_forward(dst.extractor, x).out
    assert np.array_equal(src_feats, dst_feats)
    for a, b in zip(heads_logits(src.policy, src_feats), heads_logits(dst, dst_feats)):
        assert np.array_equal(a, b)

    # copying through a serialized snapshot lands on identical weights
    path = tmp_path / "model.bin"
    nets.save_arrays(path, policy_params(src.policy))
    other = policy_init(6, np.random.default_rng(99), hidden=[12], feature_dim=8)
    nets.assign_arrays(policy_params(other), nets.load_arrays(path))
    for a, b in zip(policy_params(other), policy_params(dst)):
        assert np.array_equal(a, b)
