import json

import numpy as np
import pytest

from ivseg import env, expert, nn
from ivseg.synth import make_sample
from ivseg.trainer import (
    TAG_INIT_CONF,
    TAG_INIT_SEG,
    TrainConfig,
    _init_adam,
    derived_rng,
    evaluate,
    load_training_checkpoint,
    rollout_episode,
    segmentation_gradients,
    split_manifest,
    train,
    update_confidence,
    update_segmentation,
)

SHAPE = (10, 10, 6)


def tiny_cfg(**kw):
    base = dict(
        epochs=2, seed=11, checkpoint_every=0, eval_every=0,
        seg_shared_widths=(2, 2, 4), seg_head_widths=(2, 2),
        conf_widths=(2, 2, 2, 2, 2, 2),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def nets():
    cfg = tiny_cfg()
    seg = nn.xavier_init(cfg.seg_spec(), derived_rng(cfg.seed, TAG_INIT_SEG))
    conf = nn.xavier_init(cfg.conf_spec(), derived_rng(cfg.seed, TAG_INIT_CONF))
    return cfg, seg, conf


@pytest.fixture(scope="module")
def samples():
    return [make_sample(21, i, SHAPE) for i in range(3)]


def test_config_json_roundtrip():
    cfg = tiny_cfg(labeled_fraction=0.5, advantage_mode="mean_reward")
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(labeled_fraction=0.0)
    with pytest.raises(ValueError):
        tiny_cfg(schedule=expert.HintSchedule(points_per_step=(5, 5)))


def test_split_deterministic_partition():
    a_lab, a_unl = split_manifest(10, 0.25, seed=5)
    b_lab, b_unl = split_manifest(10, 0.25, seed=5)
    assert a_lab == b_lab and a_unl == b_unl
    assert len(a_lab) == 2  # round(0.25*10) with banker's rounding, min 1
    assert sorted(a_lab + a_unl) == list(range(10))
    full, empty = split_manifest(7, 1.0, seed=5)
    assert full == list(range(7)) and empty == []


def test_rollout_trace_contract(nets, samples):
    cfg, seg, conf = nets
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                            cfg, derived_rng(0, 1), mode="sample")
    T = cfg.episode.T
    assert len(trace.probs) == T + 1
    assert len(trace.actions) == len(trace.rewards) == len(trace.confs) == T
    assert (trace.probs[0] == 0.5).all()
    for p in trace.probs:
        assert p.min() >= 0.0 and p.max() <= 1.0
        assert np.isfinite(p).all()
    for c in trace.confs:
        assert c.min() > 0.0 and c.max() < 1.0
    total = sum(len(pts) for pts in trace.hint_points)
    assert total == cfg.schedule.total == 45


def test_rollout_degenerate_schedule(nets, samples):
    cfg, seg, conf = nets
    cfg0 = tiny_cfg(schedule=expert.HintSchedule(points_per_step=(0, 0, 0, 0, 0)))
    trace = rollout_episode(seg, cfg0.seg_spec(), conf, cfg0.conf_spec(), samples[0],
                            cfg0, derived_rng(0, 2), mode="sample")
    assert len(trace.actions) == 5
    assert not trace.hints[0].any()


def test_rollout_replay_oracle(nets, samples):
    # replaying the stored actions through apply_actions reproduces stored p
    cfg, seg, conf = nets
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[1],
                            cfg, derived_rng(0, 3), mode="sample")
    state = env.EpisodeState.initial(samples[1].image)
    for t, actions in enumerate(trace.actions):
        state = env.apply_actions(state, actions)
        np.testing.assert_array_equal(state.prob, trace.probs[t + 1])


def test_value_before_policy_order(nets, samples):
    cfg, seg, conf = nets
    seg = {k: v.copy() for k, v in seg.items()}
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                            cfg, derived_rng(0, 4), mode="sample")
    adam_seg, _ = _init_adam(seg, conf, cfg.seg_spec(), cfg.lr)
    result = update_segmentation(seg, cfg.seg_spec(), trace, cfg, adam_seg)
    assert result.applied_order.index("value") < result.applied_order.index("policy")


def test_value_grads_independent_of_policy_weights(nets, samples):
    # changing only the policy-gradient weighting leaves value-head grads alone
    cfg, seg, conf = nets
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                            cfg, derived_rng(0, 5), mode="sample")
    g1, _, _ = segmentation_gradients(seg, cfg.seg_spec(), trace, cfg)
    cfg2 = tiny_cfg(advantage_norm=False, entropy_coef=0.0)
    g2, _, _ = segmentation_gradients(seg, cfg2.seg_spec(), trace, cfg2)
    for name in nn.group_names(cfg.seg_spec(), "value"):
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-6, atol=1e-9)


def test_masked_voxels_contribute_zero_gradient(nets, samples):
    cfg, seg, conf = nets
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[2],
                            cfg, derived_rng(0, 6), mode="sample", labeled=False,
                            delta=0.85)
    # all-zero mask (the delta -> 1 limit) kills every gradient
    trace.grad_masks = [np.zeros(SHAPE, np.uint8) for _ in range(cfg.episode.T)]
    grads, pl, vl = segmentation_gradients(seg, cfg.seg_spec(), trace, cfg)
    assert pl == 0.0 and vl == 0.0
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-12)
    # masking equals zeroing the same voxels' per-voxel weights: spot check
    half = np.zeros(SHAPE, np.uint8)
    half.ravel()[: half.size // 2] = 1
    trace.grad_masks = [half.copy() for _ in range(cfg.episode.T)]
    g_half, _, _ = segmentation_gradients(seg, cfg.seg_spec(), trace, cfg)
    assert any(np.abs(g).max() > 0 for g in g_half.values())


def test_unlabeled_rollout_uses_simulated_labels(nets, samples):
    cfg, seg, conf = nets
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                            cfg, derived_rng(0, 7), mode="sample", labeled=False,
                            delta=0.9)
    assert trace.sim_labels is not None and len(trace.sim_labels) == cfg.episode.T
    for t, (sim, conf_map, actions) in enumerate(
        zip(trace.sim_labels, trace.confs, trace.actions)
    ):
        from ivseg.confidence import gradient_mask, simulated_label

        np.testing.assert_array_equal(sim, simulated_label(actions.values, conf_map))
        np.testing.assert_array_equal(trace.grad_masks[t], gradient_mask(conf_map, 0.9))
        # gains computed against the simulated label, not the true one
        want = env.gain_map(trace.probs[t], trace.probs[t + 1], sim)
        np.testing.assert_allclose(trace.gains[t], want, atol=1e-7)


def test_confidence_overfits_one_batch(nets, samples):
    cfg, seg, conf = nets
    conf = {k: v.copy() for k, v in conf.items()}
    trace = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                            cfg, derived_rng(0, 8), mode="sample")
    _, adam_conf = _init_adam(seg, conf, cfg.seg_spec(), lr=3e-3)
    losses = []
    for _ in range(50):
        # refresh caches against current params before each step
        t2 = rollout_episode(seg, cfg.seg_spec(), conf, cfg.conf_spec(), samples[0],
                             cfg, derived_rng(0, 8), mode="sample")
        losses.append(update_confidence(conf, cfg.conf_spec(), t2, t2.label, adam_conf, cfg))
    assert losses[-1] < losses[0]


def test_train_deterministic_and_resume(tmp_path, samples):
    cfg = tiny_cfg(epochs=4, checkpoint_every=2)
    r1 = train(samples, cfg, tmp_path / "a")
    r2 = train(samples, cfg, tmp_path / "b")
    assert [rec.to_dict() for rec in r1.log] == [rec.to_dict() for rec in r2.log]
    t1, _ = __import__("ivseg.volume", fromlist=["load_checkpoint"]).load_checkpoint(r1.checkpoint)
    t2, _ = __import__("ivseg.volume", fromlist=["load_checkpoint"]).load_checkpoint(r2.checkpoint)
    for k in t1:
        assert np.array_equal(t1[k], t2[k]), k

    resumed = train(samples, cfg, tmp_path / "c", resume=tmp_path / "a" / "epoch00002.ckpt")
    tail = [rec.to_dict() for rec in r1.log[2:]]
    assert [rec.to_dict() for rec in resumed.log] == tail
    t3, _ = __import__("ivseg.volume", fromlist=["load_checkpoint"]).load_checkpoint(resumed.checkpoint)
    for k in t1:
        assert np.array_equal(t1[k], t3[k]), k


def test_train_full_fraction_has_no_unlabeled(tmp_path, samples):
    cfg = tiny_cfg(epochs=1)
    train(samples, cfg, tmp_path / "full")
    meta = json.loads((tmp_path / "full" / "train_meta.json").read_text())
    assert meta["unlabeled"] == 0
    assert meta["labeled"] == len(samples)


def test_train_rejects_empty_manifest(tmp_path):
    with pytest.raises(ValueError):
        train([], tiny_cfg(), tmp_path / "x")


def test_evaluate_deterministic_and_telescoping(tmp_path, samples):
    cfg = tiny_cfg(epochs=1)
    res = train(samples, cfg, tmp_path / "t")
    seg, conf, _, _, cfg2, _ = load_training_checkpoint(res.checkpoint)
    rep1, rows1 = evaluate(seg, cfg2.seg_spec(), conf, cfg2.conf_spec(), samples, cfg2, seed=9)
    rep2, rows2 = evaluate(seg, cfg2.seg_spec(), conf, cfg2.conf_spec(), samples, cfg2, seed=9)
    assert rows1 == rows2
    for reps in rep1:
        deltas = [reps[t].dice - reps[t - 1].dice for t in range(1, len(reps))]
        assert abs(sum(deltas) - (reps[-1].dice - reps[0].dice)) < 1e-12
    # workers must not change results
    rep3, rows3 = evaluate(seg, cfg2.seg_spec(), conf, cfg2.conf_spec(), samples, cfg2,
                           seed=9, workers=2)
    assert rows3 == rows1


def test_checkpoint_spec_mismatch_detected(tmp_path, samples):
    cfg = tiny_cfg(epochs=1)
    res = train(samples, cfg, tmp_path / "m")
    from ivseg.volume import load_checkpoint, save_checkpoint

    tensors, meta = load_checkpoint(res.checkpoint)
    victim = next(k for k in tensors if k.startswith("seg.") and k.endswith(".w"))
    tensors[victim] = tensors[victim][:, :1]  # corrupt a shape
    save_checkpoint(tmp_path / "corrupt.ckpt", tensors, meta)
    with pytest.raises(ValueError):
        load_training_checkpoint(tmp_path / "corrupt.ckpt")
