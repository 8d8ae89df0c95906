import numpy as np
import pytest

from actioncaps import autodiff as ad
from actioncaps import capsules, checkpoint, model, restcn
from actioncaps.config import ModelConfig
from actioncaps.errors import ContractError


def tiny_cfg(**kw):
    defaults = dict(
        num_classes=2,
        joints=4,
        subjects=2,
        frames=16,
        channels=(2, 2, 2, 2),
        kernel=3,
        primary_dim=2,
        caps_dim=3,
        routing_iters=2,
        stages=2,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def rand_input(rng, cfg, batch=1):
    return ad.tensor(
        rng.normal(size=(batch, cfg.in_channels, cfg.frames, cfg.joints, cfg.subjects))
    )


def test_single_stage_final_equals_stage_scores():
    cfg = tiny_cfg(stages=1)
    params = model.init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    scores, preds = model.forward(rand_input(rng, cfg), params, cfg)
    assert len(preds) == 1
    assert np.array_equal(scores.data, preds[0].scores.data)


def test_scores_shape_and_bound():
    cfg = tiny_cfg(stages=2)
    params = model.init_params(cfg, seed=0)
    rng = np.random.default_rng(2)
    scores, preds = model.forward(rand_input(rng, cfg, batch=3), params, cfg)
    assert scores.shape == (3, cfg.num_classes)
    # each concat capsule has norm < sqrt(2), summed over S stages
    assert np.all(scores.data >= 0.0)
    assert np.all(scores.data < cfg.stages * np.sqrt(2.0))


def test_forward_matches_hand_composed_pipeline():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=3)
    rng = np.random.default_rng(4)
    x = rand_input(rng, cfg)
    scores, preds = model.forward(x, params, cfg)

    # step-by-step recomposition from the module primitives
    b = x.shape[0]
    v, m = cfg.joints, cfg.subjects
    caps_cfg = model.capsule_config(cfg)
    folded = ad.reshape(ad.transpose(x, (0, 1, 2, 4, 3)), (b, 3, cfg.frames, m * v))
    feats = restcn.stage_features(folded, params.blocks, model.restcn_config(cfg))
    stage_scores = []
    for feat, paths in zip(feats[-cfg.stages:], params.stages):
        glob_states = capsules.capsule_network(
            feat, paths["glob"], caps_cfg, subject_blocks=m
        )
        norms = []
        for mi in range(m):
            block = ad.narrow(feat, 3, mi * v, v)
            u = capsules.form_primary_capsules(
                block, paths["pers"]["proj_w"], paths["pers"]["proj_b"]
            )
            votes = capsules.compute_votes(u, paths["pers"]["votes_w"])
            state = capsules.dynamic_routing(votes, paths["pers"]["logit_init"], caps_cfg)
            joint = ad.concat([state.capsules, glob_states.capsules], axis=2)
            norms.append(ad.norm_last(joint))
        stage_scores.append((norms[0] + norms[1]) * 0.5)
    want = stage_scores[0] + stage_scores[1]
    assert np.allclose(scores.data, want.data, atol=1e-12)


def test_subject_swap_scores_bit_identical():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=5)
    rng = np.random.default_rng(6)
    raw = rng.normal(size=(2, 3, cfg.frames, cfg.joints, 2))
    scores_a, preds_a = model.forward(ad.tensor(raw), params, cfg)
    scores_b, preds_b = model.forward(ad.tensor(raw[..., ::-1]), params, cfg)
    assert np.array_equal(scores_a.data, scores_b.data)
    # personalized routing states exchange wholesale
    for pa, pb in zip(preds_a, preds_b):
        assert np.array_equal(
            pa.personalized[0].couplings.data, pb.personalized[1].couplings.data
        )
        assert np.array_equal(
            pa.personalized[1].capsules.data, pb.personalized[0].capsules.data
        )


def test_forward_deterministic():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=7)
    rng = np.random.default_rng(8)
    x = rand_input(rng, cfg, batch=2)
    a, _ = model.forward(x, params, cfg)
    b, _ = model.forward(x, params, cfg)
    assert np.array_equal(a.data, b.data)


def test_zero_feature_weights_give_constant_scores():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=9)
    for name, t in params.registry.items():
        if name.startswith("block"):
            t.data[:] = 0.0
    rng = np.random.default_rng(10)
    s1, _ = model.forward(rand_input(rng, cfg), params, cfg)
    s2, _ = model.forward(rand_input(rng, cfg), params, cfg)
    assert np.array_equal(s1.data, s2.data)


def test_end_to_end_gradient_check():
    cfg = tiny_cfg(joints=3, subjects=1, stages=2)
    params = model.init_params(cfg, seed=11)
    rng = np.random.default_rng(12)
    for name, t in params.registry.items():
        if name.endswith(".b"):
            t.data[:] = rng.normal(0.0, 0.1, size=t.shape)
    x = rand_input(rng, cfg)
    labels = np.array([1])

    def loss():
        scores, _ = model.forward(x, params, cfg)
        return model.margin_loss(scores, labels, num_stages=cfg.stages)

    leaves = [x] + params.tensors()
    err = ad.finite_difference_check_many(loss, leaves, eps=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# losses and voting


def test_margin_loss_zero_when_margins_met():
    scores = ad.tensor(np.array([[0.95, 0.05], [0.02, 0.99]]))
    loss = model.margin_loss(scores, [0, 1], num_stages=1)
    assert loss.item() == 0.0


def test_margin_loss_all_zero_scores():
    scores = ad.tensor(np.zeros((3, 4)))
    loss = model.margin_loss(scores, [0, 1, 2], num_stages=1)
    assert abs(loss.item() - 0.81) < 1e-12


def test_margin_loss_matches_hand_evaluation():
    rng = np.random.default_rng(13)
    raw = rng.uniform(0.0, 2.0, size=(4, 3))
    labels = [0, 2, 1, 1]
    stages = 2
    got = model.margin_loss(ad.tensor(raw), labels, num_stages=stages).item()
    want = 0.0
    for b in range(4):
        for k in range(3):
            a = raw[b, k] / stages
            if k == labels[b]:
                want += max(0.0, 0.9 - a) ** 2
            else:
                want += 0.5 * max(0.0, a - 0.1) ** 2
    want /= 4
    assert abs(got - want) < 1e-12


def test_margin_loss_label_out_of_range():
    with pytest.raises(ContractError):
        model.margin_loss(ad.tensor(np.zeros((1, 2))), [5])


def test_cross_entropy_loss_runs_and_differentiates():
    rng = np.random.default_rng(14)
    scores = ad.tensor(rng.uniform(0, 1, size=(2, 3)))

    def loss():
        return model.cross_entropy_loss(scores, [0, 2])

    assert ad.finite_difference_check_many(loss, [scores], eps=1e-5) < 1e-5


def test_soft_vote():
    a = ad.tensor([[1.0, 2.0]])
    b = ad.tensor([[0.5, 0.25]])
    assert np.array_equal(model.soft_vote([a]).data, a.data)
    assert np.array_equal(model.soft_vote([a, b]).data, [[1.5, 2.25]])
    scaled = [a * 3.0, b * 3.0]
    assert np.argmax(model.soft_vote(scaled).data) == np.argmax(
        model.soft_vote([a, b]).data
    )
    with pytest.raises(ContractError):
        model.soft_vote([])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=15)
    path = tmp_path / "model.acpk"
    checkpoint.save_checkpoint(params, path)
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.cfg == cfg
    assert list(loaded.registry) == list(params.registry)
    for name in params.registry:
        assert np.array_equal(loaded.registry[name].data, params.registry[name].data)

    rng = np.random.default_rng(16)
    x = rand_input(rng, cfg, batch=2)
    s0, _ = model.forward(x, params, cfg)
    s1, _ = model.forward(x, loaded, cfg)
    assert np.array_equal(s0.data, s1.data)


def test_checkpoint_save_is_deterministic(tmp_path):
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=17)
    p1, p2 = tmp_path / "a.acpk", tmp_path / "b.acpk"
    checkpoint.save_checkpoint(params, p1)
    checkpoint.save_checkpoint(params, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from actioncaps.errors import DataError

    path = tmp_path / "bad.acpk"
    path.write_bytes(b"WRONG" + b"\x00" * 32)
    with pytest.raises(DataError, match="magic"):
        checkpoint.load_checkpoint(path)
    path.write_bytes(b"ACPK1" + b"\xff\xff\xff\x7f")
    with pytest.raises(DataError):
        checkpoint.load_checkpoint(path)
