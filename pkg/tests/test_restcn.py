import numpy as np
import pytest

from actioncaps import autodiff as ad
from actioncaps import restcn


def tiny_cfg(**kw):
    defaults = dict(kernel=3, channels=(2, 2, 3, 3), pool_window=2)
    defaults.update(kw)
    return restcn.ResTcnConfig(**defaults)


def zero_params(params):
    for conv in params.values():
        conv["w"].data[:] = 0.0
        conv["b"].data[:] = 0.0
    return params


def test_residual_passthrough_with_zero_convs():
    cfg = tiny_cfg(channels=(3,))
    rng = np.random.default_rng(0)
    params = zero_params(restcn.init_block_params(rng, 3, 3, cfg.kernel))
    assert "proj" not in params  # identity shortcut when widths match
    x = ad.tensor(np.ones((2, 3, 8, 4)))
    y = restcn.res_tcn_block(x, params, cfg)
    assert y.shape == (2, 3, 4, 4)
    assert np.all(y.data == 1.0)


def test_joint_axis_untouched():
    cfg = tiny_cfg()
    rng = np.random.default_rng(1)
    params = restcn.init_stack_params(rng, 3, cfg)
    x = ad.tensor(rng.normal(size=(1, 3, 16, 7)))
    feats = restcn.stage_features(x, params, cfg)
    assert [f.shape[3] for f in feats] == [7, 7, 7, 7]
    assert [f.shape[2] for f in feats] == [8, 4, 2, 1]


def test_default_stage_extents_from_128():
    cfg = tiny_cfg(channels=(2, 2, 2, 2))
    rng = np.random.default_rng(2)
    params = restcn.init_stack_params(rng, 3, cfg)
    x = ad.tensor(rng.normal(size=(1, 3, 128, 4)))
    feats = restcn.stage_features(x, params, cfg)
    assert [f.shape[2] for f in feats] == [64, 32, 16, 8]


def test_block_matches_step_by_step_composition():
    cfg = tiny_cfg(channels=(4,))
    rng = np.random.default_rng(3)
    params = restcn.init_block_params(rng, 2, 4, cfg.kernel)
    x = ad.tensor(rng.normal(size=(1, 2, 8, 3)))
    got = restcn.res_tcn_block(x, params, cfg)

    h = ad.relu(ad.conv_temporal(x, params["conv1"]["w"], params["conv1"]["b"], padding=1))
    h = ad.relu(ad.conv_temporal(h, params["conv2"]["w"], params["conv2"]["b"], padding=1))
    h = ad.conv_temporal(h, params["conv3"]["w"], params["conv3"]["b"], padding=1)
    short = ad.conv_temporal(x, params["proj"]["w"], params["proj"]["b"], padding=0)
    want = ad.maxpool_temporal(ad.relu(h + short), 2)
    assert np.array_equal(got.data, want.data)


def test_zero_input_zero_features():
    cfg = tiny_cfg()
    rng = np.random.default_rng(4)
    params = restcn.init_stack_params(rng, 3, cfg)
    for block in params:
        for conv in block.values():
            conv["b"].data[:] = 0.0
    x = ad.tensor(np.zeros((1, 3, 16, 4)))
    feats = restcn.stage_features(x, params, cfg)
    for f in feats:
        assert np.all(f.data == 0.0)


def test_joint_permutation_equivariance_bit_exact():
    cfg = tiny_cfg()
    rng = np.random.default_rng(5)
    params = restcn.init_stack_params(rng, 3, cfg)
    x = rng.normal(size=(1, 3, 16, 6))
    perm = rng.permutation(6)
    base = restcn.stage_features(ad.tensor(x), params, cfg)
    permuted = restcn.stage_features(ad.tensor(x[:, :, :, perm]), params, cfg)
    for f0, f1 in zip(base, permuted):
        assert np.array_equal(f0.data[:, :, :, perm], f1.data)


def test_prepool_window_swap_leaves_block_output_unchanged():
    cfg = tiny_cfg(channels=(2,))
    rng = np.random.default_rng(6)
    params = restcn.init_block_params(rng, 2, 2, cfg.kernel)
    x = ad.tensor(rng.normal(size=(1, 2, 8, 3)))
    pre = restcn.block_prepool(x, params, cfg)
    pooled = ad.maxpool_temporal(pre, cfg.pool_window).data
    swapped = pre.data.copy()
    swapped[:, :, [2, 3], :] = swapped[:, :, [3, 2], :]
    pooled_swapped = ad.maxpool_temporal(ad.tensor(swapped), cfg.pool_window).data
    assert np.array_equal(pooled, pooled_swapped)


def test_four_block_stack_gradient_check():
    cfg = tiny_cfg(channels=(2, 2, 2, 2))
    rng = np.random.default_rng(7)
    params = restcn.init_stack_params(rng, 2, cfg)
    x = ad.tensor(rng.normal(size=(1, 2, 16, 2)))

    leaves = [x]
    for block in params:
        for conv in block.values():
            # generic biases keep finite differences off the relu kinks
            conv["b"].data[:] = rng.normal(0.0, 0.1, size=conv["b"].shape)
            leaves.extend([conv["w"], conv["b"]])

    def loss():
        feats = restcn.stage_features(x, params, cfg)
        total = ad.reduce_sum(ad.squash(feats[0]))
        for f in feats[1:]:
            total = total + ad.reduce_sum(ad.squash(f))
        return total

    err = ad.finite_difference_check_many(loss, leaves, eps=1e-5)
    assert err < 1e-4


def test_batch_norm_switch_runs():
    cfg = tiny_cfg(channels=(3, 3), batch_norm=True)
    rng = np.random.default_rng(8)
    params = restcn.init_stack_params(rng, 3, cfg)
    x = ad.tensor(rng.normal(size=(2, 3, 8, 4)))
    feats = restcn.stage_features(x, params, cfg)
    assert feats[-1].shape == (2, 3, 2, 4)
    assert np.all(np.isfinite(feats[-1].data))


def test_config_validation():
    with pytest.raises(Exception):
        restcn.ResTcnConfig(kernel=4)
    with pytest.raises(Exception):
        restcn.ResTcnConfig(channels=())
