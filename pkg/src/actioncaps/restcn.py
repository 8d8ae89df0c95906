"""Residual temporal-convolution blocks over per-joint feature columns.

Each block runs three same-padded k x 1 temporal convolutions with shared
weights across all joint slots, adds a residual branch (1 x 1 projection when
the channel counts differ, identity otherwise), applies the activation, and
max-pools the temporal axis. Nothing pools or strides along the joint axis,
so joint identity is preserved through every stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class ResTcnConfig:
    kernel: int = 9
    channels: tuple = (64, 64, 128, 256)
    pool_window: int = 2
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel must be odd and >= 1, got {self.kernel}")
        if not self.channels:
            raise ContractError("channels must be nonempty")
        if self.pool_window < 1:
            raise ContractError("pool_window must be >= 1")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")


def init_block_params(rng, c_in, c_out, kernel):
    """He-scaled kernels for the three convs plus the residual projection."""
    def conv(ci, co, k):
        std = np.sqrt(2.0 / (ci * k))
        return {
            "w": ad.tensor(rng.normal(0.0, std, size=(co, ci, k, 1))),
            "b": ad.tensor(np.zeros(co)),
        }

    params = {
        "conv1": conv(c_in, c_out, kernel),
        "conv2": conv(c_out, c_out, kernel),
        "conv3": conv(c_out, c_out, kernel),
    }
    if c_in != c_out:
        params["proj"] = conv(c_in, c_out, 1)
    return params


def _batch_norm(x, gamma, beta):
    # per-channel normalization over batch, time, and joint axes
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    centered = x + ad.tensor(-mu)
    scaled = centered * ad.tensor(1.0 / np.sqrt(var + 1e-5))
    return scaled * gamma + beta


def block_prepool(x, params, cfg):
    """Everything before the pool: conv stack + residual + activation."""
    h = ad.relu(ad.conv_temporal(x, params["conv1"]["w"], params["conv1"]["b"]))
    h = ad.relu(ad.conv_temporal(h, params["conv2"]["w"], params["conv2"]["b"]))
    h = ad.conv_temporal(h, params["conv3"]["w"], params["conv3"]["b"])
    if "proj" in params:
        shortcut = ad.conv_temporal(x, params["proj"]["w"], params["proj"]["b"], padding=0)
    else:
        shortcut = x
    out = ad.relu(h + shortcut)
    if cfg.batch_norm:
        out = _batch_norm(out, params["bn_gamma"], params["bn_beta"])
    return out


def res_tcn_block(x, params, cfg):
    """One block: (B, C_in, T, V) -> (B, C_out, T // pool, V)."""
    return ad.maxpool_temporal(block_prepool(x, params, cfg), cfg.pool_window)


def init_stack_params(rng, c_in, cfg):
    params = []
    prev = c_in
    for c_out in cfg.channels:
        block = init_block_params(rng, prev, c_out, cfg.kernel)
        if cfg.batch_norm:
            block["bn_gamma"] = ad.tensor(np.ones((1, c_out, 1, 1)))
            block["bn_beta"] = ad.tensor(np.zeros((1, c_out, 1, 1)))
        params.append(block)
        prev = c_out
    return params


def stage_features(x, stack_params, cfg):
    """Outputs of every block in sequence, shallowest first.

    With the default pool window the temporal extents are T/2, T/4, T/8 and
    T/16 of the network input; the joint axis is untouched throughout.
    """
    feats = []
    h = x
    for params in stack_params:
        h = res_tcn_block(h, params, cfg)
        feats.append(h)
    return feats
