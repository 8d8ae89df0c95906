"""Capsule formation and iterative dynamic routing.

One primary capsule per joint slot encodes that joint's temporal features.
Votes from primary to class capsules are refined over ``routing_iters``
iterations: couplings are a softmax over the class axis of per-slot logits,
class capsules are the squashed coupling-weighted vote sums, and logits grow
by a damped vote-capsule agreement term. The loop is fully unrolled, so
gradients flow through every iteration, including into the learned logit
initializer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class CapsuleConfig:
    num_classes: int
    primary_dim: int = 8
    caps_dim: int = 16
    routing_iters: int = 2
    alpha: float = 0.5

    def __post_init__(self):
        if min(self.num_classes, self.primary_dim, self.caps_dim) < 1:
            raise ContractError("capsule dimensions must be >= 1")
        if self.routing_iters < 1:
            raise ContractError("routing_iters must be >= 1")
        # alpha=0 is allowed here so the no-refinement diagnostic can run;
        # training configs keep the step size strictly positive.
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class RoutingSnapshot:
    """Per-iteration copies of the routing bookkeeping (plain arrays)."""

    logits: np.ndarray  # (B, V', N)
    couplings: np.ndarray  # (B, V', N)
    capsules: np.ndarray  # (B, N, D)


@dataclass
class RoutingState:
    votes: ad.DiffTensor  # (B, V', N, D)
    logits: ad.DiffTensor  # (B, V', N), final iteration
    couplings: ad.DiffTensor  # (B, V', N), final iteration
    capsules: ad.DiffTensor  # (B, N, D), final iteration
    trace: list = field(default_factory=list)  # one RoutingSnapshot per iteration
    primary: ad.DiffTensor | None = None  # (B, V', P) when the caller provides it


def form_primary_capsules(features, proj_w, proj_b):
    """(B, C, T, V) features -> (B, V, P) capsules.

    Each joint slot's C x T feature column is flattened, sent through one
    shared affine map, and squashed.
    """
    b, c, t, v = features.shape
    cols = ad.reshape(ad.transpose(features, (0, 3, 1, 2)), (b, v, c * t))
    return ad.squash(ad.linear(cols, proj_w, proj_b))


def compute_votes(u, w):
    """votes[b, i, j, :] = u[b, i, :] @ w[i, j, :, :]."""
    if u.shape[1] != w.shape[0] or u.shape[2] != w.shape[2]:
        raise DimensionError(
            f"compute_votes: primaries {u.shape} incompatible with transforms {w.shape}"
        )
    return ad.contract("bip,ijpd->bijd", u, w)


def capsule_lengths(v):
    """Class scores: Euclidean norm of each capsule along its last axis."""
    return ad.norm_last(v)


def dynamic_routing(votes, logit_init, cfg, subject_blocks=1):
    """Route votes (B, V', N, D) into class capsules over cfg.routing_iters.

    ``logit_init`` is a learned (V0, N) array broadcast per sample; when
    ``subject_blocks`` > 1 the V' = blocks * V0 slots share it block-wise and
    the vote sum is accumulated per block first, which keeps the result
    bit-identical under an exchange of the two subject blocks.
    """
    b, v_total, n, d = votes.shape
    blocks = subject_blocks
    if v_total % blocks != 0:
        raise DimensionError(
            f"dynamic_routing: {v_total} slots not divisible into {blocks} blocks"
        )
    v0 = v_total // blocks
    if logit_init.shape != (v0, n):
        raise DimensionError(
            f"dynamic_routing: logit_init {logit_init.shape} != ({v0}, {n})"
        )

    votes_blocked = ad.reshape(votes, (b, blocks, v0, n, d))
    logits = ad.broadcast_to(ad.reshape(logit_init, (1, 1, v0, n)), (b, blocks, v0, n))

    trace = []
    couplings = capsules = None
    for it in range(cfg.routing_iters):
        couplings = ad.softmax(logits, axis=3)
        mixed = ad.contract("bmij,bmijd->bmjd", couplings, votes_blocked)
        capsules = ad.squash(ad.reduce_sum(mixed, axis=1))
        trace.append(
            RoutingSnapshot(
                logits=logits.data.reshape(b, v_total, n).copy(),
                couplings=couplings.data.reshape(b, v_total, n).copy(),
                capsules=capsules.data.copy(),
            )
        )
        if it + 1 < cfg.routing_iters:
            agreement = ad.contract("bmijd,bjd->bmij", votes_blocked, capsules)
            logits = logits + agreement * cfg.alpha

    return RoutingState(
        votes=votes,
        logits=ad.reshape(logits, (b, v_total, n)),
        couplings=ad.reshape(couplings, (b, v_total, n)),
        capsules=capsules,
        trace=trace,
    )


def capsule_network(features, params, cfg, subject_blocks=1):
    """Primary capsules, votes, and routing for one path.

    ``params`` carries ``proj_w``/``proj_b`` (flattened column -> P),
    ``votes_w`` (V0, N, P, D) and ``logit_init`` (V0, N); vote transforms are
    shared across subject blocks by tiling.
    """
    b, c, t, v_total = features.shape
    blocks = subject_blocks
    v0 = v_total // blocks
    if v0 * blocks != v_total:
        raise DimensionError(
            f"capsule_network: {v_total} slots not divisible into {blocks} blocks"
        )
    if blocks == 1:
        u = form_primary_capsules(features, params["proj_w"], params["proj_b"])
        w_full = params["votes_w"]
    else:
        parts = [
            form_primary_capsules(
                ad.narrow(features, 3, m * v0, v0), params["proj_w"], params["proj_b"]
            )
            for m in range(blocks)
        ]
        u = ad.concat(parts, axis=1)
        n, p, d = params["votes_w"].shape[1:]
        w_full = ad.reshape(
            ad.broadcast_to(
                ad.reshape(params["votes_w"], (1, v0, n, p, d)), (blocks, v0, n, p, d)
            ),
            (v_total, n, p, d),
        )
    votes = compute_votes(u, w_full)
    state = dynamic_routing(votes, params["logit_init"], cfg, subject_blocks=blocks)
    state.primary = u
    return state


def init_capsule_params(rng, v0, flat_features, cfg):
    """One path's parameters; logits start at zero (uniform couplings)."""
    p, d, n = cfg.primary_dim, cfg.caps_dim, cfg.num_classes
    return {
        "proj_w": ad.tensor(
            rng.normal(0.0, np.sqrt(1.0 / flat_features), size=(flat_features, p))
        ),
        "proj_b": ad.tensor(np.zeros(p)),
        "votes_w": ad.tensor(rng.normal(0.0, np.sqrt(1.0 / p), size=(v0, n, p, d))),
        "logit_init": ad.tensor(np.zeros((v0, n))),
    }
