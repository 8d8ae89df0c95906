"""Full model: temporal feature stack, per-stage capsule pairs, soft voting.

The (B, C, T, V, M) input folds its subject axis into the joint axis
(subject-major, so each subject's V slots stay contiguous). Capsule networks
attach to the last ``stages`` feature maps; per stage, each subject gets a
personalized path over its own slots (parameters shared across subjects) and
one global path consumes every slot with transforms tied across subjects.
The per-subject class capsule is the personalized and global capsules
concatenated along the instantiation axis; a stage's class scores are the
subject-mean of those capsule lengths, and stages are summed (soft voting).

Because personalized parameters are shared and global transforms are tied,
exchanging the two subject slots permutes the per-subject routing states and
leaves the final scores bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import capsules, restcn
from .config import ModelConfig
from .errors import ContractError, DimensionError

MARGIN_POS = 0.9
MARGIN_NEG = 0.1
NEG_WEIGHT = 0.5


@dataclass
class ModelParams:
    cfg: ModelConfig
    blocks: list  # per res-tcn block: {"conv1": {"w","b"}, ...}
    stages: list  # per used stage: {"pers": {...}, "glob": {...}}
    registry: dict  # fixed-order name -> DiffTensor, used by optimizer/checkpoints

    def tensors(self):
        return list(self.registry.values())

    def zero_grads(self):
        for t in self.registry.values():
            t.grad = None


def stage_block_indices(cfg):
    """Indices of the feature maps the capsule stages attach to (deepest S)."""
    n_blocks = len(cfg.channels)
    return list(range(n_blocks - cfg.stages, n_blocks))


def stage_shapes(cfg):
    """(channels, temporal extent) after each used block."""
    t = cfg.frames
    extents = []
    for c in cfg.channels:
        t = t // cfg.pool_window
        if t < 1:
            raise ContractError(
                f"frames={cfg.frames} too short for {len(cfg.channels)} pools "
                f"of window {cfg.pool_window}"
            )
        extents.append(t)
    return [(cfg.channels[i], extents[i]) for i in stage_block_indices(cfg)]


def restcn_config(cfg):
    return restcn.ResTcnConfig(
        kernel=cfg.kernel,
        channels=tuple(cfg.channels),
        pool_window=cfg.pool_window,
        batch_norm=cfg.batch_norm,
    )


def capsule_config(cfg):
    return capsules.CapsuleConfig(
        num_classes=cfg.num_classes,
        primary_dim=cfg.primary_dim,
        caps_dim=cfg.caps_dim,
        routing_iters=cfg.routing_iters,
        alpha=cfg.routing_alpha,
    )


def init_params(cfg, seed):
    """All learnable arrays, registered in a fixed order for serialization."""
    rng = np.random.default_rng(seed)
    registry = {}

    blocks = restcn.init_stack_params(rng, cfg.in_channels, restcn_config(cfg))
    for bi, block in enumerate(blocks):
        for part, conv in block.items():
            if part.startswith("bn_"):
                registry[f"block{bi}.{part}"] = conv
            else:
                registry[f"block{bi}.{part}.w"] = conv["w"]
                registry[f"block{bi}.{part}.b"] = conv["b"]

    caps_cfg = capsule_config(cfg)
    stages = []
    for si, (c, t) in enumerate(stage_shapes(cfg)):
        paths = {}
        for path in ("pers", "glob"):
            p = capsules.init_capsule_params(rng, cfg.joints, c * t, caps_cfg)
            for key, tensor in p.items():
                registry[f"stage{si}.{path}.{key}"] = tensor
            paths[path] = p
        stages.append(paths)

    return ModelParams(cfg=cfg, blocks=blocks, stages=stages, registry=registry)


@dataclass
class StagePrediction:
    scores: ad.DiffTensor  # (B, N)
    capsules: np.ndarray  # (B, M, N, 2D) per-subject concatenated capsules
    personalized: list = field(default_factory=list)  # RoutingState per subject
    global_state: capsules.RoutingState | None = None


def fold_subjects(x, cfg):
    """(B, C, T, V, M) -> (B, C, T, M*V), subject-major slot order."""
    b, c, t, v, m = x.shape
    if (c, v, m) != (cfg.in_channels, cfg.joints, cfg.subjects):
        raise DimensionError(
            f"input {x.shape} does not match config "
            f"(C={cfg.in_channels}, V={cfg.joints}, M={cfg.subjects})"
        )
    return ad.reshape(ad.transpose(x, (0, 1, 2, 4, 3)), (b, c, t, m * v))


def forward(x, params, cfg):
    """Scores (B, N) plus per-stage predictions for introspection."""
    b = x.shape[0]
    v, m = cfg.joints, cfg.subjects
    caps_cfg = capsule_config(cfg)

    folded = fold_subjects(x, cfg)
    feats = restcn.stage_features(folded, params.blocks, restcn_config(cfg))
    used = [feats[i] for i in stage_block_indices(cfg)]

    stage_preds = []
    for feat, paths in zip(used, params.stages):
        glob = capsules.capsule_network(feat, paths["glob"], caps_cfg, subject_blocks=m)
        per_subject = []
        norms = []
        caps_np = np.zeros((b, m, cfg.num_classes, 2 * cfg.caps_dim))
        for mi in range(m):
            pers = capsules.capsule_network(
                ad.narrow(feat, 3, mi * v, v), paths["pers"], caps_cfg
            )
            per_subject.append(pers)
            joint_caps = ad.concat([pers.capsules, glob.capsules], axis=2)
            caps_np[:, mi] = joint_caps.data
            norms.append(capsules.capsule_lengths(joint_caps))
        total = norms[0]
        for n_ in norms[1:]:
            total = total + n_
        stage_scores = total * (1.0 / m)
        stage_preds.append(
            StagePrediction(
                scores=stage_scores,
                capsules=caps_np,
                personalized=per_subject,
                global_state=glob,
            )
        )

    final = soft_vote([sp.scores for sp in stage_preds])
    return final, stage_preds


def soft_vote(stage_scores):
    """Elementwise sum of per-stage class scores."""
    if not stage_scores:
        raise ContractError("soft_vote needs at least one stage")
    total = stage_scores[0]
    for s in stage_scores[1:]:
        total = total + s
    return total


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def margin_loss(scores, labels, num_stages=1):
    """Capsule margin loss on stage-summed scores rescaled back by 1/S.

    L = sum_k [ T_k max(0, m+ - a_k)^2 + w (1-T_k) max(0, a_k - m-)^2 ],
    averaged over the batch, with a = scores / num_stages.
    """
    b, n = scores.shape
    t = ad.tensor(one_hot(labels, n))
    a = scores * (1.0 / num_stages)
    pos = ad.relu(ad.shift(a * -1.0, MARGIN_POS))
    neg = ad.relu(ad.shift(a, -MARGIN_NEG))
    per_entry = t * (pos * pos) + (ad.shift(t * -1.0, 1.0) * (neg * neg)) * NEG_WEIGHT
    return ad.reduce_sum(per_entry) * (1.0 / b)


def cross_entropy_loss(scores, labels, num_stages=1):
    """Softmax cross-entropy over stage-summed scores (ablation switch)."""
    b, n = scores.shape
    t = ad.tensor(one_hot(labels, n))
    logp = ad.log(ad.softmax(scores, axis=1))
    return ad.reduce_sum(t * logp) * (-1.0 / b)


def loss_for(cfg):
    return margin_loss if cfg.loss == "margin" else cross_entropy_loss


def batch_tensor(samples):
    """Stack preprocessed samples into one (B, C, T, V, M) input tensor."""
    data = np.stack([s.data for s in samples])
    labels = np.array([s.label for s in samples], dtype=int)
    return ad.tensor(data), labels
