"""Optimization loop, schedule, metrics, and evaluation.

Training is fully reproducible from (seed, config, dataset): shuffling comes
from one seeded generator, every tensor op is float64, and checkpoints are
written each epoch via temp-file-plus-rename. The metrics log is one JSON
object per line: {"epoch", "lr", "train_loss", "train_acc", "wall_ms"};
wall_ms is real elapsed time and is the one field that varies across runs.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .checkpoint import save_checkpoint
from .errors import ContractError


def lr_schedule(epoch, cfg):
    """Linear warmup to lr0, then divide by 10 at each decay epoch.

    Warmup epoch e takes lr0 * (e+1)/warmup; from each decay epoch onward the
    rate is multiplied by decay_factor once per decay boundary passed.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(
            f"epoch {epoch} outside schedule range [0, {cfg.total_epochs})"
        )
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    lr = cfg.lr0
    for d in cfg.decay_epochs:
        if d <= epoch:
            lr *= cfg.decay_factor
    return lr


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.step = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.registry.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.registry.items()}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected update; ``grads`` maps parameter name to array."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, tensor in params.registry.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def train_step(params, cfg, batch_x, batch_labels, state, lr, train_cfg):
    """Forward/backward on one batch plus an optimizer update.

    Returns (loss value, batch predictions).
    """
    loss_fn = model_mod.loss_for(cfg)
    params.zero_grads()
    with ad.Tape() as tape:
        scores, _ = model_mod.forward(batch_x, params, cfg)
        loss = loss_fn(scores, batch_labels, num_stages=cfg.stages)
        tape.backward(loss)
    grads = {k: t.grad_or_zero() for k, t in params.registry.items()}
    adam_step(
        params,
        grads,
        state,
        lr,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.eps,
    )
    return loss.item(), scores.data.argmax(axis=1)


def train(model_cfg, train_cfg, dataset, out_dir, log_name="metrics.jsonl"):
    """Epoch loop with seeded shuffling; returns (params, metrics rows).

    Writes one checkpoint per epoch under ``out_dir``/checkpoints and appends
    metrics lines to ``out_dir``/``log_name``.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name

    params = model_mod.init_params(model_cfg, seed=train_cfg.seed)
    state = AdamState(params)
    rng = np.random.default_rng(train_cfg.seed)
    metrics = []

    with log_path.open("w") as log:
        for epoch in range(train_cfg.total_epochs):
            t0 = time.monotonic()
            lr = lr_schedule(epoch, train_cfg)
            order = rng.permutation(len(dataset))
            losses = []
            correct = 0
            for batch_idx in _batches(order, train_cfg.batch_size):
                samples = [dataset[i] for i in batch_idx]
                batch_x, labels = model_mod.batch_tensor(samples)
                loss, pred = train_step(
                    params, model_cfg, batch_x, labels, state, lr, train_cfg
                )
                losses.append(loss * len(samples))
                correct += int((pred == labels).sum())
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": sum(losses) / len(dataset),
                "train_acc": correct / len(dataset),
                "wall_ms": int((time.monotonic() - t0) * 1000),
            }
            metrics.append(row)
            log.write(json.dumps(row) + "\n")
            save_checkpoint(params, ckpt_dir / f"epoch_{epoch:04d}.acpk")
    save_checkpoint(params, out_dir / "final.acpk")
    return params, metrics


def evaluate(params, dataset, batch_size=32):
    """Top-1 accuracy, per-class accuracy, and the confusion matrix.

    Argmax ties break toward the lower class index.
    """
    cfg = params.cfg
    n = cfg.num_classes
    confusion = np.zeros((n, n), dtype=int)
    for i in range(0, len(dataset), batch_size):
        samples = dataset[i : i + batch_size]
        batch_x, labels = model_mod.batch_tensor(samples)
        scores, _ = model_mod.forward(batch_x, params, cfg)
        preds = scores.data.argmax(axis=1)
        for want, got in zip(labels, preds):
            confusion[want, got] += 1
    per_class = np.full(n, np.nan)
    counts = confusion.sum(axis=1)
    nonzero = counts > 0
    per_class[nonzero] = confusion.diagonal()[nonzero] / counts[nonzero]
    total = confusion.sum()
    top1 = confusion.trace() / total if total else float("nan")
    return {
        "top1": float(top1),
        "per_class": per_class,
        "confusion": confusion,
    }
