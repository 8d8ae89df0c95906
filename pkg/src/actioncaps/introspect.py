"""Routing introspection: coupling exports, consistency maps, heatmaps.

Couplings are written as CSV matrices with classes as rows and joint slots as
columns (17 significant digits, LF endings) plus binary P5 PGM renderings.
Consistency maps average the ground-truth-class coupling row over a class's
samples; the accumulation uses exact rational arithmetic so merging maps over
any partition of a dataset reproduces the whole-dataset map bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import ContractError
from .model import forward

NTU_JOINT_NAMES = (
    "base of spine", "middle of spine", "neck", "head",
    "left shoulder", "left elbow", "left wrist", "left hand",
    "right shoulder", "right elbow", "right wrist", "right hand",
    "left hip", "left knee", "left ankle", "left foot",
    "right hip", "right knee", "right ankle", "right foot",
    "spine", "left hand tip", "left thumb", "right hand tip", "right thumb",
)


def joint_labels(v_total, joints_per_subject=None):
    """Human-readable slot labels; subject 2+ slots get a suffix."""
    v0 = joints_per_subject or v_total
    blocks = v_total // v0 if v_total % v0 == 0 else 1
    if blocks == 1:
        v0 = v_total

    def base(v):
        if v0 == len(NTU_JOINT_NAMES):
            return NTU_JOINT_NAMES[v]
        return f"j{v:02d}"

    out = []
    for m in range(blocks):
        suffix = "" if m == 0 else f" (p{m + 1})"
        out.extend(base(v) + suffix for v in range(v0))
    return out


def _fmt(value):
    return f"{value:.17g}"


def write_matrix_csv(matrix, path, col_labels, absent_rows=()):
    """Class-by-slot values under a header of slot labels; absent rows blank."""
    lines = [",".join(col_labels)]
    for i, row in enumerate(matrix):
        if i in absent_rows:
            lines.append(",".join("" for _ in row))
        else:
            lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_matrix_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append([float(c) if c else np.nan for c in cells])
    return header, np.array(rows)


def export_coupling(state, iteration, path, col_labels=None, sample_index=0):
    """One routing iteration's couplings as an (N x V') CSV."""
    if not 0 <= iteration < len(state.trace):
        raise ContractError(
            f"iteration {iteration} outside recorded range [0, {len(state.trace)})"
        )
    c = state.trace[iteration].couplings[sample_index]  # (V', N)
    matrix = c.T  # classes as rows, joints as columns
    labels = col_labels or joint_labels(matrix.shape[1])
    write_matrix_csv(matrix, path, labels)
    return matrix


def render_heatmap(matrix, path):
    """Binary PGM (P5, maxval 255); pixel = round-half-up of 255 * value."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"heatmap needs a 2-d matrix, got shape {matrix.shape}")
    if not np.all((matrix >= 0.0) & (matrix <= 1.0)):
        raise ContractError("heatmap entries must lie in [0, 1]")
    pixels = np.floor(255.0 * matrix + 0.5).astype(np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


@dataclass
class ConsistencyMap:
    """Per-class mean of the true-class coupling row, over V' joint slots."""

    matrix: np.ndarray  # (N, V') floats in [0, 1]; absent classes are zero rows
    present: list  # bool per class; False marks no-sample classes, not zeros
    stage: int
    class_labels: list = None
    slot_labels: list = None
    row_sums: list = field(repr=False, default=None)  # exact Fractions per class
    counts: list = None

    @property
    def absent_rows(self):
        return tuple(i for i, p in enumerate(self.present) if not p)


def _select_state(stage_pred, path, subject):
    if path == "global":
        return stage_pred.global_state
    if path == "personalized":
        return stage_pred.personalized[subject]
    raise ContractError(f"unknown capsule path {path!r}")


def routing_states_for(params, sample, stage, path="global", subject=0):
    """Forward one sample; return the chosen path's RoutingState."""
    cfg = params.cfg
    if not 0 <= stage < cfg.stages:
        raise ContractError(f"stage {stage} outside [0, {cfg.stages})")
    x, _ = model_mod.batch_tensor([sample])
    _, preds = forward(x, params, cfg)
    return _select_state(preds[stage], path, subject)


def consistency_map(params, dataset, stage, path="global", subject=0, batch_size=16):
    """Average each class's own coupling row over that class's samples."""
    cfg = params.cfg
    if not 0 <= stage < cfg.stages:
        raise ContractError(f"stage {stage} outside [0, {cfg.stages})")
    n = cfg.num_classes
    v_total = cfg.joints * (cfg.subjects if path == "global" else 1)

    row_sums = [[Fraction(0)] * v_total for _ in range(n)]
    counts = [0] * n
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        x, labels = model_mod.batch_tensor(chunk)
        _, preds = forward(x, params, cfg)
        couplings = _select_state(preds[stage], path, subject).couplings.data
        for bi, label in enumerate(labels):
            row = couplings[bi, :, label]
            sums = row_sums[label]
            for vi in range(v_total):
                sums[vi] += Fraction(float(row[vi]))
            counts[label] += 1

    matrix = np.zeros((n, v_total))
    present = []
    for a in range(n):
        if counts[a]:
            matrix[a] = [float(s / counts[a]) for s in row_sums[a]]
            present.append(True)
        else:
            present.append(False)
    return ConsistencyMap(
        matrix=matrix,
        present=present,
        stage=stage,
        class_labels=[f"class {a}" for a in range(n)],
        slot_labels=joint_labels(v_total, joints_per_subject=cfg.joints),
        row_sums=row_sums,
        counts=counts,
    )


def merge_consistency_maps(maps):
    """Sample-count-weighted merge; exact because sums are rational."""
    if not maps:
        raise ContractError("nothing to merge")
    first = maps[0]
    n = len(first.counts)
    v_total = len(first.row_sums[0])
    row_sums = [[Fraction(0)] * v_total for _ in range(n)]
    counts = [0] * n
    for m in maps:
        if m.stage != first.stage:
            raise ContractError("cannot merge maps from different stages")
        for a in range(n):
            counts[a] += m.counts[a]
            for vi in range(v_total):
                row_sums[a][vi] += m.row_sums[a][vi]
    matrix = np.zeros((n, v_total))
    present = []
    for a in range(n):
        if counts[a]:
            matrix[a] = [float(s / counts[a]) for s in row_sums[a]]
            present.append(True)
        else:
            present.append(False)
    return ConsistencyMap(
        matrix=matrix,
        present=present,
        stage=first.stage,
        class_labels=first.class_labels,
        slot_labels=first.slot_labels,
        row_sums=row_sums,
        counts=counts,
    )
