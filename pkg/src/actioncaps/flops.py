"""Closed-form per-layer FLOP accounting at a config's shapes.

Each multiply-add counts as 2 FLOPs. Convolutions, the primary-capsule
projections, vote transforms, and the routing contractions are counted;
activations, pooling, softmax and bias adds are not. Totals are per sample
(batch size one).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import stage_shapes

# Reference whole-dataset budgets for the full-scale configs, printed next to
# computed totals for comparison; the two published NTU figures disagree with
# each other, so neither is asserted anywhere.
REFERENCE_GFLOPS = {"ntu": (3.48, 3.84), "nucla": (0.6,)}


@dataclass
class FlopReport:
    rows: list  # (layer name, flops)
    total: int

    @property
    def gflops(self):
        return self.total / 1e9

    def table(self):
        width = max(len(name) for name, _ in self.rows)
        lines = [f"{name:<{width}}  {flops:>16,}" for name, flops in self.rows]
        lines.append(f"{'total':<{width}}  {self.total:>16,}")
        lines.append(f"{'total GFLOPs':<{width}}  {self.gflops:>16.4f}")
        return "\n".join(lines)


def flop_count(cfg):
    """Deterministic multiply-add tally for one forward pass of one sample."""
    rows = []
    slots = cfg.joints * cfg.subjects
    t = cfg.frames
    c_in = cfg.in_channels
    for bi, c_out in enumerate(cfg.channels):
        rows.append((f"block{bi}.conv1", 2 * c_out * c_in * cfg.kernel * t * slots))
        rows.append((f"block{bi}.conv2", 2 * c_out * c_out * cfg.kernel * t * slots))
        rows.append((f"block{bi}.conv3", 2 * c_out * c_out * cfg.kernel * t * slots))
        if c_in != c_out:
            rows.append((f"block{bi}.proj", 2 * c_out * c_in * 1 * t * slots))
        t //= cfg.pool_window
        c_in = c_out

    n, p, d, r = cfg.num_classes, cfg.primary_dim, cfg.caps_dim, cfg.routing_iters
    routing_terms = r + (r - 1)  # weighted vote sums plus agreement updates
    for si, (c, t_s) in enumerate(stage_shapes(cfg)):
        for path, v_eff, copies in (
            ("pers", cfg.joints, cfg.subjects),
            ("glob", slots, 1),
        ):
            prefix = f"stage{si}.{path}"
            rows.append((f"{prefix}.proj", copies * 2 * v_eff * (c * t_s) * p))
            rows.append((f"{prefix}.votes", copies * 2 * v_eff * n * p * d))
            rows.append(
                (f"{prefix}.routing", copies * 2 * routing_terms * v_eff * n * d)
            )
    return FlopReport(rows=rows, total=sum(f for _, f in rows))
