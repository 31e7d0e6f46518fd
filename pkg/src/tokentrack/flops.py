"""Analytic multiply-accumulate accounting for the attention stack.

Score and value MACs scale with Ns*(Nr+Ns) when only search rows hold
queries, versus (Nr+Ns)^2 for full joint attention. Head count folds into
the embedding dim. Projections are reported separately: with frozen
reference tokens their K/V projections happen once per step, not per
layer.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class FlopsReport:
    mode: str
    scores_values: int   # QK^T plus AV multiply-accumulates, all layers
    projections: int     # Q/K/V/output projection multiply-accumulates
    total: int


def attention_flops(ns, nr, d, layers, mode):
    """MAC counts for one frame through an ``layers``-deep attention stack."""
    if min(ns, d, layers) <= 0 or nr < 0:
        raise ValueError("dimensions must be positive (nr may be zero)")
    if mode not in ("uni", "bi"):
        raise ValueError(f"mode must be 'uni' or 'bi', got '{mode}'")
    nt = nr + ns
    if mode == "uni":
        scores_values = 2 * ns * nt * d * layers
        projections = 4 * ns * d * d * layers + 2 * nr * d * d
    else:
        scores_values = 2 * nt * nt * d * layers
        projections = 4 * nt * d * d * layers
    return FlopsReport(mode=mode, scores_values=scores_values,
                       projections=projections,
                       total=scores_values + projections)
